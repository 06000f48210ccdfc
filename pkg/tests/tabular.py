"""Tabular fixtures: random finite MDPs with one-hot linear policies and critics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from stac.diff import as_tensor
from stac.env import FiniteMDP
from stac.nets import CategoricalPolicy, MLPSpec, QCritic, ValueCritic
from stac.rl.estimators import tabular_policy_probs

SHAPES = [(2, 2, 2), (3, 2, 3), (2, 3, 1), (3, 3, 2)]


@dataclass
class TabularCase:
    mdp: FiniteMDP
    policy: CategoricalPolicy
    theta: np.ndarray
    q_critic: QCritic
    w_q: np.ndarray
    v_critic: ValueCritic
    w_v: np.ndarray

    def probs(self, theta=None) -> np.ndarray:
        return tabular_policy_probs(self.policy, self.theta if theta is None else theta, self.mdp.n_states)

    def q_table(self, w) -> np.ndarray:
        S, A = self.mdp.n_states, self.mdp.n_actions
        s = torch.eye(S, dtype=torch.float64).repeat_interleave(A, 0)
        a = torch.arange(A).repeat(S).double()
        with torch.no_grad():
            return self.q_critic(as_tensor(w), s, a).numpy().reshape(S, A)

    def v_table(self, w) -> np.ndarray:
        with torch.no_grad():
            return self.v_critic(as_tensor(w), torch.eye(self.mdp.n_states, dtype=torch.float64)).numpy()

    def loss_q(self, theta, w=None) -> float:
        """Exact Q-form critic loss ``E_{s~rho, a~pi}[(Q_w - Q^pi)^2]`` at the first step."""
        pi = self.probs(theta)
        Q, _ = self.mdp.values(pi)
        qw = self.q_table(self.w_q if w is None else w)
        return float((self.mdp.rho[:, None] * pi * (qw - Q[0]) ** 2).sum())

    def loss_v(self, theta, w=None) -> float:
        pi = self.probs(theta)
        _, V = self.mdp.values(pi)
        vw = self.v_table(self.w_v if w is None else w)
        return float((self.mdp.rho * (vw - V[0]) ** 2).sum())

    def value(self, theta) -> float:
        _, V = self.mdp.values(self.probs(theta))
        return float(self.mdp.rho @ V[0])


def make_case(seed: int, shape=None) -> TabularCase:
    S, A, H = shape or SHAPES[seed % len(SHAPES)]
    rng = np.random.default_rng(seed)
    m = FiniteMDP.random(rng, S, A, H)
    pol = CategoricalPolicy(MLPSpec((S, A), ("identity",)))
    theta = rng.normal(size=pol.n_params)

    def feats(s, a):
        idx = torch.argmax(s, -1) * A + a.long()
        return torch.nn.functional.one_hot(idx, S * A).to(torch.float64)

    qc = QCritic(MLPSpec((S * A, 1), ("identity",)), feats)
    vc = ValueCritic(MLPSpec((S, 1), ("identity",)))
    return TabularCase(m, pol, theta, qc, rng.normal(size=qc.n_params), vc, rng.normal(size=vc.n_params))


def perfect_q_weights(case: TabularCase) -> np.ndarray:
    """Critic weights reproducing ``Q^pi_0`` exactly (zero bias, table in the weights)."""
    Q, _ = case.mdp.values(case.probs())
    return np.concatenate([Q[0].reshape(-1), [0.0]])


def perfect_v_weights(case: TabularCase) -> np.ndarray:
    _, V = case.mdp.values(case.probs())
    return np.concatenate([V[0], [0.0]])


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out
