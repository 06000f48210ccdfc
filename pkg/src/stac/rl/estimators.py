"""Score-function estimators for the actor gradient and for the critic loss's dependence on the policy.

Each estimator is built as a differentiable surrogate ``S(theta, w)`` whose
gradient in ``theta`` is the estimate. Mixed second-order terms then come from
differentiating the same surrogate again, which keeps the estimate and its
derivative consistent on one batch.

Estimators accept any per-step estimate of ``Q^pi(s_t, a_t)``: Monte Carlo
reward-to-go for sampled data, or exact table values when the batch is a full
enumeration of a finite MDP (weights are then trajectory probabilities).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from stac.diff import DTYPE, MixedProduct, ParamVector, as_tensor
from stac.env import EnumeratedTrajectory, FiniteMDP

Surrogate = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class GradEstimate:
    direction: ParamVector
    batch_size: int
    diagnostics: dict[str, float] = field(default_factory=dict)
    follower_grad: ParamVector | None = None


@dataclass
class Rollout:
    """One trajectory in estimator form.

    ``actions`` holds discrete indices or, for squashed-Gaussian policies,
    pre-squash values. ``weight`` is the trajectory's share of the average.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    weight: float = 1.0

    def __len__(self) -> int:
        return len(self.rewards)


def mc_returns(rewards: Sequence[float], gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """Reward-to-go ``G_t = sum_{t' >= t} gamma^(t'-t) r_t'`` plus a discounted tail value."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("trajectory is empty")
    out = np.empty_like(rewards)
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae_advantages(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                   last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimates with ``V(s_T) = last_value`` (0 for terminal states)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != rewards.shape:
        raise ValueError("need one value per reward")
    v_next = np.append(values[1:], last_value)
    deltas = rewards + gamma * v_next - values
    return mc_returns(deltas, gamma * lam)


def score_log_prob(policy, theta: torch.Tensor, states, actions) -> torch.Tensor:
    """Per-step ``log pi(a_t | s_t)``; squashed-Gaussian actions are given pre-squash."""
    if policy.kind == "gaussian-tanh":
        return policy.log_prob_u(theta, states, actions)
    return policy.log_prob(theta, states, actions)


@dataclass
class _Flat:
    states: np.ndarray
    actions: np.ndarray
    t: np.ndarray
    traj: np.ndarray
    weight: np.ndarray
    starts: np.ndarray


def _flatten(rollouts: Sequence[Rollout]) -> _Flat:
    if len(rollouts) == 0:
        raise ValueError("batch is empty")
    lengths = [len(r) for r in rollouts]
    if min(lengths) == 0:
        raise ValueError("batch contains an empty trajectory")
    starts = np.cumsum([0] + lengths[:-1])
    return _Flat(
        states=np.concatenate([np.asarray(r.states, dtype=np.float64) for r in rollouts]),
        actions=np.concatenate([np.asarray(r.actions) for r in rollouts]),
        t=np.concatenate([np.arange(n) for n in lengths]),
        traj=np.concatenate([np.full(n, i) for i, n in enumerate(lengths)]),
        weight=np.array([r.weight for r in rollouts], dtype=np.float64),
        starts=starts,
    )


def _per_step(values: Sequence[Sequence[float]], rollouts: Sequence[Rollout]) -> torch.Tensor:
    if len(values) != len(rollouts) or any(len(v) != len(r) for v, r in zip(values, rollouts)):
        raise ValueError("need one per-step value array per rollout")
    return torch.as_tensor(np.concatenate([np.asarray(v, dtype=np.float64) for v in values]))


def policy_gradient_surrogate(rollouts: Sequence[Rollout], policy, psi: Sequence[Sequence[float]],
                              gamma: float | None = None) -> Callable[[torch.Tensor], torch.Tensor]:
    """``sum_i weight_i sum_t [gamma^t] log pi(a_t|s_t) psi_t``.

    ``psi`` is the per-step weight (critic values, advantages or returns).
    Passing ``gamma`` applies the ``gamma^t`` state weighting of the exact
    discounted gradient.
    """
    flat = _flatten(rollouts)
    psi_t = _per_step(psi, rollouts)
    w = torch.as_tensor(flat.weight[flat.traj])
    if gamma is not None:
        w = w * torch.as_tensor(gamma ** flat.t.astype(np.float64))

    def surrogate(theta: torch.Tensor) -> torch.Tensor:
        logp = score_log_prob(policy, theta, flat.states, flat.actions)
        return (w * logp * psi_t).sum()

    return surrogate


def policy_gradient(rollouts: Sequence[Rollout], policy, theta, psi: Sequence[Sequence[float]],
                    gamma: float | None = None) -> GradEstimate:
    """Score-function estimate of the actor gradient (ascent direction)."""
    from stac.diff import gradient

    surrogate = policy_gradient_surrogate(rollouts, policy, psi, gamma)
    g = gradient(surrogate, theta)
    return GradEstimate(g, sum(len(r) for r in rollouts), {"norm": g.norm()})


def thm1_surrogate(rollouts: Sequence[Rollout], policy, critic, gamma: float,
                   q_hat: Sequence[Sequence[float]]) -> Surrogate:
    """Surrogate for the Q-form critic loss gradient in ``theta``.

    Per trajectory: ``log pi(a_0|s_0) (Q_w(s_0,a_0) - G_0)^2
    + 2 sum_{t>=1} gamma^t log pi(a_t|s_t) (G_0 - Q_w(s_0,a_0)) G_t``,
    with ``G_t = q_hat[t]``. The tail carries the factor 2 from the chain rule
    on the squared error.
    """
    flat = _flatten(rollouts)
    g = _per_step(q_hat, rollouts)
    g0 = g[torch.as_tensor(flat.starts)]
    s0 = flat.states[flat.starts]
    a0 = flat.actions[flat.starts]
    first = torch.as_tensor(flat.t == 0)
    disc = torch.as_tensor(gamma ** flat.t.astype(np.float64))
    traj = torch.as_tensor(flat.traj)
    weight = torch.as_tensor(flat.weight)[traj]

    def surrogate(theta: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        logp = score_log_prob(policy, theta, flat.states, flat.actions)
        err0 = critic(w, s0, a0) - g0  # Q_w(s_0, a_0) - G_0 per trajectory
        head = logp * err0[traj] ** 2
        tail = 2.0 * disc * logp * (-err0[traj]) * g
        return (weight * torch.where(first, head, tail)).sum()

    return surrogate


def prop1_surrogate(rollouts: Sequence[Rollout], policy, critic, gamma: float,
                    q_hat: Sequence[Sequence[float]], v0_hat: Sequence[float] | None = None) -> Surrogate:
    """Surrogate for the V-form critic loss gradient in ``theta``.

    Per trajectory: ``2 sum_{t>=0} gamma^t log pi(a_t|s_t) (V0 - V_w(s_0)) G_t``
    where ``V0`` estimates ``V^pi(s_0)`` (defaults to ``G_0``).
    """
    flat = _flatten(rollouts)
    g = _per_step(q_hat, rollouts)
    v0 = g[torch.as_tensor(flat.starts)] if v0_hat is None else as_tensor(v0_hat).reshape(-1)
    s0 = flat.states[flat.starts]
    disc = torch.as_tensor(gamma ** flat.t.astype(np.float64))
    traj = torch.as_tensor(flat.traj)
    weight = torch.as_tensor(flat.weight)[traj]

    def surrogate(theta: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        logp = score_log_prob(policy, theta, flat.states, flat.actions)
        gap = v0 - critic(w, s0)
        return (weight * 2.0 * disc * logp * gap[traj] * g).sum()

    return surrogate


def _theta_grad(surrogate: Surrogate, theta, w) -> ParamVector:
    from stac.diff import partial_gradients

    return partial_gradients(surrogate, theta, w)[0]


def thm1_grad_theta_L(rollouts: Sequence[Rollout], policy, critic, gamma: float, theta, w,
                      q_hat: Sequence[Sequence[float]] | None = None) -> GradEstimate:
    """Q-form estimate of the critic loss gradient in ``theta``; ``q_hat`` defaults to MC returns."""
    if q_hat is None:
        q_hat = [mc_returns(r.rewards, gamma) for r in rollouts]
    g = _theta_grad(thm1_surrogate(rollouts, policy, critic, gamma, q_hat), theta, w)
    return GradEstimate(g, sum(len(r) for r in rollouts), {"norm": g.norm()})


def prop1_grad_theta_L(rollouts: Sequence[Rollout], policy, critic, gamma: float, theta, w,
                       q_hat: Sequence[Sequence[float]] | None = None,
                       v0_hat: Sequence[float] | None = None) -> GradEstimate:
    """V-form estimate of the critic loss gradient in ``theta``; ``q_hat`` defaults to MC returns."""
    if q_hat is None:
        q_hat = [mc_returns(r.rewards, gamma) for r in rollouts]
    g = _theta_grad(prop1_surrogate(rollouts, policy, critic, gamma, q_hat, v0_hat), theta, w)
    return GradEstimate(g, sum(len(r) for r in rollouts), {"norm": g.norm()})


def mixed_grad_w_of_theta_L(surrogate: Surrogate, theta, w, q) -> ParamVector:
    """``d/dw <grad_theta L_hat(theta, w), q>`` for a surrogate built on one batch."""
    if len(as_tensor(q).reshape(-1)) != len(as_tensor(theta).reshape(-1)):
        raise ValueError("q must live in the actor's parameter space")
    out = MixedProduct(lambda b, a: surrogate(a, b), w, theta)(q)
    return ParamVector(out, w.layout) if isinstance(w, ParamVector) else ParamVector(out)


def discounted_cumsum_matrix(n: int, gamma: float) -> np.ndarray:
    """Lower-triangular ``M[t, k] = gamma^(t-k)`` for ``k <= t``."""
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    return np.where(diff >= 0, gamma ** np.maximum(diff, 0).astype(np.float64), 0.0)


def prop1_all_starts_surrogate(states: np.ndarray, actions: np.ndarray, returns: np.ndarray,
                               episode_bounds: Sequence[tuple[int, int]], policy, critic,
                               gamma: float) -> Surrogate:
    """V-form estimator averaged over every visited state taken as a start.

    For a start at step ``k`` the estimate is
    ``2 sum_{t>=k} gamma^(t-k) grad log pi_t (G_k - V_w(s_k)) G_t``. Summed over
    ``k`` this is ``sum_t grad log pi_t G_t C_t`` with the forward discounted
    sum ``C_t = gamma C_{t-1} + 2 (G_t - V_w(s_t))`` restarted at each episode,
    matching a critic loss averaged over all visited states.
    """
    n = len(returns)
    g = torch.as_tensor(np.asarray(returns, dtype=np.float64))
    mats = {}
    for lo, hi in episode_bounds:
        if hi - lo not in mats:
            mats[hi - lo] = torch.as_tensor(discounted_cumsum_matrix(hi - lo, gamma))

    def surrogate(theta: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        logp = score_log_prob(policy, theta, states, actions)
        d = 2.0 * (g - critic(w, states))
        c = torch.cat([mats[hi - lo] @ d[lo:hi] for lo, hi in episode_bounds])
        return (logp * g * c).sum() / n

    return surrogate


# --- exact enumeration of tabular problems -----------------------------------------------------


def one_hot(index, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(index)]


def enumeration_rollouts(m: FiniteMDP, trajs: Sequence[EnumeratedTrajectory]) -> list[Rollout]:
    """Rollouts with one-hot states weighted by their exact probabilities."""
    return [Rollout(one_hot(tr.states, m.n_states), np.asarray(tr.actions), np.asarray(tr.rewards),
                    tr.prob) for tr in trajs]


def exact_q_hat(m: FiniteMDP, pi: np.ndarray, trajs: Sequence[EnumeratedTrajectory]) -> list[np.ndarray]:
    """Exact ``Q^pi_t(s_t, a_t)`` along each enumerated trajectory."""
    Q, _ = m.values(pi)
    return [np.array([Q[t, s, a] for t, (s, a) in enumerate(zip(tr.states, tr.actions))]) for tr in trajs]


def exact_v0(m: FiniteMDP, pi: np.ndarray, trajs: Sequence[EnumeratedTrajectory]) -> np.ndarray:
    _, V = m.values(pi)
    return np.array([V[0, tr.states[0]] for tr in trajs])


def tabular_policy_probs(policy, theta, n_states: int) -> np.ndarray:
    with torch.no_grad():
        return policy.probs(as_tensor(theta), torch.eye(n_states, dtype=DTYPE)).numpy()
