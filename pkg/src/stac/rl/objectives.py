"""Batch objectives for the actor and critic, and the leader's total derivative.

Objectives are closures ``f(theta, w) -> scalar`` over one fixed batch (and,
for SAC, one fixed set of reparameterization draws), so the same sample
enters every factor of the total derivative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from stac.diff import HessianVectorProduct, MixedProduct, ParamVector, partial_gradients
from stac.linalg import LinearOperator, SolverBreakdownError, conjugate_gradient
from stac.rl.buffer import Batch
from stac.rl.config import AlgoConfig, ConfigError
from stac.rl.estimators import GradEstimate, Surrogate

log = logging.getLogger(__name__)


@dataclass
class Objectives:
    """Actor objective ``J`` (maximized) and critic loss ``L`` (minimized), both as ``f(theta, w)``.

    ``theta_L`` optionally replaces ``L`` wherever a derivative in ``theta`` is
    needed. On-policy losses depend on ``theta`` through the sampling
    distribution, which direct differentiation of the batch loss cannot see.
    """

    J: Surrogate
    L: Surrogate
    batch_size: int
    theta_L: Surrogate | None = None


def _require_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("batch is empty")


def ddpg_objectives(batch: Batch, policy, critic, target_w: torch.Tensor, gamma: float) -> Objectives:
    """Deterministic-actor objectives; next-state actions come from the current policy."""
    _require_batch(batch)
    w0 = target_w.detach()
    not_done = 1.0 - batch.done

    def J(theta, w):
        return critic(w, batch.s, policy.action(theta, batch.s)).mean()

    def L(theta, w):
        y = batch.r + gamma * not_done * critic(w0, batch.s2, policy.action(theta, batch.s2))
        return ((critic(w, batch.s, batch.a) - y) ** 2).mean()

    return Objectives(J, L, len(batch))


def sac_objectives(batch: Batch, policy, critic, target_w: torch.Tensor, eta: float, gamma: float,
                   eps: np.ndarray, eps_next: np.ndarray) -> Objectives:
    """Entropy-regularized objectives with a double-Q critic.

    ``eps`` and ``eps_next`` are the standard-normal draws behind ``a_theta(s)``
    and ``a_theta(s')``. The target depends on ``theta`` through ``a_theta(s')``
    and never on ``w``.
    """
    _require_batch(batch)
    w0 = target_w.detach()
    not_done = 1.0 - batch.done

    def J(theta, w):
        a, _, logp = policy.rsample(theta, batch.s, eps)
        return (critic.min(w, batch.s, a) - eta * logp).mean()

    def L(theta, w):
        a2, _, logp2 = policy.rsample(theta, batch.s2, eps_next)
        y = batch.r + gamma * not_done * (critic.min(w0, batch.s2, a2) - eta * logp2)
        q1, q2 = critic(w, batch.s, batch.a)
        return ((q1 - y) ** 2 + (q2 - y) ** 2).mean()

    return Objectives(J, L, len(batch))


def total_derivative(obj: Objectives, theta: ParamVector, w: ParamVector, cfg: AlgoConfig) -> GradEstimate:
    """Leader's regularized total derivative on one batch, in the leader's own sense.

    With the actor leading the result is an ascent direction on ``J``; with
    the critic leading it is a gradient of ``L``. Each factor (own partial,
    follower Hessian, mixed partial, leader cross partial) is evaluated on the
    same batch and then combined. The follower's own gradient at the same
    point is returned alongside as ``follower_grad``. A CG breakdown falls back to the individual
    gradient with ``fallback`` set.
    """
    if not cfg.stackelberg:
        raise ConfigError("total_derivative needs stackelberg=on")
    lam = 0.0 if cfg.lam is None else cfg.lam
    if cfg.leader == "actor":
        own, cross = partial_gradients(lambda a, b: -obj.J(a, b), theta, w)
        hess = HessianVectorProduct(lambda b: obj.L(theta.data, b), w)
        mixed_f = obj.theta_L or obj.L
        mixed = MixedProduct(mixed_f, theta, w)
        follower_grad = ParamVector(hess.grad.detach(), w.layout)
        sign = -1.0
    else:
        if cfg.algo == "AC":
            raise ConfigError("critic-as-leader is only defined for off-policy algorithms")
        own, cross = partial_gradients(lambda b, a: obj.L(a, b), w, theta)
        hess = HessianVectorProduct(lambda a: -obj.J(a, w.data), theta)
        mixed = MixedProduct(lambda b, a: -obj.J(a, b), w, theta)
        follower_grad = ParamVector(-hess.grad.detach(), theta.layout)
        sign = 1.0

    diag = {"leader_grad_norm": own.norm(), "follower_grad_norm": follower_grad.norm(),
            "correction_norm": 0.0, "cg_residual": 0.0, "fallback": 0.0}
    try:
        q, info = conjugate_gradient(LinearOperator(hess, hess.dim), cross, lam, cfg.cg_iters, cfg.cg_tol)
        correction = mixed(q)
        if not torch.isfinite(correction).all():
            raise SolverBreakdownError(info.iterations, float("nan"))
    except SolverBreakdownError as err:
        log.warning("total derivative fell back to the individual gradient: %s", err)
        diag.update(fallback=1.0, cg_residual=float(err.residual))
        return GradEstimate(own * sign, obj.batch_size, diag, follower_grad)
    diag.update(correction_norm=float(correction.norm()), cg_residual=info.residual_norm)
    return GradEstimate((own - correction) * sign, obj.batch_size, diag, follower_grad)


def individual_directions(obj: Objectives, theta: ParamVector, w: ParamVector
                          ) -> tuple[ParamVector, ParamVector]:
    """``(grad_theta J, grad_w L)`` on the batch."""
    dJ, _ = partial_gradients(obj.J, theta, w)
    _, dL = partial_gradients(obj.L, theta, w)
    return dJ, dL


def leader_direction(obj: Objectives, theta: ParamVector, w: ParamVector, cfg: AlgoConfig
                     ) -> GradEstimate:
    """The leader's update direction in its own sense, plus the follower's gradient at the same point.

    Without the Stackelberg rule the leader designation is ignored: the
    direction is the actor's individual gradient and the follower is the critic.
    """
    if cfg.stackelberg:
        return total_derivative(obj, theta, w, cfg)
    d, _ = partial_gradients(obj.J, theta, w)
    other = partial_gradients(obj.L, theta, w)[1]
    return GradEstimate(d, obj.batch_size,
                        {"leader_grad_norm": d.norm(), "follower_grad_norm": other.norm(),
                         "correction_norm": 0.0, "cg_residual": 0.0, "fallback": 0.0}, other)
