"""Closed-form actor-critic games with a scalar actor and a scalar linear critic.

The deterministic game has actor objective ``J = w * theta`` (maximized) and
critic loss ``L = (w * theta + theta**2 / 5)**2`` (minimized): a one-step task
with reward ``-a**2 / 5`` and critic ``Q_w(a) = w * a``. The entropic variant
replaces the deterministic action with a tanh-squashed Gaussian sample and
adds an entropy bonus to the actor.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from stac.game import JointPoint, LeaderConfig, TwoPlayerGame, integrate

BOX = ((-1.0, 1.0), (-1.0, 1.0))
LOG2 = math.log(2.0)


class SingularityError(ZeroDivisionError):
    pass


def actor_objective(theta: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (w * theta).sum()


def critic_loss(theta: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return ((w * theta + theta ** 2 / 5) ** 2).sum()


def motivating_game() -> TwoPlayerGame:
    """Actor (player 1, max) and critic (player 2, min) on the one-step task."""
    return TwoPlayerGame(actor_objective, critic_loss, (1, 1), "max", "min", BOX)


def quadratic_game() -> TwoPlayerGame:
    """``f1 = x1**2`` and ``f2 = (x2 - x1)**2``, both minimized; the origin is a DSE."""
    return TwoPlayerGame(lambda a, b: (a ** 2).sum(), lambda a, b: ((b - a) ** 2).sum(), (1, 1))


GAMES = {"motivating": motivating_game, "quadratic": quadratic_game}


def oracle_partials(theta: float, w: float) -> dict[str, float]:
    """Hand-derived first and second partials of the motivating game."""
    return {
        "dJ_dtheta": w,
        "dJ_dw": theta,
        "dL_dw": 2 * (w * theta + theta ** 2 / 5) * theta,
        "d2L_dw2": 2 * theta ** 2,
        "d2L_dwdtheta": 4 * w * theta + 1.2 * theta ** 2,
    }


def oracle_total_derivative(theta: float, w: float, lam: float = 0.0) -> float:
    """Actor total derivative (ascent sense) from the closed-form partials.

    With ``lam = 0`` this simplifies to ``-w - 0.6 * theta``.
    """
    p = oracle_partials(theta, w)
    denom = p["d2L_dw2"] + lam
    if denom == 0.0:
        raise SingularityError(f"critic Hessian vanishes at theta={theta}")
    return p["dJ_dtheta"] - p["d2L_dwdtheta"] * p["dJ_dw"] / denom


@dataclass
class EntropicGame:
    """Tanh-squashed Gaussian actor ``a = tanh(theta + sigma * eps)`` with entropy bonus."""

    eta: float = 0.1
    sigma: float = 0.5
    mc_samples: int = 256

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")

    def noise(self, seed: int) -> torch.Tensor:
        rng = np.random.default_rng(seed)
        return torch.as_tensor(rng.standard_normal(self.mc_samples))

    def actions(self, theta: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        u = theta.reshape(()) + self.sigma * eps
        return torch.tanh(u), u

    def log_prob(self, u: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        base = -0.5 * eps ** 2 - math.log(self.sigma) - 0.5 * math.log(2 * math.pi)
        # log(1 - tanh(u)^2), written to stay finite for large |u|
        log_det = 2.0 * (LOG2 - u - F.softplus(-2.0 * u))
        return base - log_det

    def game(self, seed: int = 0) -> TwoPlayerGame:
        """Sample-average game over one fixed set of draws (common random numbers)."""
        eps = self.noise(seed)

        def f1(theta, w):
            a, u = self.actions(theta, eps)
            return (w.reshape(()) * a - self.eta * self.log_prob(u, eps)).mean()

        def f2(theta, w):
            a, _ = self.actions(theta, eps)
            return ((w.reshape(()) * a + a ** 2 / 5) ** 2).mean()

        return TwoPlayerGame(f1, f2, (1, 1), "max", "min", BOX)


def entropic_actor_objective_grad(theta: float, w: float, cfg: EntropicGame,
                                  seed: int = 0) -> tuple[float, float]:
    """Reparameterized Monte Carlo gradients ``(dJ/dtheta, dL/dw)`` on a shared sample set."""
    from stac.diff import partial_gradients

    g = cfg.game(seed)
    dtheta, _ = partial_gradients(g.f1, [theta], [w])
    _, dw = partial_gradients(g.f2, [theta], [w])
    return dtheta[0], dw[0]


def error_curve(traj: Sequence[JointPoint], center: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Squared distance to ``center`` along a trajectory."""
    pts = np.array([p.as_array() for p in traj])
    return ((pts - np.asarray(center)) ** 2).sum(axis=1)


def steps_to_error(traj: Sequence[JointPoint], threshold: float,
                   center: tuple[float, float] = (0.0, 0.0)) -> int | None:
    """First step index whose squared error drops below ``threshold``."""
    err = error_curve(traj, center)
    hits = np.nonzero(err < threshold)[0]
    return int(hits[0]) if hits.size else None


def settling_step(traj: Sequence[JointPoint], threshold: float, min_tail: int = 1000,
                  center: tuple[float, float] = (0.0, 0.0)) -> int | None:
    """First step after which the squared error stays below ``threshold``.

    Returns ``None`` unless the error is below threshold for the last
    ``min_tail`` steps, so an orbit that merely passes through the ball near
    the end of the horizon does not count as settled.
    """
    err = error_curve(traj, center)
    above = np.nonzero(err >= threshold)[0]
    k = int(above[-1]) + 1 if above.size else 0
    if len(err) - k < min_tail:
        return None
    return k


def winding_angle(traj: Sequence[JointPoint]) -> float:
    """Cumulative signed angle swept around the origin."""
    pts = np.array([p.as_array() for p in traj])
    ang = np.unwrap(np.arctan2(pts[:, 1], pts[:, 0]))
    return float(ang[-1] - ang[0])


# reproduction parameters for the motivating figures; not given by the source
START = (0.5, 0.5)
ALPHA = 0.05
REG_LAMBDA = 0.01
# regularization used when comparing settling times; see settling_step
SPEED_LAMBDA = 0.1


def motivating_trajectories(steps: int = 2000, alpha: float = ALPHA,
                            lam: float = REG_LAMBDA) -> dict[str, list[JointPoint]]:
    """Individual, Stackelberg and regularized Stackelberg trajectories from ``START``."""
    g = motivating_game()
    x0 = JointPoint([START[0]], [START[1]])
    return {
        "individual": integrate(g, x0, "individual", LeaderConfig(), alpha, alpha, steps),
        "stackelberg": integrate(g, x0, "stackelberg", LeaderConfig(lam=0.0), alpha, alpha, steps),
        "regularized": integrate(g, x0, "stackelberg", LeaderConfig(lam=lam), alpha, alpha, steps),
    }
