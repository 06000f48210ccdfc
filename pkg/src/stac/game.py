"""Two-player differentiable games and their gradient dynamics.

Every rule is computed on sign-normalized (minimization) losses. Directions
handed back to callers are in each player's declared sense: for a ``"max"``
player the reported gradient is the gradient of the original objective, which
is also its ascent direction.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np
import torch

from stac.diff import (
    ArrayLike,
    MixedProduct,
    NumericOverflowError,
    ParamVector,
    as_tensor,
    partial_gradients,
)
from stac.linalg import CGInfo, LinearOperator, SolverBreakdownError, conjugate_gradient

log = logging.getLogger(__name__)

Objective = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
Sense = Literal["min", "max"]
Rule = Literal["individual", "stackelberg"]


@dataclass
class TwoPlayerGame:
    f1: Objective
    f2: Objective
    dims: tuple[int, int]
    sense1: Sense = "min"
    sense2: Sense = "min"
    box: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self):
        for s in (self.sense1, self.sense2):
            if s not in ("min", "max"):
                raise ValueError(f"sense must be 'min' or 'max', got {s!r}")

    def sense(self, player: int) -> Sense:
        return self.sense1 if player == 1 else self.sense2

    def loss(self, player: int) -> Objective:
        """Player's objective as a loss, always in (x1, x2) argument order."""
        f = self.f1 if player == 1 else self.f2
        if self.sense(player) == "max":
            return lambda a, b: -f(a, b)
        return f


@dataclass
class LeaderConfig:
    leader: int = 1
    lam: float = 0.0
    cg_iters: int = 10
    cg_tol: float = 1e-10
    unroll_m: int = 1

    def __post_init__(self):
        if self.leader not in (1, 2):
            raise ValueError("leader must be 1 or 2")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.cg_iters < 1 or self.unroll_m < 1:
            raise ValueError("cg_iters and unroll_m must be positive")

    @property
    def follower(self) -> int:
        return 3 - self.leader


@dataclass
class JointPoint:
    x1: ParamVector
    x2: ParamVector

    def __init__(self, x1: ArrayLike, x2: ArrayLike):
        self.x1 = x1 if isinstance(x1, ParamVector) else ParamVector(x1)
        self.x2 = x2 if isinstance(x2, ParamVector) else ParamVector(x2)

    def player(self, i: int) -> ParamVector:
        return self.x1 if i == 1 else self.x2

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x1.numpy(), self.x2.numpy()])


class Directions(NamedTuple):
    """Per-player gradients in declared sense, plus solver diagnostics."""

    d1: ParamVector
    d2: ParamVector
    fallback: bool = False
    cg: CGInfo | None = None
    correction_norm: float = 0.0


def _check_dims(g: TwoPlayerGame, x: JointPoint) -> None:
    if (len(x.x1), len(x.x2)) != tuple(g.dims):
        raise ValueError(f"point dims {(len(x.x1), len(x.x2))} do not match game dims {g.dims}")


def _ordered(i: int, a, b):
    """Reorder (leader-side, follower-side) arguments into (x1, x2) order."""
    return (a, b) if i == 1 else (b, a)


def _declared(g: TwoPlayerGame, player: int, descent: ParamVector) -> ParamVector:
    return -descent if g.sense(player) == "max" else descent


def individual_gradient(g: TwoPlayerGame, x: JointPoint) -> Directions:
    """Each player's own partial gradient."""
    _check_dims(g, x)
    d1, _ = partial_gradients(g.loss(1), x.x1, x.x2)
    _, d2 = partial_gradients(g.loss(2), x.x1, x.x2)
    return Directions(_declared(g, 1, d1), _declared(g, 2, d2))


def leader_total_derivative(loss_leader: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                            loss_follower: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                            x_leader: ArrayLike, x_follower: ArrayLike, lam: float,
                            cg_iters: int, cg_tol: float,
                            ) -> tuple[ParamVector, CGInfo | None, float, bool]:
    """Regularized total derivative of a leader loss, both losses in (leader, follower) order.

    Returns ``(direction, cg_info, correction_norm, fallback)``. On CG breakdown
    the direction is the leader's own partial gradient and ``fallback`` is set.
    """
    own, cross = partial_gradients(loss_leader, x_leader, x_follower)
    follower_hvp = MixedProductPair(loss_follower, x_leader, x_follower)
    try:
        q, info = conjugate_gradient(follower_hvp.hessian_operator(), cross, lam, cg_iters, cg_tol)
        correction = follower_hvp.mixed(q)
    except SolverBreakdownError as err:
        log.warning("falling back to individual gradient: %s", err)
        return own, CGInfo(err.iteration, err.residual, cross.norm(), False), 0.0, True
    if not torch.isfinite(correction).all():
        log.warning("falling back to individual gradient: non-finite correction")
        return own, info, 0.0, True
    return own - correction, info, float(torch.linalg.vector_norm(correction)), False


class MixedProductPair:
    """Follower-side second-order products at one point, sharing a single graph.

    ``hessian_operator`` applies the follower Hessian in its own variables;
    ``mixed(q)`` returns ``d/dx_leader <grad_follower loss, q>``.
    """

    def __init__(self, loss_follower, x_leader: ArrayLike, x_follower: ArrayLike):
        self._mp = MixedProduct(loss_follower, x_leader, x_follower)
        self._b = self._mp._b
        self.dim = self._b.numel()

    def hvp(self, v: torch.Tensor) -> torch.Tensor:
        g = self._mp.grad2
        if not g.requires_grad:
            return torch.zeros_like(v)
        with torch.enable_grad():
            (h,) = torch.autograd.grad(g, self._b, grad_outputs=v, retain_graph=True,
                                       allow_unused=True)
        if h is None:
            return torch.zeros_like(v)
        if not torch.isfinite(h).all():
            raise NumericOverflowError("follower-hvp", "backward")
        return h.detach()

    def hessian_operator(self) -> LinearOperator:
        return LinearOperator(self.hvp, self.dim)

    def mixed(self, q: torch.Tensor) -> torch.Tensor:
        return self._mp(q)


def stackelberg_gradient(g: TwoPlayerGame, x: JointPoint, cfg: LeaderConfig) -> Directions:
    """Leader follows the regularized total derivative; follower its own gradient."""
    _check_dims(g, x)
    L, F = cfg.leader, cfg.follower
    f_lead, f_foll = g.loss(L), g.loss(F)

    def lead(a, b):
        return f_lead(*_ordered(L, a, b))

    def foll(a, b):
        return f_foll(*_ordered(L, a, b))

    direction, info, corr, fallback = leader_total_derivative(
        lead, foll, x.player(L), x.player(F), cfg.lam, cfg.cg_iters, cfg.cg_tol)
    _, d_follower = partial_gradients(foll, x.player(L), x.player(F))
    d_leader = _declared(g, L, direction)
    d_follower = _declared(g, F, d_follower)
    d1, d2 = _ordered(L, d_leader, d_follower)
    return Directions(d1, d2, fallback, info, corr)


class IntegrationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"step {step}: {cause}")


def _move(x: ParamVector, declared_grad: ParamVector, sense: Sense, alpha: float) -> ParamVector:
    return x + alpha * declared_grad if sense == "max" else x - alpha * declared_grad


def step(g: TwoPlayerGame, x: JointPoint, rule: Rule, cfg: LeaderConfig,
         alpha1: float, alpha2: float) -> tuple[JointPoint, Directions]:
    """One leader step; with ``rule="stackelberg"`` the follower unrolls ``cfg.unroll_m`` steps
    holding the pre-update leader fixed."""
    alphas = {1: alpha1, 2: alpha2}
    if rule == "individual":
        d = individual_gradient(g, x)
        return JointPoint(_move(x.x1, d.d1, g.sense1, alpha1),
                          _move(x.x2, d.d2, g.sense2, alpha2)), d
    if rule != "stackelberg":
        raise ValueError(f"unknown rule {rule!r}")
    L, F = cfg.leader, cfg.follower
    d = stackelberg_gradient(g, x, cfg)
    new_leader = _move(x.player(L), d.d1 if L == 1 else d.d2, g.sense(L), alphas[L])
    xf = x.player(F)
    for _ in range(cfg.unroll_m):
        cur = JointPoint(*_ordered(L, x.player(L), xf))
        df = individual_gradient(g, cur)
        xf = _move(xf, df.d1 if F == 1 else df.d2, g.sense(F), alphas[F])
    return JointPoint(*_ordered(L, new_leader, xf)), d


def integrate(g: TwoPlayerGame, x0: JointPoint, rule: Rule, cfg: LeaderConfig,
              alpha1: float, alpha2: float, steps: int) -> list[JointPoint]:
    """Discrete-time trajectory of ``steps + 1`` points starting at ``x0``."""
    if alpha1 <= 0 or alpha2 <= 0:
        raise ValueError("learning rates must be positive")
    if steps < 1:
        raise ValueError("steps must be positive")
    traj = [x0]
    x = x0
    for k in range(steps):
        try:
            x, _ = step(g, x, rule, cfg, alpha1, alpha2)
        except (NumericOverflowError, ArithmeticError) as err:
            raise IntegrationError(k, err) from err
        traj.append(x)
    return traj


@dataclass(frozen=True)
class Grid:
    low1: float
    high1: float
    low2: float
    high2: float
    n1: int
    n2: int

    @classmethod
    def square(cls, low: float, high: float, n: int) -> Grid:
        return cls(low, high, low, high, n, n)

    def nodes(self) -> list[tuple[float, float]]:
        """Row-major: x1 varies slowest."""
        a = np.linspace(self.low1, self.high1, self.n1)
        b = np.linspace(self.low2, self.high2, self.n2)
        return [(float(u), float(v)) for u in a for v in b]


class FieldRow(NamedTuple):
    x1: float
    x2: float
    dx1: float
    dx2: float
    fallback: int


def sample_vector_field(g: TwoPlayerGame, rule: Rule, cfg: LeaderConfig, grid: Grid) -> list[FieldRow]:
    """Update direction (the velocity each player actually moves with) at every grid node."""
    if tuple(g.dims) != (1, 1):
        raise ValueError("vector fields need a game with d1 = d2 = 1")
    rows = []
    for u, v in grid.nodes():
        x = JointPoint([u], [v])
        if rule == "individual":
            d = individual_gradient(g, x)
        else:
            d = stackelberg_gradient(g, x, cfg)
        s1 = 1.0 if g.sense1 == "max" else -1.0
        s2 = 1.0 if g.sense2 == "max" else -1.0
        rows.append(FieldRow(u, v, s1 * d.d1[0], s2 * d.d2[0], int(d.fallback)))
    return rows


class Verdict(enum.Enum):
    DSE = "DSE"
    DEGENERATE = "stationary-but-degenerate"
    NON_STATIONARY = "non-stationary"


@dataclass
class DSEReport:
    verdict: Verdict
    reason: str
    leader_grad_norm: float = float("nan")
    follower_grad_norm: float = float("nan")
    follower_hessian_eigs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    leader_hessian_eigs_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    leader_hessian_eigs_sym: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _dense(apply: Callable[[torch.Tensor], torch.Tensor], n_in: int) -> np.ndarray:
    cols = []
    for i in range(n_in):
        e = torch.zeros(n_in, dtype=torch.float64)
        e[i] = 1.0
        cols.append(as_tensor(apply(e)).numpy())
    return np.stack(cols, axis=1)


def check_dse(g: TwoPlayerGame, x: JointPoint, tol: float = 1e-8, leader: int = 1,
              fd_step: float = 1e-5) -> DSEReport:
    """Check the four differential Stackelberg equilibrium conditions at ``x``.

    The leader's total Hessian is assembled by central differences of the
    (unregularized) total derivative along the implicit best-response map.
    Positive definiteness is judged on the symmetrized matrix.
    """
    _check_dims(g, x)
    cfg = LeaderConfig(leader=leader, lam=0.0, cg_iters=max(10, 2 * g.dims[2 - leader]),
                       cg_tol=1e-14)
    L, F = cfg.leader, cfg.follower
    f_lead, f_foll = g.loss(L), g.loss(F)

    def lead(a, b):
        return f_lead(*_ordered(L, a, b))

    def foll(a, b):
        return f_foll(*_ordered(L, a, b))

    xl, xf = x.player(L), x.player(F)
    _, gf = partial_gradients(foll, xl, xf)
    report = DSEReport(Verdict.NON_STATIONARY, "", follower_grad_norm=gf.norm())
    if gf.norm() > tol:
        report.reason = "follower gradient nonzero"
        return report

    pair = MixedProductPair(foll, xl, xf)
    H22 = _dense(pair.hvp, len(xf))
    eig22 = np.linalg.eigvalsh(0.5 * (H22 + H22.T))
    report.follower_hessian_eigs = eig22
    if np.min(np.abs(eig22)) <= tol:
        report.verdict = Verdict.DEGENERATE
        report.reason = "follower Hessian singular"
        return report

    def total(xl_pt: torch.Tensor, xf_pt: torch.Tensor) -> np.ndarray:
        d, _, _, _ = leader_total_derivative(lead, foll, xl_pt, xf_pt, 0.0, cfg.cg_iters, cfg.cg_tol)
        return d.numpy()

    t0 = total(as_tensor(xl), as_tensor(xf))
    report.leader_grad_norm = float(np.linalg.norm(t0))
    if report.leader_grad_norm > tol:
        report.reason = "leader total derivative nonzero"
        return report
    if np.min(eig22) <= tol:
        report.verdict = Verdict.DEGENERATE
        report.reason = "follower Hessian not positive definite"
        return report

    # d x_f*/d x_l = -H22^{-1} J21, J21 = d(grad_f loss_f)/d x_l
    J21 = _dense(pair.mixed, len(xf)).T
    response = -np.linalg.solve(H22, J21)
    xl_t, xf_t = as_tensor(xl).reshape(-1), as_tensor(xf).reshape(-1)
    cols = []
    for i in range(len(xl)):
        e = torch.zeros_like(xl_t)
        e[i] = fd_step
        de = torch.as_tensor(response[:, i] * fd_step)
        plus = total(xl_t + e, xf_t + de)
        minus = total(xl_t - e, xf_t - de)
        cols.append((plus - minus) / (2 * fd_step))
    H11 = np.stack(cols, axis=1)
    report.leader_hessian_eigs_raw = np.linalg.eigvals(H11)
    report.leader_hessian_eigs_sym = np.linalg.eigvalsh(0.5 * (H11 + H11.T))
    if np.min(report.leader_hessian_eigs_sym) > tol:
        report.verdict = Verdict.DSE
        report.reason = "all conditions hold"
    else:
        report.verdict = Verdict.DEGENERATE
        report.reason = "leader total Hessian not positive definite"
    return report


def jacobian_spectrum(g: TwoPlayerGame, x: JointPoint, rule: Rule, cfg: LeaderConfig,
                      h: float = 1e-5) -> np.ndarray:
    """Eigenvalues of the Jacobian of the joint descent field ``-(descent1, descent2)``.

    A stationary point is locally asymptotically stable for the continuous-time
    dynamics when every eigenvalue has negative real part.
    """
    d1, d2 = g.dims

    def field_at(z: np.ndarray) -> np.ndarray:
        pt = JointPoint(z[:d1], z[d1:])
        d = individual_gradient(g, pt) if rule == "individual" else stackelberg_gradient(g, pt, cfg)
        s1 = 1.0 if g.sense1 == "max" else -1.0
        s2 = 1.0 if g.sense2 == "max" else -1.0
        return np.concatenate([s1 * d.d1.numpy(), s2 * d.d2.numpy()])

    z0 = x.as_array()
    cols = []
    for i in range(d1 + d2):
        e = np.zeros_like(z0)
        e[i] = h
        cols.append((field_at(z0 + e) - field_at(z0 - e)) / (2 * h))
    return np.linalg.eigvals(np.stack(cols, axis=1))
