"""Iterative solvers for implicitly defined symmetric operators."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from stac.diff import ArrayLike, HessianVectorProduct, ParamVector, as_tensor


class SolverBreakdownError(ArithmeticError):
    def __init__(self, iteration: int, residual: float):
        self.iteration = iteration
        self.residual = residual
        super().__init__(f"CG breakdown at iteration {iteration} (residual norm {residual:g})")


class DegenerateStartError(ArithmeticError):
    pass


@dataclass
class LinearOperator:
    apply: Callable[[torch.Tensor], torch.Tensor]
    dim: int

    def __call__(self, v: ArrayLike) -> torch.Tensor:
        vt = as_tensor(v).reshape(-1)
        if vt.numel() != self.dim:
            raise ValueError(f"operator of dim {self.dim} applied to vector of length {vt.numel()}")
        out = as_tensor(self.apply(vt)).reshape(-1)
        if out.numel() != self.dim:
            raise ValueError(f"operator returned length {out.numel()}, expected {self.dim}")
        return out

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> LinearOperator:
        m = as_tensor(matrix)
        return cls(lambda v: m @ v, m.shape[0])

    @classmethod
    def hessian(cls, f: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike) -> LinearOperator:
        """Hessian of ``f`` at ``x`` as an HVP-backed operator."""
        h = HessianVectorProduct(f, x)
        return cls(h, h.dim)


@dataclass
class CGInfo:
    iterations: int
    residual_norm: float
    rhs_norm: float
    converged: bool


def conjugate_gradient(A: LinearOperator, v: ArrayLike, lam: float = 0.0, k: int = 10,
                       tol: float = 1e-10,
                       callback: Callable[[int, torch.Tensor], None] | None = None,
                       ) -> tuple[torch.Tensor, CGInfo]:
    """Solve ``(A + lam I) x = v`` from ``x = 0`` with at most ``k`` iterations.

    Stops once ``||r|| <= tol * ||v||``. ``callback(i, x)`` sees every iterate,
    including the start.

    Raises:
        SolverBreakdownError: a step size or residual became non-finite.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    b = as_tensor(v).reshape(-1)
    if b.numel() != A.dim:
        raise ValueError(f"rhs has length {b.numel()}, operator dim is {A.dim}")
    x = torch.zeros_like(b)
    r = b.clone()
    p = r.clone()
    rr = float(r @ r)
    b_norm = math.sqrt(rr)
    threshold = tol * b_norm
    if callback is not None:
        callback(0, x)
    i = 0
    while i < k and math.sqrt(rr) > threshold:
        Ap = A(p)
        if lam:
            Ap = Ap + lam * p
        pAp = float(p @ Ap)
        step = rr / pAp if pAp != 0.0 else math.inf
        x = x + step * p
        r = r - step * Ap
        rr_new = float(r @ r)
        i += 1
        if not (math.isfinite(step) and math.isfinite(rr_new)):
            raise SolverBreakdownError(i, math.sqrt(rr_new) if math.isfinite(rr_new) else math.inf)
        p = r + (rr_new / rr) * p
        rr = rr_new
        if callback is not None:
            callback(i, x)
    res = math.sqrt(rr)
    return x, CGInfo(i, res, b_norm, res <= threshold)


def cg_solve(A: LinearOperator, v: ArrayLike, lam: float = 0.0, k: int = 10,
             tol: float = 1e-10) -> ParamVector:
    x, _ = conjugate_gradient(A, v, lam, k, tol)
    if isinstance(v, ParamVector):
        return ParamVector(x, v.layout)
    return ParamVector(x)


def power_iteration(A: LinearOperator, iters: int, seed: int = 0) -> tuple[float, ParamVector]:
    """Dominant (largest-magnitude) eigenpair estimate of a symmetric operator."""
    if iters < 1:
        raise ValueError("iters must be positive")
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.standard_normal(A.dim))
    x = x / torch.linalg.vector_norm(x)
    for _ in range(iters):
        y = A(x)
        n = float(torch.linalg.vector_norm(y))
        if n == 0.0 or not math.isfinite(n):
            raise DegenerateStartError("power iteration hit a zero iterate; reseed")
        x = y / n
    eig = float(x @ A(x))
    return eig, ParamVector(x)
