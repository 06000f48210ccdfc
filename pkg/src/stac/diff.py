"""Reverse-mode differentiation over flat parameter vectors.

Graphs are recorded by :mod:`torch.autograd` in float64. Second-order
quantities (Hessian-vector and mixed products) use double backward: the
gradient graph is kept and differentiated again, so the Hessian is never
materialized.

Scalar functions passed to this module take 1-D float64 tensors and return a
0-d tensor.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from math import prod
from typing import Union

import numpy as np
import torch

DTYPE = torch.float64

ArrayLike = Union["ParamVector", torch.Tensor, np.ndarray, Sequence[float], float]


class NumericOverflowError(FloatingPointError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, node: str, phase: str):
        self.node = node
        self.phase = phase
        super().__init__(f"non-finite value in {phase} pass at node {node!r}")


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return prod(self.shape)


class ParamVector:
    """Flat float64 parameter vector with a named segment layout.

    Segments record where each logical block (a weight matrix, a bias, a
    sub-network) lives inside ``data``. Arithmetic keeps the layout of the
    left operand.
    """

    __slots__ = ("data", "layout")

    def __init__(self, data: ArrayLike, layout: Iterable[Segment] | None = None):
        t = as_tensor(data).reshape(-1)
        if layout is None:
            layout = (Segment("x", (t.numel(),), 0),)
        layout = tuple(layout)
        total = sum(seg.size for seg in layout)
        if total != t.numel():
            raise ValueError(f"layout covers {total} entries but data has {t.numel()}")
        self.data = t
        self.layout = layout

    @classmethod
    def pack(cls, arrays: Mapping[str, ArrayLike]) -> ParamVector:
        chunks, layout, offset = [], [], 0
        for name, arr in arrays.items():
            t = as_tensor(arr)
            layout.append(Segment(name, tuple(t.shape), offset))
            chunks.append(t.reshape(-1))
            offset += t.numel()
        data = torch.cat(chunks) if chunks else torch.zeros(0, dtype=DTYPE)
        return cls(data, layout)

    @classmethod
    def zeros_like(cls, other: ParamVector) -> ParamVector:
        return cls(torch.zeros_like(other.data), other.layout)

    def unpack(self) -> dict[str, torch.Tensor]:
        return {seg.name: self.segment(seg.name) for seg in self.layout}

    def segment(self, name: str) -> torch.Tensor:
        for seg in self.layout:
            if seg.name == name:
                return self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def with_data(self, data: ArrayLike) -> ParamVector:
        return ParamVector(data, self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.data.clone(), self.layout)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy().copy()

    def dot(self, other: ArrayLike) -> float:
        return float(self.data @ as_tensor(other).reshape(-1))

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.data))

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())

    def __len__(self) -> int:
        return self.data.numel()

    def __getitem__(self, idx):
        return float(self.data[idx])

    def __iter__(self):
        return iter(self.data.tolist())

    def __add__(self, other):
        return ParamVector(self.data + _operand(other), self.layout)

    __radd__ = __add__

    def __sub__(self, other):
        return ParamVector(self.data - _operand(other), self.layout)

    def __rsub__(self, other):
        return ParamVector(_operand(other) - self.data, self.layout)

    def __mul__(self, scalar: float):
        return ParamVector(self.data * scalar, self.layout)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return ParamVector(self.data / scalar, self.layout)

    def __neg__(self):
        return ParamVector(-self.data, self.layout)

    def __repr__(self) -> str:
        names = ",".join(seg.name for seg in self.layout)
        return f"ParamVector(n={len(self)}, segments=[{names}])"


def _operand(other) -> torch.Tensor | float:
    if isinstance(other, (int, float)):
        return other
    return as_tensor(other).reshape(-1)


def as_tensor(x: ArrayLike) -> torch.Tensor:
    """Detached float64 view of ``x``; ParamVectors yield their data."""
    if isinstance(x, ParamVector):
        return x.data
    if isinstance(x, torch.Tensor):
        return x.detach().to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _like(template: ArrayLike, data: torch.Tensor) -> ParamVector:
    if isinstance(template, ParamVector):
        return ParamVector(data, template.layout)
    return ParamVector(data)


def _leaf(x: ArrayLike) -> torch.Tensor:
    return as_tensor(x).reshape(-1).clone().requires_grad_(True)


def _node_name(t: torch.Tensor) -> str:
    fn = t.grad_fn
    return type(fn).__name__ if fn is not None else "leaf"


def _check_value(y: torch.Tensor) -> None:
    if y.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise NumericOverflowError(_node_name(y), "forward")


def _check_grad(g: torch.Tensor, wrt: ArrayLike) -> None:
    if torch.isfinite(g).all():
        return
    bad = int(torch.nonzero(~torch.isfinite(g))[0, 0])
    name = "x"
    if isinstance(wrt, ParamVector):
        for seg in wrt.layout:
            if seg.offset <= bad < seg.offset + seg.size:
                name = seg.name
    raise NumericOverflowError(f"d/d{name}[{bad}]", "backward")


def _grad(y: torch.Tensor, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    if not y.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(y, x, create_graph=create_graph, allow_unused=True,
                               retain_graph=True if create_graph else None)
    if g is None:
        return torch.zeros_like(x)
    return g


def value_and_gradient(f: Callable[[torch.Tensor], torch.Tensor],
                       x: ArrayLike) -> tuple[float, ParamVector]:
    xt = _leaf(x)
    with torch.enable_grad():
        y = f(xt)
        _check_value(y)
        g = _grad(y.reshape(()), xt)
    _check_grad(g, x)
    return float(y.detach()), _like(x, g.detach())


def gradient(f: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike) -> ParamVector:
    """Gradient of the scalar function ``f`` at ``x``."""
    return value_and_gradient(f, x)[1]


def partial_gradients(f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                      x1: ArrayLike, x2: ArrayLike) -> tuple[ParamVector, ParamVector]:
    """Both partial gradients of a two-argument scalar function."""
    a, b = _leaf(x1), _leaf(x2)
    with torch.enable_grad():
        y = f(a, b)
        _check_value(y)
        y = y.reshape(())
        if y.requires_grad:
            ga, gb = torch.autograd.grad(y, (a, b), allow_unused=True)
        else:
            ga = gb = None
        ga = torch.zeros_like(a) if ga is None else ga
        gb = torch.zeros_like(b) if gb is None else gb
    _check_grad(ga, x1)
    _check_grad(gb, x2)
    return _like(x1, ga.detach()), _like(x2, gb.detach())


class HessianVectorProduct:
    """Reusable ``v -> H v`` for a fixed function and point.

    The first backward pass (with ``create_graph``) is recorded once; each call
    differentiates ``<grad f(x), v>`` again through the retained graph.
    """

    def __init__(self, f: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike):
        self._x = _leaf(x)
        self._template = x
        with torch.enable_grad():
            y = f(self._x)
            _check_value(y)
            self.value = float(y.detach())
            self.grad = _grad(y.reshape(()), self._x, create_graph=True)
        _check_grad(self.grad.detach(), x)
        self.dim = self._x.numel()

    def __call__(self, v: ArrayLike) -> torch.Tensor:
        vt = as_tensor(v).reshape(-1)
        if vt.numel() != self.dim:
            raise ValueError(f"vector has length {vt.numel()}, expected {self.dim}")
        if not self.grad.requires_grad:
            return torch.zeros_like(vt)
        with torch.enable_grad():
            (h,) = torch.autograd.grad(self.grad, self._x, grad_outputs=vt,
                                       retain_graph=True, allow_unused=True)
        if h is None:
            return torch.zeros_like(vt)
        _check_grad(h, self._template)
        return h.detach()


def hvp(f: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike, v: ArrayLike) -> ParamVector:
    """Hessian of ``f`` at ``x`` applied to ``v`` via double backward."""
    if len(as_tensor(v).reshape(-1)) != len(as_tensor(x).reshape(-1)):
        raise ValueError("hvp: |v| must equal |x|")
    return _like(x, HessianVectorProduct(f, x)(v))


class MixedProduct:
    """Reusable ``q -> d/dx1 <grad_{x2} f(x1, x2), q>`` at a fixed point."""

    def __init__(self, f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                 x1: ArrayLike, x2: ArrayLike):
        self._a, self._b = _leaf(x1), _leaf(x2)
        self._template = x1
        with torch.enable_grad():
            y = f(self._a, self._b)
            _check_value(y)
            self.value = float(y.detach())
            self.grad2 = _grad(y.reshape(()), self._b, create_graph=True)
        _check_grad(self.grad2.detach(), x2)

    def __call__(self, q: ArrayLike) -> torch.Tensor:
        qt = as_tensor(q).reshape(-1)
        if qt.numel() != self._b.numel():
            raise ValueError(f"vector has length {qt.numel()}, expected {self._b.numel()}")
        if not self.grad2.requires_grad:
            return torch.zeros_like(self._a.detach())
        with torch.enable_grad():
            (m,) = torch.autograd.grad(self.grad2, self._a, grad_outputs=qt,
                                       retain_graph=True, allow_unused=True)
        if m is None:
            return torch.zeros_like(self._a.detach())
        _check_grad(m, self._template)
        return m.detach()


def mixed_vjp(f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
              x1: ArrayLike, x2: ArrayLike, q: ArrayLike) -> ParamVector:
    """Transpose mixed partial ``(d^2 f / dx2 dx1)^T q``, a vector in x1-space."""
    return _like(x1, MixedProduct(f, x1, x2)(q))


def minimum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise min whose gradient goes to ``a`` on ties."""
    return torch.where(a <= b, a, b)


def finite_difference_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike,
                               h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time. Test oracle only."""
    x0 = as_tensor(x).reshape(-1).clone()
    out = np.zeros(x0.numel())
    with torch.no_grad():
        for i in range(x0.numel()):
            e = torch.zeros_like(x0)
            e[i] = h
            out[i] = (float(f(x0 + e)) - float(f(x0 - e))) / (2 * h)
    return out
