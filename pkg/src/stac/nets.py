"""Functional actors and critics evaluated on flat parameter vectors.

Networks hold only their architecture; parameters are passed in as a 1-D
tensor on every call, so gradients, HVPs and mixed products can be taken with
respect to a player's whole parameter vector.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from stac.diff import DTYPE, ParamVector, Segment, minimum

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda x: x,
}

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2 or any(n <= 0 for n in self.sizes):
            raise ValueError(f"bad layer sizes {self.sizes}")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @classmethod
    def build(cls, in_dim: int, hidden: Sequence[int], out_dim: int, activation: str = "tanh",
              out_activation: str = "identity") -> MLPSpec:
        sizes = (in_dim, *hidden, out_dim)
        acts = (activation,) * len(hidden) + (out_activation,)
        return cls(sizes, acts)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def layout(self, prefix: str = "") -> list[Segment]:
        segs, off = [], 0
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            segs.append(Segment(f"{prefix}l{i}.weight", (n_out, n_in), off))
            off += n_in * n_out
            segs.append(Segment(f"{prefix}l{i}.bias", (n_out,), off))
            off += n_out
        return segs

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng: np.random.Generator, prefix: str = "") -> ParamVector:
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        chunks = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        return ParamVector(np.concatenate(chunks), self.layout(prefix))

    def forward(self, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h, off = x, 0
        for n_in, n_out, act in zip(self.sizes[:-1], self.sizes[1:], self.activations):
            W = params[off:off + n_in * n_out].view(n_out, n_in)
            off += n_in * n_out
            b = params[off:off + n_out]
            off += n_out
            h = ACTIVATIONS[act](F.linear(h, W, b))
        return h


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class PolicyKindError(TypeError):
    pass


class Policy:
    kind: str
    mlp: MLPSpec

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator) -> ParamVector:
        return self.mlp.init(rng, "pi.")


class CategoricalPolicy(Policy):
    kind = "categorical"

    def __init__(self, mlp: MLPSpec):
        self.mlp = mlp

    def logits(self, theta: torch.Tensor, s) -> torch.Tensor:
        return self.mlp.forward(theta, _t(s))

    def probs(self, theta: torch.Tensor, s) -> torch.Tensor:
        return torch.softmax(self.logits(theta, s), dim=-1)

    def log_prob(self, theta: torch.Tensor, s, a) -> torch.Tensor:
        logp = torch.log_softmax(self.logits(theta, s), dim=-1)
        idx = torch.as_tensor(np.asarray(a), dtype=torch.long)
        return logp.gather(-1, idx.unsqueeze(-1)).squeeze(-1)

    def sample(self, theta: torch.Tensor, s, rng: np.random.Generator) -> int:
        with torch.no_grad():
            p = self.probs(theta, s).numpy()
        # inverse-CDF draw keeps the RNG stream to one uniform per action
        return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))

    def mode(self, theta: torch.Tensor, s) -> int:
        with torch.no_grad():
            return int(torch.argmax(self.logits(theta, s)))


class GaussianTanhPolicy(Policy):
    """``a = scale * tanh(mean(s) + std(s) * eps)`` with state-dependent mean and log-std heads."""

    kind = "gaussian-tanh"

    def __init__(self, mlp: MLPSpec, act_dim: int, scale: float = 1.0):
        if mlp.out_dim != 2 * act_dim:
            raise ValueError("network must output mean and log-std for every action dim")
        self.mlp = mlp
        self.act_dim = act_dim
        self.scale = float(scale)

    def heads(self, theta: torch.Tensor, s) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.mlp.forward(theta, _t(s))
        mean, log_std = out[..., :self.act_dim], out[..., self.act_dim:]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def log_prob_u(self, theta: torch.Tensor, s, u) -> torch.Tensor:
        """Log-density of the squashed action given its pre-squash value ``u``."""
        u = _t(u)
        mean, log_std = self.heads(theta, s)
        z = (u - mean) / torch.exp(log_std)
        base = -0.5 * z ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        log_det = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u)) + math.log(self.scale)
        return (base - log_det).sum(-1)

    def log_prob(self, theta: torch.Tensor, s, a) -> torch.Tensor:
        y = _t(a) / self.scale
        if torch.any(torch.abs(y) >= 1.0):
            raise ValueError("action on or outside the box boundary; store pre-squash actions")
        return self.log_prob_u(theta, s, torch.atanh(y))

    def rsample(self, theta: torch.Tensor, s, eps) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Reparameterized ``(action, pre-squash u, log-prob)``, differentiable in ``theta``."""
        mean, log_std = self.heads(theta, s)
        std = torch.exp(log_std)
        eps = _t(eps)
        u = mean + std * eps
        base = -0.5 * eps ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        log_det = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u)) + math.log(self.scale)
        return self.scale * torch.tanh(u), u, (base - log_det).sum(-1)

    def sample(self, theta: torch.Tensor, s, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        eps = rng.standard_normal(self.act_dim)
        with torch.no_grad():
            a, u, _ = self.rsample(theta, s, eps)
        return a.numpy(), u.numpy()

    def mode(self, theta: torch.Tensor, s) -> np.ndarray:
        with torch.no_grad():
            mean, _ = self.heads(theta, s)
            return (self.scale * torch.tanh(mean)).numpy()


class DeterministicPolicy(Policy):
    """``mu(s) = scale * tanh(net(s))``."""

    kind = "deterministic"

    def __init__(self, mlp: MLPSpec, scale: float = 1.0):
        self.mlp = mlp
        self.act_dim = mlp.out_dim
        self.scale = float(scale)

    def action(self, theta: torch.Tensor, s) -> torch.Tensor:
        return self.scale * torch.tanh(self.mlp.forward(theta, _t(s)))

    def log_prob(self, theta, s, a):
        raise PolicyKindError("a deterministic policy has no log-density")

    def sample(self, theta: torch.Tensor, s, rng: np.random.Generator | None = None) -> np.ndarray:
        with torch.no_grad():
            return self.action(theta, s).numpy()

    mode = sample


class ValueCritic:
    kind = "V"

    def __init__(self, mlp: MLPSpec):
        if mlp.out_dim != 1:
            raise ValueError("value network must have a scalar output")
        self.mlp = mlp

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator) -> ParamVector:
        return self.mlp.init(rng, "v.")

    def __call__(self, w: torch.Tensor, s) -> torch.Tensor:
        return self.mlp.forward(w, _t(s)).squeeze(-1)


def concat_features(s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return torch.cat([s, a], dim=-1)


class QCritic:
    kind = "Q"

    def __init__(self, mlp: MLPSpec,
                 features: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = concat_features):
        if mlp.out_dim != 1:
            raise ValueError("Q network must have a scalar output")
        self.mlp = mlp
        self.features = features

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator) -> ParamVector:
        return self.mlp.init(rng, "q.")

    def __call__(self, w: torch.Tensor, s, a) -> torch.Tensor:
        return self.mlp.forward(w, self.features(_t(s), _t(a))).squeeze(-1)


class DoubleQCritic:
    """Two Q networks with parameters concatenated as ``w = [w1, w2]``."""

    kind = "double-Q"

    def __init__(self, mlp: MLPSpec):
        self.q = QCritic(mlp)
        self.mlp = mlp

    @property
    def n_params(self) -> int:
        return 2 * self.mlp.n_params

    def init(self, rng: np.random.Generator) -> ParamVector:
        w1 = self.mlp.init(rng, "q1.")
        w2 = self.mlp.init(rng, "q2.")
        layout = list(w1.layout) + [Segment(s.name, s.shape, s.offset + len(w1)) for s in w2.layout]
        return ParamVector(torch.cat([w1.data, w2.data]), layout)

    def __call__(self, w: torch.Tensor, s, a) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.mlp.n_params
        return self.q(w[:n], s, a), self.q(w[n:], s, a)

    def min(self, w: torch.Tensor, s, a) -> torch.Tensor:
        q1, q2 = self(w, s, a)
        return minimum(q1, q2)


def polyak_update(target: ParamVector, online: ParamVector, rho: float) -> ParamVector:
    """``rho * target + (1 - rho) * online``."""
    if len(target) != len(online):
        raise ValueError(f"length mismatch: {len(target)} vs {len(online)}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    return ParamVector(rho * target.data + (1.0 - rho) * online.data, target.layout)


MAGIC = b"STPV"
FORMAT_VERSION = 1


def save_params(path: str | Path, params: ParamVector) -> None:
    """Binary snapshot: magic, version, segment table, then little-endian float64 data."""
    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(params.layout))
    for seg in params.layout:
        name = seg.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", len(seg.shape))
        out += struct.pack(f"<{len(seg.shape)}I", *seg.shape)
        out += struct.pack("<Q", seg.offset)
    out += struct.pack("<Q", len(params))
    out += params.numpy().astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path: str | Path) -> ParamVector:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    version, n_seg = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos, segs = 10, []
    for _ in range(n_seg):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        segs.append(Segment(name, tuple(shape), offset))
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return ParamVector(data, segs)
