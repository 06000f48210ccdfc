"""Fixed-capacity replay memory with a seeded uniform sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Batch:
    s: torch.Tensor
    a: torch.Tensor
    u: torch.Tensor
    r: torch.Tensor
    s2: torch.Tensor
    done: torch.Tensor

    def __len__(self) -> int:
        return self.r.shape[0]


class ReplayBuffer:
    """Ring buffer of transitions.

    Pre-squash actions ``u`` are stored next to ``a`` so log-densities of
    squashed actions can be recomputed without ``atanh``.
    """

    def __init__(self, obs_dim: int, act_dim: int, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.u = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r: float, s2, done: bool, u=None) -> None:
        i = self.ptr
        self.s[i] = s
        self.a[i] = a
        self.u[i] = a if u is None else u
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = float(done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> Batch:
        return self.gather(self.sample_indices(batch_size))

    def gather(self, idx: np.ndarray) -> Batch:
        t = torch.as_tensor
        return Batch(t(self.s[idx]), t(self.a[idx]), t(self.u[idx]), t(self.r[idx]),
                     t(self.s2[idx]), t(self.done[idx]))
