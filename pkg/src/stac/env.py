"""Small native environments.

``OneStepEnv`` is the single-step task behind the motivating game, ``CartPole``
and ``Pendulum`` follow the classic-control reference dynamics, and
``FiniteMDP`` is a tiny tabular MDP whose trajectories can be enumerated
exactly.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Discrete:
    n: int


@dataclass(frozen=True)
class Box:
    low: float
    high: float
    dim: int = 1


@dataclass(frozen=True)
class MDPSpec:
    name: str
    state_dim: int
    action_space: Discrete | Box
    gamma: float
    horizon: int

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, Discrete)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray | int
    r: float
    s_next: np.ndarray
    done: bool
    truncated: bool = False
    u: np.ndarray | None = None  # pre-squash action, for tanh policies


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)

    def append(self, t: Transition) -> None:
        if self.transitions and not np.array_equal(self.transitions[-1].s_next, t.s):
            raise ValueError("transition does not chain from the previous one")
        self.transitions.append(t)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.r for t in self.transitions], dtype=np.float64)

    @property
    def states(self) -> np.ndarray:
        return np.array([t.s for t in self.transitions], dtype=np.float64)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].done

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


class Env:
    """Minimal episodic interface: ``reset(rng) -> obs``, ``step(a) -> (obs, r, done, truncated)``."""

    spec: MDPSpec

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        raise NotImplementedError


class OneStepEnv(Env):
    """Single decision with reward ``-a**2 / 5`` on the action box ``[-1, 1]``."""

    def __init__(self, gamma: float = 1.0):
        self.spec = MDPSpec("one-step", 1, Box(-1.0, 1.0, 1), gamma, 1)
        self._state = np.zeros(1)

    @staticmethod
    def reward(a: float) -> float:
        return -float(a) ** 2 / 5.0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self._state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        return self._state.copy(), self.reward(a), True, False


def one_step_env() -> OneStepEnv:
    return OneStepEnv()


# classic-control cart-pole constants
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLEMASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12 * 2 * math.pi / 360  # 0.2094 rad


def cartpole_step(state, action: int) -> tuple[np.ndarray, float, bool]:
    """One Euler step; positions advance with the pre-step velocities."""
    x, x_dot, theta, theta_dot = (float(v) for v in state)
    force = FORCE_MAG if int(action) == 1 else -FORCE_MAG
    cos, sin = math.cos(theta), math.sin(theta)
    temp = (force + POLEMASS_LENGTH * theta_dot ** 2 * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos ** 2 / TOTAL_MASS))
    x_acc = temp - POLEMASS_LENGTH * theta_acc * cos / TOTAL_MASS
    x = x + TAU * x_dot
    x_dot = x_dot + TAU * x_acc
    theta = theta + TAU * theta_dot
    theta_dot = theta_dot + TAU * theta_acc
    nxt = np.array([x, x_dot, theta, theta_dot])
    done = abs(x) > X_LIMIT or abs(theta) > THETA_LIMIT
    return nxt, 1.0, done


class CartPole(Env):
    def __init__(self, gamma: float = 0.99, horizon: int = 500):
        self.spec = MDPSpec("cartpole", 4, Discrete(2), gamma, horizon)
        self._state = np.zeros(4)
        self._t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = rng.uniform(-0.05, 0.05, size=4)
        self._t = 0
        return self._state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        self._state, r, done = cartpole_step(self._state, int(action))
        self._t += 1
        truncated = not done and self._t >= self.spec.horizon
        return self._state.copy(), r, done, truncated


# pendulum constants; angle 0 is upright
PEND_G = 10.0
PEND_M = 1.0
PEND_L = 1.0
PEND_DT = 0.05
MAX_SPEED = 8.0
MAX_TORQUE = 2.0


def wrap_angle(phi: float) -> float:
    """Map an angle into ``[-pi, pi)``."""
    return ((phi + math.pi) % (2 * math.pi)) - math.pi


def pendulum_step(state, torque: float) -> tuple[np.ndarray, float, bool]:
    """Semi-implicit Euler step; the reward is charged on the pre-step state."""
    phi, phi_dot = (float(v) for v in state)
    u = float(torque)
    if not -MAX_TORQUE <= u <= MAX_TORQUE:
        log.debug("torque %g clipped to [-%g, %g]", u, MAX_TORQUE, MAX_TORQUE)
        u = min(max(u, -MAX_TORQUE), MAX_TORQUE)
    cost = wrap_angle(phi) ** 2 + 0.1 * phi_dot ** 2 + 0.001 * u ** 2
    phi_dot = phi_dot + (3 * PEND_G / (2 * PEND_L) * math.sin(phi)
                         + 3.0 / (PEND_M * PEND_L ** 2) * u) * PEND_DT
    phi_dot = min(max(phi_dot, -MAX_SPEED), MAX_SPEED)
    phi = phi + phi_dot * PEND_DT
    return np.array([phi, phi_dot]), -cost, False


class Pendulum(Env):
    """Swing-up task; observations are ``(cos phi, sin phi, phi_dot)``."""

    def __init__(self, gamma: float = 0.99, horizon: int = 200):
        self.spec = MDPSpec("pendulum", 3, Box(-MAX_TORQUE, MAX_TORQUE, 1), gamma, horizon)
        self._state = np.zeros(2)
        self._t = 0

    @staticmethod
    def observe(state) -> np.ndarray:
        phi, phi_dot = state
        return np.array([math.cos(phi), math.sin(phi), phi_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])
        self._t = 0
        return self.observe(self._state)

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        u = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        self._state, r, _ = pendulum_step(self._state, u)
        self._t += 1
        return self.observe(self._state), r, False, self._t >= self.spec.horizon


def make_env(name: str, gamma: float = 0.99) -> Env:
    envs = {"one-step": lambda: OneStepEnv(gamma), "cartpole": lambda: CartPole(gamma),
            "pendulum": lambda: Pendulum(gamma)}
    if name not in envs:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(envs)}")
    return envs[name]()


MAX_STATES = 3
MAX_ACTIONS = 3
MAX_HORIZON = 3


class SizeBoundError(ValueError):
    pass


@dataclass
class FiniteMDP:
    """Tabular MDP: ``P[s, a, s']``, ``r[s, a]``, ``rho[s]``; episodes last ``horizon`` actions."""

    P: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    horizon: int
    gamma: float = 1.0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def check_size(self) -> None:
        if (self.n_states > MAX_STATES or self.n_actions > MAX_ACTIONS
                or not 1 <= self.horizon <= MAX_HORIZON):
            raise SizeBoundError(
                f"enumeration needs |S|,|A| <= 3 and 1 <= horizon <= 3; got "
                f"{self.n_states}, {self.n_actions}, {self.horizon}")

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int = 2, n_actions: int = 2,
               horizon: int = 2, gamma: float | None = None) -> FiniteMDP:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        r = rng.normal(size=(n_states, n_actions))
        rho = rng.dirichlet(np.ones(n_states))
        if gamma is None:
            gamma = float(rng.uniform(0.5, 1.0))
        return cls(P, r, rho, horizon, gamma)

    def values(self, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact ``Q[t, s, a]`` and ``V[t, s]`` by backward recursion for a stationary policy."""
        H = self.horizon
        Q = np.zeros((H, self.n_states, self.n_actions))
        V = np.zeros((H + 1, self.n_states))
        for t in reversed(range(H)):
            Q[t] = self.r + self.gamma * self.P @ V[t + 1]
            V[t] = (pi * Q[t]).sum(axis=1)
        return Q, V[:H]


@dataclass(frozen=True)
class EnumeratedTrajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    prob: float


def enumerate_trajectories(m: FiniteMDP, pi: np.ndarray) -> list[EnumeratedTrajectory]:
    """All positive-probability trajectories ``(s_0, a_0, ..., s_{H-1}, a_{H-1})``."""
    m.check_size()
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (m.n_states, m.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP")
    out = []
    S, A, H = range(m.n_states), range(m.n_actions), m.horizon
    for path in itertools.product(S, A, repeat=H):
        states, actions = path[0::2], path[1::2]
        p = m.rho[states[0]]
        for t in range(H):
            p *= pi[states[t], actions[t]]
            if t + 1 < H:
                p *= m.P[states[t], actions[t], states[t + 1]]
        if p > 0.0:
            rewards = tuple(float(m.r[s, a]) for s, a in zip(states, actions))
            out.append(EnumeratedTrajectory(states, actions, rewards, float(p)))
    return out


def enumerated_q(m: FiniteMDP, pi: np.ndarray) -> np.ndarray:
    """``Q[t, s, a]`` as conditional means of reward-to-go over enumerated trajectories.

    Entries for unreachable ``(t, s, a)`` are NaN.
    """
    num = np.zeros((m.horizon, m.n_states, m.n_actions))
    den = np.zeros_like(num)
    for tr in enumerate_trajectories(m, pi):
        disc = np.array([m.gamma ** k for k in range(m.horizon)])
        for t, (s, a) in enumerate(zip(tr.states, tr.actions)):
            g = float(np.dot(disc[:m.horizon - t], tr.rewards[t:]))
            num[t, s, a] += tr.prob * g
            den[t, s, a] += tr.prob
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
