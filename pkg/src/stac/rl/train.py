"""Training loops: on-policy actor-critic and off-policy DDPG / SAC, each with an optional Stackelberg leader."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from stac.diff import NumericOverflowError, ParamVector, partial_gradients
from stac.env import Box, Env
from stac.linalg import SolverBreakdownError
from stac.nets import (CategoricalPolicy, DeterministicPolicy, DoubleQCritic, GaussianTanhPolicy,
                       MLPSpec, QCritic, ValueCritic, polyak_update, save_params)
from stac.rl.buffer import ReplayBuffer
from stac.rl.config import AlgoConfig, ConfigError
from stac.rl.estimators import gae_advantages, mc_returns, prop1_all_starts_surrogate, score_log_prob
from stac.rl.objectives import Objectives, ddpg_objectives, leader_direction, sac_objectives

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunRecord:
    step: int
    eval_return_mean: float
    eval_return_std: float
    leader_grad_norm: float
    follower_grad_norm: float
    correction_norm: float
    cg_residual: float
    fallback: int
    wall_seconds: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple:
        return astuple(self)


@dataclass
class TrainResult:
    records: list[RunRecord]
    actor: ParamVector
    critic: ParamVector
    leader_updates: int = 0
    fallback_updates: int = 0

    @property
    def fallback_rate(self) -> float:
        return self.fallback_updates / self.leader_updates if self.leader_updates else 0.0


class TrainingAborted(RuntimeError):
    """A run hit a numeric failure; the last good parameters were checkpointed."""

    def __init__(self, step: int, cause: Exception, checkpoint: Path | None):
        self.step = step
        self.cause = cause
        self.checkpoint = checkpoint
        super().__init__(f"training aborted at step {step}: {cause}")


# called after every parameter update with (update index, actor params, critic params)
UpdateHook = Callable[[int, ParamVector, ParamVector], None]


@dataclass
class _Streams:
    init: np.random.Generator
    env: np.random.Generator
    act: np.random.Generator
    update: np.random.Generator
    eval: np.random.Generator
    buffer_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> _Streams:
        ss = np.random.SeedSequence(seed)
        init, env, act, update, ev, buf = ss.spawn(6)
        return cls(np.random.default_rng(init), np.random.default_rng(env), np.random.default_rng(act),
                   np.random.default_rng(update), np.random.default_rng(ev),
                   int(buf.generate_state(1)[0]))


def build_agent(env: Env, cfg: AlgoConfig):
    """Policy and critic architectures for ``cfg`` on ``env``."""
    spec = env.spec
    obs = spec.state_dim
    hidden, act = cfg.hidden, cfg.activation
    space = spec.action_space
    if cfg.algo == "AC":
        if spec.discrete:
            policy = CategoricalPolicy(MLPSpec.build(obs, hidden, space.n, act))
        else:
            policy = GaussianTanhPolicy(MLPSpec.build(obs, hidden, 2 * space.dim, act), space.dim, space.high)
        return policy, ValueCritic(MLPSpec.build(obs, hidden, 1, act))
    if not isinstance(space, Box):
        raise ConfigError(f"{cfg.algo} needs a continuous action space")
    q_mlp = MLPSpec.build(obs + space.dim, hidden, 1, act)
    if cfg.algo == "DDPG":
        return DeterministicPolicy(MLPSpec.build(obs, hidden, space.dim, act), space.high), QCritic(q_mlp)
    return GaussianTanhPolicy(MLPSpec.build(obs, hidden, 2 * space.dim, act), space.dim, space.high), \
        DoubleQCritic(q_mlp)


class Adam:
    """Adaptive-moment optimizer over one flat parameter vector (descent on the given gradient)."""

    def __init__(self, params: ParamVector, lr: float):
        self.layout = params.layout
        self.p = params.data.clone()
        self.opt = torch.optim.Adam([self.p], lr=lr, betas=(0.9, 0.999), eps=1e-8)

    def step(self, grad: ParamVector) -> ParamVector:
        self.p.grad = grad.data.clone()
        self.opt.step()
        return ParamVector(self.p.detach().clone(), self.layout)


def _check_finite(name: str, p: ParamVector) -> None:
    if not p.is_finite():
        raise NumericOverflowError(name, "update")


def _checkpoint(directory: Path | None, actor: ParamVector, critic: ParamVector) -> Path | None:
    if directory is None:
        return None
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / "actor.bin", actor)
    save_params(directory / "critic.bin", critic)
    return directory


def _mean_diag(diags: list[dict[str, float]]) -> dict[str, float]:
    keys = ("leader_grad_norm", "follower_grad_norm", "correction_norm", "cg_residual")
    if not diags:
        return {k: 0.0 for k in keys} | {"fallback": 0}
    out = {k: float(np.mean([d[k] for d in diags])) for k in keys}
    out["fallback"] = int(max(d["fallback"] for d in diags) > 0)
    return out


def train(env: Env, cfg: AlgoConfig, total_steps: int, on_record: Callable[[RunRecord], None] | None = None,
          on_update: UpdateHook | None = None, checkpoint_dir: str | Path | None = None,
          eval_env: Env | None = None, clock: Callable[[], float] = time.perf_counter) -> TrainResult:
    """Run one seeded training job and stream a :class:`RunRecord` per evaluation."""
    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    cfg = cfg.resolved(env.spec.name)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    loop = _train_on_policy if cfg.algo == "AC" else _train_off_policy
    return loop(env, cfg, total_steps, on_record, on_update, ckpt, eval_env, clock)


@dataclass
class EpochBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    rewards: np.ndarray
    episode_bounds: list[tuple[int, int]]
    bootstrap: list[float]
    completed_returns: list[float] = field(default_factory=list)


def _collect_epoch(env: Env, policy, theta: ParamVector, critic, w: ParamVector, n_steps: int,
                   obs: np.ndarray, streams: _Streams, ep_ret: float) -> tuple[EpochBatch, np.ndarray, float]:
    S, A, S2, D, R = [], [], [], [], []
    bounds, boot, done_returns = [], [], []
    start = 0
    th = theta.data
    for t in range(n_steps):
        if policy.kind == "categorical":
            a = policy.sample(th, obs, streams.act)
            stored = a
        else:
            a, stored = policy.sample(th, obs, streams.act)
        obs2, r, done, truncated = env.step(a)
        S.append(obs)
        A.append(stored)
        S2.append(obs2)
        D.append(float(done))
        R.append(r)
        ep_ret += r
        last = t == n_steps - 1
        if done or truncated or last:
            bounds.append((start, t + 1))
            start = t + 1
            if done:
                boot.append(0.0)
            else:
                with torch.no_grad():
                    boot.append(float(critic(w.data, obs2)))
            if done or truncated:
                done_returns.append(ep_ret)
                ep_ret = 0.0
                obs2 = env.reset(streams.env)
        obs = obs2
    batch = EpochBatch(np.array(S), np.array(A), np.array(S2), np.array(D), np.array(R), bounds, boot,
                       done_returns)
    return batch, obs, ep_ret


def ac_objectives(batch: EpochBatch, policy, critic, w: ParamVector, cfg: AlgoConfig) -> Objectives:
    """On-policy objectives for one epoch of data.

    ``J`` combines the GAE policy-gradient surrogate (advantages fixed at the
    current critic) with ``gamma * V_w(s')`` terms that carry the actor
    objective's dependence on the critic. ``L`` is Monte Carlo value
    regression, and ``theta_L`` is the all-starts V-form estimator of its
    gradient in ``theta``.
    """
    with torch.no_grad():
        values = critic(w.data, batch.states).numpy()
    adv = np.empty(len(batch.rewards))
    ret = np.empty(len(batch.rewards))
    for (lo, hi), b in zip(batch.episode_bounds, batch.bootstrap):
        adv[lo:hi] = gae_advantages(batch.rewards[lo:hi], values[lo:hi], cfg.gamma, cfg.gae_lambda, b)
        ret[lo:hi] = mc_returns(batch.rewards[lo:hi], cfg.gamma, b)
    scale = 1.0
    if cfg.normalize_advantages and len(adv) > 1:
        # a per-epoch rescaling of the whole actor objective, so its critic-dependent
        # part stays on the same scale as the normalized policy-gradient part
        scale = 1.0 / (adv.std() + 1e-8)
        adv = adv - adv.mean()
    n = len(adv)
    adv_t = torch.as_tensor(adv)
    ret_t = torch.as_tensor(ret)
    cont = torch.as_tensor(cfg.gamma * (1.0 - batch.terminal))
    states, actions, next_states = batch.states, batch.actions, batch.next_states

    def J(theta, w):
        logp = score_log_prob(policy, theta, states, actions)
        return scale * ((logp * adv_t).mean() + (cont * critic(w, next_states)).mean())

    def L(theta, w):
        return ((critic(w, states) - ret_t) ** 2).mean()

    theta_L = prop1_all_starts_surrogate(states, actions, ret, batch.episode_bounds, policy, critic, cfg.gamma)
    return Objectives(J, L, n, theta_L)


def _train_on_policy(env, cfg, total_steps, on_record, on_update, ckpt, eval_env, clock) -> TrainResult:
    streams = _Streams.from_seed(cfg.seed)
    policy, critic = build_agent(env, cfg)
    theta, w = policy.init(streams.init), critic.init(streams.init)
    obs = env.reset(streams.env)
    ep_ret = 0.0
    records: list[RunRecord] = []
    result = TrainResult(records, theta, w)
    t0 = clock()
    n_epochs = max(1, total_steps // cfg.steps_per_epoch)
    for epoch in range(n_epochs):
        try:
            batch, obs, ep_ret = _collect_epoch(env, policy, theta, critic, w, cfg.steps_per_epoch, obs,
                                                streams, ep_ret)
            obj = ac_objectives(batch, policy, critic, w, cfg)
            est = leader_direction(obj, theta, w, cfg)
            diag = est.diagnostics
            new_theta = theta + cfg.lr_actor * est.direction
            g = est.follower_grad
            for i in range(cfg.unroll_m):
                if i:
                    g = partial_gradients(obj.L, theta, w)[1]
                w = w - cfg.lr_critic * g
            theta = new_theta
            _check_finite("actor", theta)
            _check_finite("critic", w)
        except (NumericOverflowError, SolverBreakdownError) as err:
            raise TrainingAborted((epoch + 1) * cfg.steps_per_epoch, err,
                                  _checkpoint(ckpt, result.actor, result.critic)) from err
        result.actor, result.critic = theta, w
        result.leader_updates += 1
        result.fallback_updates += int(diag["fallback"])
        if on_update is not None:
            on_update(epoch, theta, w)
        rets = batch.completed_returns or [float(batch.rewards.sum())]
        rec = RunRecord((epoch + 1) * cfg.steps_per_epoch, float(np.mean(rets)), float(np.std(rets)),
                        diag["leader_grad_norm"], diag["follower_grad_norm"], diag["correction_norm"],
                        diag["cg_residual"], int(diag["fallback"]), clock() - t0)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return result


def evaluate(env: Env, policy, theta: ParamVector, episodes: int, rng: np.random.Generator) -> list[float]:
    """Returns of ``episodes`` runs of the noise-free (deterministic or mean) policy."""
    out = []
    for _ in range(episodes):
        obs = env.reset(rng)
        total, done, truncated = 0.0, False, False
        while not (done or truncated):
            obs, r, done, truncated = env.step(policy.mode(theta.data, obs))
            total += r
        out.append(total)
    return out


def _explore(policy, theta: ParamVector, obs, cfg: AlgoConfig, space: Box, t: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if t < cfg.start_steps:
        a = rng.uniform(space.low, space.high, size=space.dim)
        return a, a
    if policy.kind == "deterministic":
        a = policy.sample(theta.data, obs) + cfg.act_noise * rng.standard_normal(space.dim)
        a = np.clip(a, space.low, space.high)
        return a, a
    return policy.sample(theta.data, obs, rng)


def _train_off_policy(env, cfg, total_steps, on_record, on_update, ckpt, eval_env, clock) -> TrainResult:
    streams = _Streams.from_seed(cfg.seed)
    policy, critic = build_agent(env, cfg)
    space = env.spec.action_space
    theta, w = policy.init(streams.init), critic.init(streams.init)
    w_target = w.copy()
    actor_opt, critic_opt = Adam(theta, cfg.lr_actor), Adam(w, cfg.lr_critic)
    buf = ReplayBuffer(env.spec.state_dim, space.dim, min(cfg.replay_size, total_steps), streams.buffer_seed)
    eval_env = eval_env or type(env)()
    records: list[RunRecord] = []
    result = TrainResult(records, theta, w)
    diags: list[dict[str, float]] = []
    n_updates = 0
    t0 = clock()
    obs = env.reset(streams.env)

    def update():
        nonlocal theta, w, w_target
        batch = buf.sample(cfg.batch_size)
        if cfg.algo == "DDPG":
            obj = ddpg_objectives(batch, policy, critic, w_target.data, cfg.gamma)
        else:
            eps = streams.update.standard_normal((len(batch), space.dim))
            eps2 = streams.update.standard_normal((len(batch), space.dim))
            obj = sac_objectives(batch, policy, critic, w_target.data, cfg.eta, cfg.gamma, eps, eps2)
        est = leader_direction(obj, theta, w, cfg)
        g = est.follower_grad
        if not cfg.stackelberg or cfg.leader == "actor":
            new_theta = actor_opt.step(-est.direction)
            for i in range(cfg.unroll_m):
                if i:
                    g = partial_gradients(obj.L, theta, w)[1]
                w = critic_opt.step(g)
            theta = new_theta
        else:
            new_w = critic_opt.step(est.direction)
            for i in range(cfg.unroll_m):
                if i:
                    g = partial_gradients(obj.J, theta, w)[0]
                theta = actor_opt.step(-g)
            w = new_w
        _check_finite("actor", theta)
        _check_finite("critic", w)
        w_target = polyak_update(w_target, w, cfg.polyak)
        return est.diagnostics

    for t in range(total_steps):
        a, u = _explore(policy, theta, obs, cfg, space, t, streams.act)
        obs2, r, done, truncated = env.step(a)
        buf.add(obs, a, r, obs2, done, u)
        obs = env.reset(streams.env) if (done or truncated) else obs2
        if t + 1 >= cfg.update_after and (t + 1) % cfg.update_every == 0:
            for _ in range(cfg.update_every):
                try:
                    diag = update()
                except (NumericOverflowError, SolverBreakdownError) as err:
                    raise TrainingAborted(t + 1, err, _checkpoint(ckpt, result.actor, result.critic)) from err
                result.actor, result.critic = theta, w
                result.leader_updates += 1
                result.fallback_updates += int(diag["fallback"])
                diags.append(diag)
                if on_update is not None:
                    on_update(n_updates, theta, w)
                n_updates += 1
        if (t + 1) % cfg.eval_every == 0 or t + 1 == total_steps and not records:
            rets = evaluate(eval_env, policy, theta, cfg.eval_episodes, streams.eval)
            m = _mean_diag(diags)
            diags = []
            rec = RunRecord(t + 1, float(np.mean(rets)), float(np.std(rets)), m["leader_grad_norm"],
                            m["follower_grad_norm"], m["correction_norm"], m["cg_residual"], m["fallback"],
                            clock() - t0)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    result.actor, result.critic = theta, w
    return result


def steps_to_threshold(records: list[RunRecord], threshold: float) -> float:
    """First evaluation step whose mean return reaches ``threshold``; ``inf`` if none does."""
    for rec in records:
        if rec.eval_return_mean >= threshold:
            return float(rec.step)
    return math.inf
