"""Algorithm configuration shared by the training loops."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    """An algorithm configuration that cannot be run."""


ALGOS = ("AC", "DDPG", "SAC")
LEADERS = ("actor", "critic")

# regularization used when lam is left unset
DEFAULT_LAMBDA = {"cartpole": 0.0, "pendulum": 500.0}


@dataclass(frozen=True)
class AlgoConfig:
    """Hyper-parameters for one training run.

    ``leader`` is ignored when ``stackelberg`` is off. ``lam=None`` resolves to
    the per-environment default through :meth:`resolved`.
    """

    algo: str = "AC"
    stackelberg: bool = False
    leader: str = "actor"
    lam: float | None = None
    cg_iters: int = 10
    cg_tol: float = 1e-10
    unroll_m: int = 1
    gamma: float = 0.99
    gae_lambda: float = 0.97
    eta: float = 0.2
    polyak: float = 0.995
    batch_size: int = 100
    steps_per_epoch: int = 4000
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = field(default=(64, 32))
    activation: str = "tanh"
    normalize_advantages: bool = True
    # off-policy schedule
    replay_size: int = 1_000_000
    start_steps: int = 10_000
    update_after: int = 1_000
    update_every: int = 50
    act_noise: float = 0.1
    eval_every: int = 10_000
    eval_episodes: int = 10

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.leader not in LEADERS:
            raise ConfigError(f"leader must be one of {LEADERS}, got {self.leader!r}")
        if self.stackelberg and self.algo == "AC" and self.leader == "critic":
            raise ConfigError("critic-as-leader is only defined for off-policy algorithms")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.cg_iters < 1 or self.unroll_m < 1:
            raise ConfigError("cg_iters and unroll_m must be at least 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0 or not 0.0 <= self.polyak <= 1.0:
            raise ConfigError("gae_lambda and polyak must lie in [0, 1]")
        for name in ("batch_size", "steps_per_epoch", "eval_every", "eval_episodes",
                     "update_every", "replay_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    @property
    def name(self) -> str:
        if not self.stackelberg:
            return self.algo
        base = {"AC": "STAC", "DDPG": "STDDPG", "SAC": "STSAC"}[self.algo]
        return base if self.algo == "AC" else f"{base}-{'AL' if self.leader == 'actor' else 'CL'}"

    def resolved(self, env_name: str) -> AlgoConfig:
        if self.lam is not None:
            return self
        return replace(self, lam=DEFAULT_LAMBDA.get(env_name, 0.0))

    @classmethod
    def for_env(cls, env_name: str, algo: str, **overrides) -> AlgoConfig:
        """Reference defaults: small tanh nets for AC, (256, 256) relu nets and Adam settings otherwise."""
        base: dict = {"algo": algo}
        if algo == "AC":
            base.update(hidden=(64, 32), activation="tanh")
        else:
            base.update(hidden=(256, 256), activation="relu", lr_actor=1e-3, lr_critic=1e-3)
        base.update(overrides)
        return cls(**base).resolved(env_name)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
