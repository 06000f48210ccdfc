"""Actor-critic training with optional Stackelberg leader updates."""

from stac.rl.config import AlgoConfig, ConfigError
from stac.rl.train import RunRecord, TrainResult, TrainingAborted, steps_to_threshold, train

__all__ = ["AlgoConfig", "ConfigError", "RunRecord", "TrainResult", "TrainingAborted",
           "steps_to_threshold", "train"]
