"""Run configuration: one serializable object drives every subcommand.

A run directory always receives the exact effective configuration that
produced its files, so every reported number can be traced to the JSON that
generated it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclass
class ModelTraining:
    epochs: int
    batch_size: int
    learning_rate: float


@dataclass
class RunConfig:
    master_seed: int = 7
    n_conditions: int = 1000
    generations_per_condition: int = 5
    n_eval_conditions: int = 500
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser: ModelTraining = field(
        default_factory=lambda: ModelTraining(epochs=150, batch_size=64, learning_rate=3e-3)
    )
    classifier: ModelTraining = field(
        default_factory=lambda: ModelTraining(epochs=300, batch_size=64, learning_rate=3e-2)
    )
    ridge: float = 1e-6
    split: float = 0.8
    use_classifier_guidance: bool = True
    use_regressor_guidance: bool = True
    classifier_scale: float = 10.0
    regressor_scale: float = 10.0
    stop_gradient_y: bool = False
    sigma_mode: str | float = "median"
    cloud_size: int = 512
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0")
        if self.n_conditions < 1 or self.n_eval_conditions < 0:
            raise ConfigError("condition counts out of range")
        if self.generations_per_condition < 1:
            raise ConfigError("generations_per_condition must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        if self.classifier_scale < 0.0 or self.regressor_scale < 0.0:
            raise ConfigError("guidance scales must be >= 0")
        if isinstance(self.sigma_mode, str):
            if self.sigma_mode != "median":
                raise ConfigError("sigma_mode must be 'median' or a positive number")
        elif not self.sigma_mode > 0.0:
            raise ConfigError("fixed sigma must be > 0")

    @property
    def fixed_sigma(self) -> float | None:
        return None if self.sigma_mode == "median" else float(self.sigma_mode)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        allowed = set(cls.__dataclass_fields__)
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(raw)
        for section in ("denoiser", "classifier"):
            if section in kwargs:
                spec = kwargs[section]
                if not isinstance(spec, dict) or set(spec) - {
                    "epochs",
                    "batch_size",
                    "learning_rate",
                }:
                    raise ConfigError(f"{section}: expected epochs/batch_size/learning_rate")
                try:
                    kwargs[section] = ModelTraining(**spec)
                except TypeError as exc:
                    raise ConfigError(f"{section}: {exc}") from exc
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)
