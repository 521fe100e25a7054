"""Run configuration: one JSON-loadable dataclass drives every CLI command.

Unknown keys in a config file or override are hard errors so a misspelled
ablation flag can never silently fall back to a default. The full config is
serialized into every checkpoint's metadata for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .errors import ConfigError

PRESETS = ("toy", "paper_scale_dry_run")
SEED_ENV = "OVU_SEED"


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    # stage scaling
    scale: float = 1.0 / 500.0
    lr_scale: float = 1.0
    step_floor: int = 200
    # vae pretraining
    vae_steps: int = 800
    vae_batch: int = 8
    vae_lr: float = 1.5e-3
    # sampling defaults (same guidance across suites)
    sampler_steps: int = 20
    cfg_txt: float = 4.0
    cfg_img: float = 2.0
    # refiner ablation axes
    refiner_input_mode: str = "concat_two"
    refiner_global_mode: str = "cls_token"
    # t2i conditioning dropout
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {PRESETS}")
        if self.scale <= 0 or self.sampler_steps < 1:
            raise ConfigError("scale and sampler_steps must be positive")

    # -- construction -------------------------------------------------------------

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        unknown = set(overrides) - self.field_names()
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def apply_env(self) -> "RunConfig":
        seed = os.environ.get(SEED_ENV)
        if seed is None:
            return self
        try:
            return dataclasses.replace(self, seed=int(seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- derived configs -----------------------------------------------------------

    def model_config(self):
        from .model import ModelConfig
        from .refiner import RefinerConfig

        if self.preset != "toy":
            raise ConfigError("only the toy preset builds a trainable model")
        return ModelConfig(
            refiner=RefinerConfig(
                input_mode=self.refiner_input_mode, global_mode=self.refiner_global_mode
            )
        )


def parse_override(text: str):
    """Parse one ``key=value`` CLI override with JSON value semantics."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
