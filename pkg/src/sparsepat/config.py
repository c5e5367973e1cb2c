"""Run configuration: one JSON document covering every pipeline stage.

Schema (all sections optional; omitted keys take the defaults shown by
``sparsepat params --dry-run`` or ``RunConfig().to_dict()``)::

    {
      "seed": int,                      # overrides dataset.seed and train.seed
      "out": str,                       # run / dataset directory
      "generator":     {GeneratorConfig fields},
      "discriminator": {DiscriminatorConfig fields},
      "train":         {TrainConfig fields},
      "dataset":       {DatasetSpec fields},
      "metrics":       {MetricConfig fields},
      "workers": int                    # dataset simulation processes
    }

Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DatasetSpec
from .gan import TrainConfig
from .metrics import MetricConfig
from .models import DiscriminatorConfig, GeneratorConfig

SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "dataset": DatasetSpec,
    "metrics": MetricConfig,
}
SNAPSHOT_NAME = "config.json"


class ConfigError(ValueError):
    pass


def _section_dict(obj):
    d = dataclasses.asdict(obj)
    if "arch" in d:
        d["arch"] = obj.arch.value
    return d


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    workers: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"seed", "out", "workers"} - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        workers = raw.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {workers!r}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            if not isinstance(raw.get(name, {}), dict):
                raise ConfigError(f"section {name!r} must be an object")
            section = dict(raw.get(name, {}))
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            if name in ("train", "dataset"):
                section["seed"] = seed
            try:
                kwargs[name] = klass(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        cfg = cls(seed=seed, out=str(raw.get("out", "run")), workers=workers, **kwargs)
        if cfg.discriminator.in_channels != cfg.generator.in_channels + cfg.generator.out_channels:
            raise ConfigError("discriminator.in_channels must equal generator in_channels + out_channels")
        return cfg

    def to_dict(self):
        d = {"seed": self.seed, "out": self.out, "workers": self.workers}
        for name in SECTIONS:
            d[name] = _section_dict(getattr(self, name))
        return d

    def with_overrides(self, **changes) -> "RunConfig":
        """Re-validate after replacing top-level keys or ``section.key`` entries."""
        raw = self.to_dict()
        for key, value in changes.items():
            if value is None:
                continue
            if "." in key:
                sec, sub = key.split(".", 1)
                raw[sec][sub] = value
            else:
                raw[key] = value
        return RunConfig.from_dict(raw)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write_snapshot(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / SNAPSHOT_NAME).write_text(self.dumps())


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return RunConfig.from_dict(raw)
