"""Experiment configuration: one JSON file, every training field overridable
from the command line."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .trainer import ConfigError, TrainConfig
from .world import World


@dataclass
class ExperimentConfig:
    world: World
    train: TrainConfig
    data_dir: str = "data"
    out_dir: str = "out"
    dataset_sizes: dict = field(default_factory=lambda: {"train": 2000, "valid": 300, "test": 300})
    data_seed: int = 3
    methods: list = field(default_factory=lambda: ["sup", "jsa", "var"])

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "train": self.train.to_dict(),
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "dataset_sizes": dict(self.dataset_sizes),
            "data_seed": self.data_seed,
            "methods": list(self.methods),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            world = World.from_dict(d.get("world", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
            sizes = d.get("dataset_sizes", {"train": 2000, "valid": 300, "test": 300})
            return cls(
                world=world,
                train=train,
                data_dir=d.get("data_dir", "data"),
                out_dir=d.get("out_dir", "out"),
                dataset_sizes={k: int(v) for k, v in sizes.items()},
                data_seed=int(d.get("data_seed", 3)),
                methods=list(d.get("methods", ["sup", "jsa", "var"])),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)
