"""Run configuration: nested dataclasses with strict JSON (de)serialization.

Every field has a default; unknown keys in a config file are rejected rather
than silently ignored.  The effective configuration is always written back
next to a command's outputs so a run can be reproduced from its directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Limits, MaskingConfig
from .model import ModelConfig
from .objectives import ObjectiveConfig, TrainerConfig


@dataclass
class DataConfig:
    labeled_path: str = ""
    unlabeled_path: str = ""
    vocab_path: str = ""  # empty: build from the loaded corpora
    min_freq: int = 1
    limits: Limits = field(default_factory=Limits)
    masking: MaskingConfig = field(default_factory=MaskingConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=7))
    training: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, path="")


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(
            f"unknown config key(s) {sorted(unknown)} in section {path or '<root>'}"
        )
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        target = _NESTED.get((cls, name))
        if target is not None:
            kwargs[name] = _from_dict(target, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "training"): TrainerConfig,
    (RunConfig, "data"): DataConfig,
    (TrainerConfig, "objective"): ObjectiveConfig,
    (DataConfig, "limits"): Limits,
    (DataConfig, "masking"): MaskingConfig,
}


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def save_config(config: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
