"""Declarative run description stored as JSON.

A file looks like::

    {
      "schema": "dara-run/1",
      "name": "desk-dara",
      "model": {...ModelConfig fields...},
      "task": {...TaskConfig fields...},
      "pretrain": {...TrainPlan fields...},
      "adapt": {...TrainPlan fields...},
      "loss": {"l1": 1.0, "giou": 1.0},
      "regime": "dara",
      "seeds": [0, 1, 2],
      "out": "runs/desk-dara"
    }

Every section is optional on input and filled from defaults; the saved form
is always complete so it fully determines a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .train import REGIMES, LossWeights, TaskConfig, TrainPlan

RUN_SCHEMA = "dara-run/1"

# Desk-scale schedules. Pretraining nearly freezes the backbones so their
# features stay general; adapters learn five times faster than the fusion stage.
DESK_PRETRAIN = TrainPlan.scaled(40, lr_model=1e-3, lr_backbone=1e-6, phase="pretrain")
DESK_ADAPT = TrainPlan.scaled(30, lr_model=1e-3, adapter_lr_mult=5.0)


def _build(cls, section: Optional[dict], what: str):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from None


def _plan(section: dict, what: str, base: TrainPlan) -> TrainPlan:
    """Train plan section over ``base``; a missing ``decay_epoch`` sits at two thirds
    of a given ``epochs``."""
    section = dict(section)
    if "epochs" in section and "decay_epoch" not in section:
        section["decay_epoch"] = (2 * int(section["epochs"])) // 3
    return _build(TrainPlan, dataclasses.asdict(base) | section, what)


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: TrainPlan = field(default_factory=lambda: DESK_PRETRAIN)
    adapt: TrainPlan = field(default_factory=lambda: DESK_ADAPT)
    loss: LossWeights = field(default_factory=LossWeights)
    regime: str = "dara"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "RunConfig":
        """Single-seed copy; plan seeds follow the run seed."""
        return self.replace(seeds=(int(seed),), pretrain=self.pretrain.replace(seed=int(seed)),
                            adapt=self.adapt.replace(seed=int(seed)))

    def to_dict(self) -> dict:
        return {
            "schema": RUN_SCHEMA,
            "name": self.name,
            "model": self.model.to_dict(),
            "task": dataclasses.asdict(self.task),
            "pretrain": dataclasses.asdict(self.pretrain),
            "adapt": dataclasses.asdict(self.adapt),
            "loss": dataclasses.asdict(self.loss),
            "regime": self.regime,
            "seeds": list(self.seeds),
            "out": self.out,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", RUN_SCHEMA)
        if schema != RUN_SCHEMA:
            raise ConfigError(f"unsupported run config schema {schema!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        for key in ("model", "task", "pretrain", "adapt", "loss"):
            if key in d and not isinstance(d[key], dict):
                raise ConfigError(f"run config section {key!r} must be an object")
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(ModelConfig.desk().to_dict() | d["model"])
        if "task" in d:
            kw["task"] = _build(TaskConfig, d["task"], "task")
        if "pretrain" in d:
            kw["pretrain"] = _plan(d["pretrain"], "pretrain", DESK_PRETRAIN)
        if "adapt" in d:
            kw["adapt"] = _plan(d["adapt"], "adapt", DESK_ADAPT)
        if "loss" in d:
            kw["loss"] = _build(LossWeights, d["loss"], "loss")
        for key in ("name", "regime", "out"):
            if key in d:
                kw[key] = str(d[key])
        if "seeds" in d:
            seeds = d["seeds"]
            if isinstance(seeds, int):
                seeds = [seeds]
            kw["seeds"] = tuple(int(s) for s in seeds)
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
