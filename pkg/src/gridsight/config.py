"""Run configuration: one human-editable JSON document that fixes the world,
preprocessing, training, ablation, and perturbation-mix choices for a run.

Every field has a default, so {} is a valid config; unknown keys anywhere in
the document are rejected with the full key path. The resolved (fully
defaulted) form is written next to every run's artifacts, and the run
directory name is derived from its hash, so artifacts self-describe how they
were produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import AblationConfig
from .preproc import CropConfig
from .training import TrainConfig
from .world import Perturbation, WorldConfig

RUN_ROOT_ENV = "GRIDSIGHT_RUN_ROOT"


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _from_dict(cls, d: dict, prefix: str):
    """Build a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix} must be an object, got {type(d).__name__}")
    known = _fields(cls)
    for k in d:
        if k not in known:
            raise ConfigError(f"unknown key {prefix}.{k}")
    kw = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(tuple(e) if isinstance(e, list) else e for e in v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as err:
        raise ConfigError(f"bad value under {prefix}: {err}") from err


def _mix_from_list(items, prefix: str) -> tuple:
    out = []
    for i, entry in enumerate(items):
        if not isinstance(entry, dict):
            raise ConfigError(f"{prefix}[{i}] must be an object")
        extra = set(entry) - {"kind", "magnitude", "weight"}
        if extra:
            raise ConfigError(f"unknown key {prefix}[{i}].{sorted(extra)[0]}")
        pert = Perturbation(kind=entry.get("kind", "none"),
                            magnitude=entry.get("magnitude", 0.0))
        weight = float(entry.get("weight", 1.0))
        out.append((pert, weight))
    return tuple(out)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    # [(Perturbation, weight)] applied at generation time; default all-clean
    perturbation_mix: tuple = ((Perturbation(), 1.0),)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {"world", "crop", "train", "ablation", "perturbation_mix"}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown key {k}")
        return cls(
            world=WorldConfig.from_dict(d.get("world", {})),
            crop=_from_dict(CropConfig, d.get("crop", {}), "crop"),
            train=_from_dict(TrainConfig, d.get("train", {}), "train"),
            ablation=_from_dict(AblationConfig, d.get("ablation", {}),
                                "ablation"),
            perturbation_mix=_mix_from_list(d.get("perturbation_mix", []),
                                            "perturbation_mix")
            or ((Perturbation(), 1.0),),
        )

    def to_dict(self) -> dict:
        def plain(obj):
            d = dataclasses.asdict(obj)
            return {k: list(v) if isinstance(v, tuple) else v
                    for k, v in d.items()}

        return {
            "world": self.world.to_dict(),
            "crop": plain(self.crop),
            "train": plain(self.train),
            "ablation": plain(self.ablation),
            "perturbation_mix": [
                {"kind": p.kind, "magnitude": p.magnitude, "weight": w}
                for p, w in self.perturbation_mix],
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def load_run_config(path: str | None) -> RunConfig:
    """Parse a config file; None means all defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    return RunConfig.from_dict(doc)


def run_root() -> str:
    return os.environ.get(RUN_ROOT_ENV, "runs")
