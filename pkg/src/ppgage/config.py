"""Experiment configuration: nested dataclasses with a JSON file format.

The config file has one section per module ("cohort", "net", "train",
"analysis") plus the master seed and output directory; missing fields fall
back to the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .errors import InvalidInputError
from .net.model import NetConfig
from .net.train import TrainConfig
from .synthetic import CohortSpec, MorphologyParams

THRESHOLD_MODES = ("9", "15", "sd")


@dataclasses.dataclass(frozen=True)
class AnalysisConfig:
    threshold_mode: str = "9"  # "9" | "15" | "sd" (sd = std of the gaps)
    n_knots: int = 4
    adjust: tuple[str, ...] = ("age", "sex", "bmi")
    gap_grid: tuple[float, float, int] = (-10.0, 10.0, 21)
    probe_ages: tuple[float, ...] = (40.0, 55.0, 70.0)
    split: str = "all"  # records analyzed: "all" | "holdout" | "nontrain"

    def __post_init__(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise InvalidInputError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.split not in ("all", "holdout", "nontrain"):
            raise InvalidInputError("split must be all, holdout, or nontrain")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortSpec = CohortSpec()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    out_dir: str = "runs/default"
    seed: int = 0


def _build(cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise InvalidInputError(f"unknown {cls.__name__} field {key!r}")
        kwargs[key] = value
    for name, f in fields.items():
        if name not in kwargs:
            continue
        if f.type in ("MorphologyParams", MorphologyParams) and isinstance(kwargs[name], dict):
            kwargs[name] = _build(MorphologyParams, kwargs[name])
    # JSON arrays arrive as lists; frozen dataclasses want tuples.
    for name in list(kwargs):
        if isinstance(kwargs[name], list):
            kwargs[name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in kwargs[name]
            )
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {"cohort", "net", "train", "analysis", "out_dir", "seed"}
    unknown = set(data) - known
    if unknown:
        raise InvalidInputError(f"unknown config sections {sorted(unknown)}")
    return ExperimentConfig(
        cohort=_build(CohortSpec, data.get("cohort", {})),
        net=_build(NetConfig, data.get("net", {})),
        train=_build(TrainConfig, data.get("train", {})),
        analysis=_build(AnalysisConfig, data.get("analysis", {})),
        out_dir=data.get("out_dir", "runs/default"),
        seed=int(data.get("seed", 0)),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise InvalidInputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise InvalidInputError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise InvalidInputError("config root must be a JSON object")
    return config_from_dict(data)


def save_config(path: str | Path, config: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
