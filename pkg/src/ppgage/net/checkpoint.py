"""Binary checkpoint format.

Layout: 8-byte magic "PPGAGE01", little-endian u32 version, u64 manifest
length, UTF-8 JSON manifest (net config, array names and shapes in order,
scalar training state, per-epoch log), then the arrays as raw little-endian
float32 in manifest order. Saving what was loaded reproduces the file byte
for byte.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from .model import ModelParams, NetConfig
from .train import AdamState, EpochLog, TrainState

MAGIC = b"PPGAGE01"
VERSION = 1


def _net_config_to_dict(config: NetConfig) -> dict:
    out = dataclasses.asdict(config)
    out["stages"] = [list(s) for s in config.stages]
    return out


def _net_config_from_dict(data: dict) -> NetConfig:
    data = dict(data)
    data["stages"] = tuple(tuple(s) for s in data["stages"])
    return NetConfig(**data)


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in state.params.arrays.items():
        arrays[f"params/{name}"] = arr
    for name, arr in state.adam.m.items():
        arrays[f"adam.m/{name}"] = arr
    for name, arr in state.adam.v.items():
        arrays[f"adam.v/{name}"] = arr
    for name, arr in state.best_params.arrays.items():
        arrays[f"best/{name}"] = arr

    best = state.best_selection_mae
    manifest = {
        "net": _net_config_to_dict(state.params.config),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
        "scalars": {
            "next_epoch": state.next_epoch,
            "adam_step": state.adam.step,
            "best_selection_mae": None if not np.isfinite(best) else best,
        },
        "log": [row.as_row() for row in state.log],
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> TrainState:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise InvalidInputError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))

        arrays: dict[str, np.ndarray] = {}
        for name, shape in manifest["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            arrays[name] = data.reshape(shape).copy()

    config = _net_config_from_dict(manifest["net"])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("params/")}
    best = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("best/")}
    adam = AdamState(
        m={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.m/")},
        v={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        step=manifest["scalars"]["adam_step"],
    )
    best_mae = manifest["scalars"]["best_selection_mae"]
    return TrainState(
        params=ModelParams(config=config, arrays=params),
        adam=adam,
        next_epoch=manifest["scalars"]["next_epoch"],
        best_params=ModelParams(config=config, arrays=best),
        best_selection_mae=float("inf") if best_mae is None else best_mae,
        log=[EpochLog(int(r[0]), r[1], r[2], r[3], r[4]) for r in manifest["log"]],
    )
