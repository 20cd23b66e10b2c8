"""Minibatch Adam training with per-epoch selection tracking.

Shuffling uses a fresh stream derived from (seed, "shuffle", epoch), so a run
resumed from a checkpoint replays exactly the batches the uninterrupted run
would have seen.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ..dist_loss import LossBreakdown, dist_loss, mae_loss
from ..errors import InvalidInputError, NumericError
from ..label_distribution import LabelGrid, estimate_label_density, integer_grid
from ..streams import derive_rng
from .model import ModelParams, NetConfig, backward, forward, forward_with_cache, init_params

LOSS_KINDS = ("dist", "mae")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4  # classic L2: lambda * w added to the gradient
    loss: str = "dist"
    sort_epsilon: float = 1.0
    dist_weight: float = 1.0
    kde_bandwidth: float = 0.5
    label_min: int = 21
    label_max: int = 111

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise InvalidInputError(f"loss must be one of {LOSS_KINDS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    """First/second moment arrays per parameter plus the shared step counter."""

    m: dict[str, np.ndarray] = field(repr=False)
    v: dict[str, np.ndarray] = field(repr=False)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            step=0,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """In-place Adam step with L2 decay folded into the gradient."""
    state.step += 1
    t = state.step
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.adam_eps
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.arrays.items():
        g = grads[name].astype(p.dtype, copy=False)
        if config.weight_decay:
            g = g + p.dtype.type(config.weight_decay) * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bias1) * m / (np.sqrt(v / bias2) + eps)


@dataclass
class EpochLog:
    epoch: int
    train_total: float
    train_sample_mae: float
    train_dist_mae: float
    selection_mae: float

    def as_row(self) -> list[float]:
        return [
            float(self.epoch),
            self.train_total,
            self.train_sample_mae,
            self.train_dist_mae,
            self.selection_mae,
        ]


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a training run."""

    params: ModelParams
    adam: AdamState
    next_epoch: int
    best_params: ModelParams
    best_selection_mae: float
    log: list[EpochLog] = field(default_factory=list)


def predict(params: ModelParams, waveforms: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Predictions for (N, 1, L) waveforms, computed in fixed-size batches."""
    out = []
    for start in range(0, waveforms.shape[0], batch_size):
        out.append(forward(params, waveforms[start : start + batch_size]))
    return np.concatenate(out).astype(np.float64)


def _label_grid(labels: np.ndarray, config: TrainConfig) -> LabelGrid:
    return estimate_label_density(
        labels,
        bandwidth=config.kde_bandwidth,
        grid=integer_grid(config.label_min, config.label_max),
    )


def train(
    train_x: np.ndarray,
    train_y: np.ndarray,
    selection_x: np.ndarray,
    selection_y: np.ndarray,
    net_config: NetConfig,
    config: TrainConfig,
    seed: int,
    start_state: TrainState | None = None,
) -> TrainState:
    """Run (or continue) training; returns the final state.

    The returned state's ``best_params`` are the snapshot with the lowest
    selection MAE seen so far. Training is deterministic in (inputs, seed).
    """
    train_x = np.asarray(train_x, dtype=np.float32)
    train_y = np.asarray(train_y, dtype=np.float64)
    if train_x.shape[0] == 0:
        raise InvalidInputError("training set is empty")
    if config.loss == "dist" and config.batch_size < 64:
        warnings.warn(
            "batch sizes below 64 quantize the label distribution crudely; "
            "the distributional term will be noisy",
            stacklevel=2,
        )

    # The label distribution is estimated once from the full training set;
    # every batch reuses it with its own batch size.
    grid = _label_grid(train_y, config) if config.loss == "dist" else None

    if start_state is None:
        params = init_params(net_config, seed)
        state = TrainState(
            params=params,
            adam=AdamState.zeros_like(params),
            next_epoch=0,
            best_params=params.copy(),
            best_selection_mae=float("inf"),
            log=[],
        )
    else:
        state = start_state

    n = train_x.shape[0]
    for epoch in range(state.next_epoch, config.epochs):
        order = derive_rng(seed, "shuffle", epoch).permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            preds, caches = forward_with_cache(state.params, train_x[idx])
            breakdown = _batch_loss(preds, train_y[idx], grid, config)
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss {breakdown.total!r} at epoch {epoch}, "
                    f"step {state.adam.step}"
                )
            grads, _ = backward(state.params, caches, breakdown.grad)
            adam_update(state.params, grads, state.adam, config)
            weight = idx.size / n
            totals += weight * np.array(
                [breakdown.total, breakdown.sample_mae, breakdown.distributional_mae]
            )

        sel_preds = predict(state.params, selection_x)
        selection_mae = float(np.mean(np.abs(sel_preds - selection_y)))
        state.log.append(
            EpochLog(epoch, float(totals[0]), float(totals[1]), float(totals[2]), selection_mae)
        )
        if selection_mae < state.best_selection_mae:
            state.best_selection_mae = selection_mae
            state.best_params = state.params.copy()
        state.next_epoch = epoch + 1
    return state


def _batch_loss(preds, labels, grid, config: TrainConfig) -> LossBreakdown:
    if config.loss == "mae":
        return mae_loss(preds, labels)
    return dist_loss(preds, labels, grid, config.sort_epsilon, config.dist_weight)
