"""Reusable experiment drivers shared by the scripts and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .net.model import NetConfig
from .net.train import TrainConfig, train
from .streams import seed_sequence
from .synthetic import CohortSpec, records_to_arrays, sample_cohort, split_dataset


def stage_seed(master_seed: int, stage: str) -> int:
    """64-bit stage seed derived from (master seed, stage name)."""
    return int(seed_sequence(master_seed, stage).generate_state(1, np.uint64)[0])


def decile_mae(predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """MAE within each label decile (decile edges from the labels)."""
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    edges = np.quantile(labels, np.linspace(0, 1, 11))
    out = np.full(10, np.nan)
    for d in range(10):
        lo, hi = edges[d], edges[d + 1]
        mask = (labels >= lo) & (labels <= hi if d == 9 else labels < hi)
        if mask.any():
            out[d] = np.mean(np.abs(predictions[mask] - labels[mask]))
    return out


def tail_decile_mae(predictions: np.ndarray, labels: np.ndarray) -> float:
    """MAE over the union of the lowest and highest label deciles."""
    labels = np.asarray(labels, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    q10, q90 = np.quantile(labels, [0.1, 0.9])
    mask = (labels <= q10) | (labels >= q90)
    return float(np.mean(np.abs(predictions[mask] - labels[mask])))


@dataclass
class LossComparison:
    seed: int
    overall_mae: dict[str, float]
    tail_mae: dict[str, float]

    @property
    def tail_improvement(self) -> float:
        """Fractional tail MAE reduction of dist over mae (positive = better)."""
        return 1.0 - self.tail_mae["dist"] / self.tail_mae["mae"]

    @property
    def overall_ratio(self) -> float:
        return self.overall_mae["dist"] / self.overall_mae["mae"]


def compare_losses(
    seed: int,
    n_subjects: int = 5000,
    net_config: NetConfig | None = None,
    train_config: TrainConfig | None = None,
    cohort_overrides: dict | None = None,
) -> LossComparison:
    """Train the same architecture under both losses on one imbalanced cohort.

    Both arms share the cohort, the split, the architecture, and the seed;
    only the loss differs. Metrics are computed on the held-out partition.
    """
    net_config = net_config or NetConfig()
    train_config = train_config or TrainConfig()
    spec = CohortSpec(
        n_subjects=n_subjects,
        seed=stage_seed(seed, "cohort"),
        **(cohort_overrides or {}),
    )
    records = sample_cohort(spec)
    train_recs, sel_recs, holdout_recs = split_dataset(
        records, seed=stage_seed(seed, "split")
    )
    train_x, train_y = records_to_arrays(train_recs)
    sel_x, sel_y = records_to_arrays(sel_recs)
    hold_x, hold_y = records_to_arrays(holdout_recs)

    overall: dict[str, float] = {}
    tail: dict[str, float] = {}
    for loss in ("dist", "mae"):
        state = train(
            train_x,
            train_y,
            sel_x,
            sel_y,
            net_config,
            replace(train_config, loss=loss),
            seed=stage_seed(seed, "train"),
        )
        from .net.train import predict

        preds = predict(state.best_params, hold_x)
        overall[loss] = float(np.mean(np.abs(preds - hold_y)))
        tail[loss] = tail_decile_mae(preds, hold_y)
    return LossComparison(seed=seed, overall_mae=overall, tail_mae=tail)
