"""Label-density estimation and pseudo-label sequence construction.

The training labels (ages in years) are smoothed with a Gaussian kernel over
a fixed integer grid, giving one probability per grid label. For a batch of
size B those probabilities are quantized into integer frequencies that sum to
exactly B, and the grid labels replicated by their frequencies form the
non-decreasing pseudo-label sequence that stands in for the theoretical label
distribution in the distribution-aware loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericError

# Tolerance for snapping B*p_i to an integer before flooring. Without it,
# float rounding can turn an intended exact count (e.g. 6 * 1/6) into
# 0.999... and shift a unit of mass to the wrong label.
_FLOOR_SNAP = 1e-9


@dataclass(frozen=True)
class LabelGrid:
    """Unique sorted labels with their smoothed probabilities."""

    labels: np.ndarray  # ascending, unique (years)
    probs: np.ndarray  # same length, >= 0, sums to 1
    bandwidth: float  # Gaussian kernel sigma (years)
    label_range: tuple[float, float]  # inclusive [min, max] label domain

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", probs)
        if labels.ndim != 1 or labels.size == 0:
            raise InvalidInputError("label grid must be a non-empty 1-D array")
        if labels.size > 1 and not np.all(np.diff(labels) > 0):
            raise InvalidInputError("label grid must be strictly increasing")
        if probs.shape != labels.shape:
            raise InvalidInputError("probs must match labels in shape")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) >= 1e-9:
            raise InvalidInputError("probs must be non-negative and sum to 1")
        if not self.bandwidth > 0:
            raise InvalidInputError("bandwidth must be positive")

    @property
    def n_labels(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class FrequencyAllocation:
    """Integer per-label frequencies for one batch, summing to batch_size."""

    batch_size: int
    floors: np.ndarray  # floor(batch_size * p_i)
    residual: int  # batch_size - sum(floors)
    aux: np.ndarray  # 0/1 residual indicator per label
    adjusted: np.ndarray  # floors + aux

    def __post_init__(self):
        if self.adjusted.sum() != self.batch_size:
            raise InvalidInputError("adjusted frequencies must sum to batch size")


@dataclass(frozen=True)
class PseudoLabelSequence:
    """Non-decreasing length-B sequence of grid labels."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.size > 1 and np.any(np.diff(values) < 0):
            raise InvalidInputError("pseudo-label sequence must be non-decreasing")

    def __len__(self) -> int:
        return int(self.values.size)


def integer_grid(low: int, high: int) -> np.ndarray:
    """Inclusive integer label grid [low, high]."""
    if high < low:
        raise InvalidInputError("grid upper bound below lower bound")
    return np.arange(low, high + 1, dtype=float)


def snap_to_grid(labels: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Round each label to the nearest grid value (ties go up)."""
    grid = np.asarray(grid, dtype=float)
    labels = np.asarray(labels, dtype=float)
    idx = np.searchsorted(grid, labels)
    idx = np.clip(idx, 1, grid.size - 1) if grid.size > 1 else np.zeros_like(idx)
    left = grid[idx - 1] if grid.size > 1 else grid[idx]
    right = grid[idx]
    choose_right = (labels - left) >= (right - labels)
    snapped = np.where(choose_right, right, left)
    if grid.size == 1:
        snapped = np.full_like(labels, grid[0])
    return snapped


def estimate_label_density(
    labels: np.ndarray, bandwidth: float, grid: np.ndarray
) -> LabelGrid:
    """Gaussian-kernel label density on ``grid``, normalized to a pmf.

    probs_i is proportional to sum_j exp(-(grid_i - label_j)^2 / (2 bw^2)).
    Labels are snapped to the nearest grid value first (ages are integer
    years; the grid is the integer label domain).
    """
    labels = np.asarray(labels, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float).ravel()
    if labels.size == 0:
        raise InvalidInputError("need at least one label")
    if not np.all(np.isfinite(labels)):
        raise InvalidInputError("labels must be finite")
    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    if grid.size == 0:
        raise InvalidInputError("grid must be non-empty")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise InvalidInputError("grid must be strictly increasing")

    snapped = snap_to_grid(labels, grid)
    diff = grid[:, None] - snapped[None, :]
    weights = np.exp(-(diff * diff) / (2.0 * bandwidth * bandwidth))
    raw = weights.sum(axis=1)
    probs = raw / raw.sum()
    return LabelGrid(
        labels=grid,
        probs=probs,
        bandwidth=float(bandwidth),
        label_range=(float(grid[0]), float(grid[-1])),
    )


def allocate_frequencies(grid: LabelGrid, batch_size: int) -> FrequencyAllocation:
    """Quantize B * probs into integer frequencies summing to B.

    Expected counts n_i = B * p_i are floored; the residual
    r = B - sum(floor(n_i)) is distributed one unit each to the first
    floor((r+1)/2) and the last floor(r/2) label positions, so both tails of
    the label domain keep their mass.
    """
    if batch_size < 1:
        raise InvalidInputError("batch size must be >= 1")
    n_labels = grid.n_labels
    expected = batch_size * grid.probs
    nearest = np.rint(expected)
    snapped = np.where(np.abs(expected - nearest) < _FLOOR_SNAP, nearest, expected)
    floors = np.floor(snapped).astype(np.int64)
    residual = int(batch_size - floors.sum())
    if residual < 0 or residual > n_labels:
        raise NumericError(
            f"frequency residual {residual} outside [0, {n_labels}]; "
            "probabilities are inconsistent with their normalization"
        )
    head = (residual + 1) // 2
    tail = residual // 2
    aux = np.zeros(n_labels, dtype=np.int64)
    aux[:head] = 1
    if tail:
        aux[n_labels - tail :] = 1
    adjusted = floors + aux
    return FrequencyAllocation(
        batch_size=int(batch_size),
        floors=floors,
        residual=residual,
        aux=aux,
        adjusted=adjusted,
    )


def build_pseudo_labels(
    grid: LabelGrid, alloc: FrequencyAllocation
) -> PseudoLabelSequence:
    """Replicate each grid label by its adjusted frequency, ascending."""
    if alloc.adjusted.size != grid.n_labels:
        raise InvalidInputError("allocation length does not match grid")
    values = np.repeat(grid.labels, alloc.adjusted)
    return PseudoLabelSequence(values=values)


def pseudo_labels_for_batch(grid: LabelGrid, batch_size: int) -> np.ndarray:
    """Pseudo-label sequence values for one batch of ``batch_size``."""
    alloc = allocate_frequencies(grid, batch_size)
    return build_pseudo_labels(grid, alloc).values
