"""L2-regularized differentiable sorting.

The forward map sorts a vector ascending and then solves an isotonic
regression whose block structure makes the map differentiable almost
everywhere: with regularization strength ``epsilon``, adjacent sorted values
closer than their position gap divided by ``epsilon`` stay exact, while
larger gaps are pooled toward their block mean. As ``epsilon`` goes to zero
the output converges to the hard ascending sort; the sum of the output always
equals the sum of the input.

The backward pass is exact: within each pooled block the Jacobian is the
block-averaging matrix, composed with the argsort permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class SoftSortResult:
    """Forward result plus the structure needed for the exact backward pass."""

    sorted_values: np.ndarray = field(repr=False)  # non-decreasing, length n
    argsort_perm: np.ndarray = field(repr=False)  # ascending stable argsort of input
    block_sizes: np.ndarray = field(repr=False)  # contiguous run lengths, sum n
    epsilon: float

    @property
    def blocks(self) -> list[tuple[int, int]]:
        """Half-open (start, end) index ranges of the averaged runs."""
        ends = np.cumsum(self.block_sizes)
        starts = ends - self.block_sizes
        return [(int(s), int(e)) for s, e in zip(starts, ends)]


def isotonic_regression_l2(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool-adjacent-violators solution of min ||u - v||^2, u non-decreasing.

    Returns the solution and the block sizes of the pooled runs; within each
    run the solution equals the run mean of ``v``.
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise InvalidInputError("isotonic regression needs at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("isotonic regression requires finite values")

    # Stack of blocks as (sum, count); merge while monotonicity is violated.
    sums: list[float] = []
    counts: list[int] = []
    for x in v:
        cur_sum, cur_count = float(x), 1
        while counts and sums[-1] * cur_count > cur_sum * counts[-1]:
            prev_sum, prev_count = sums.pop(), counts.pop()
            cur_sum += prev_sum
            cur_count += prev_count
        sums.append(cur_sum)
        counts.append(cur_count)

    sizes = np.asarray(counts, dtype=np.int64)
    means = np.asarray(sums, dtype=float) / sizes
    solution = np.repeat(means, sizes)
    return solution, sizes


def soft_sort(v: np.ndarray, epsilon: float) -> SoftSortResult:
    """Differentiable ascending sort of ``v`` with strength ``epsilon``."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise InvalidInputError("soft sort needs at least one value")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("soft sort requires finite values")
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")

    perm = np.argsort(v, kind="stable")
    s = v[perm]
    positions = np.arange(1, v.size + 1, dtype=float)
    _, sizes = isotonic_regression_l2(positions / epsilon - s)

    # Reconstruct the solution blockwise: inside a pooled run the values ramp
    # with slope 1/epsilon around the run mean of the sorted inputs. This is
    # algebraically identical to positions/eps - PAV(positions/eps - s) but
    # exact for singleton runs (no cancellation against large 1/epsilon).
    block_ids = np.repeat(np.arange(sizes.size), sizes)
    s_means = np.bincount(block_ids, weights=s) / sizes
    pos_means = np.bincount(block_ids, weights=positions) / sizes
    sorted_values = (positions - pos_means[block_ids]) / epsilon + s_means[block_ids]
    return SoftSortResult(
        sorted_values=sorted_values,
        argsort_perm=perm,
        block_sizes=sizes,
        epsilon=float(epsilon),
    )


def soft_sort_vjp(
    v: np.ndarray, upstream: np.ndarray, result: SoftSortResult
) -> np.ndarray:
    """Vector-Jacobian product of ``soft_sort`` at ``v``.

    ``upstream`` holds d(loss)/d(sorted_values); the return value is
    d(loss)/d(v). Each pooled block averages its upstream slice, and the
    averaged values are scattered back through the argsort permutation.
    """
    v = np.asarray(v, dtype=float).ravel()
    upstream = np.asarray(upstream, dtype=float).ravel()
    if upstream.shape != v.shape or result.argsort_perm.size != v.size:
        raise InvalidInputError("upstream/result shapes do not match input")

    block_ids = np.repeat(np.arange(result.block_sizes.size), result.block_sizes)
    block_means = np.bincount(block_ids, weights=upstream) / result.block_sizes
    averaged = block_means[block_ids]
    grad = np.empty_like(v)
    grad[result.argsort_perm] = averaged
    return grad
