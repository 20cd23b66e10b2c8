import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppgage.dist_loss import gradient_rel_error
from ppgage.errors import InvalidInputError
from ppgage.soft_sort import isotonic_regression_l2, soft_sort, soft_sort_vjp


def grid_search_isotonic(v, lo=-1.0, hi=2.0, step=1e-3):
    """Dense-grid minimizer of ||u - v||^2 over non-decreasing u.

    Dynamic program over the value grid: at each position keep, for every
    grid value, the best cost with u_i equal to that value; a prefix-min
    makes the monotone constraint free to enforce.
    """
    grid = np.arange(lo, hi + step / 2, step)
    cost = (grid - v[0]) ** 2
    choices = []
    for x in v[1:]:
        prefix_best = np.minimum.accumulate(cost)
        choice = np.zeros_like(cost, dtype=int)
        running = 0
        for j in range(len(grid)):
            if cost[j] < cost[running]:
                running = j
            choice[j] = running
        choices.append(choice)
        cost = prefix_best + (grid - x) ** 2
    best_end = int(np.argmin(cost))
    idx = [best_end]
    for choice in reversed(choices):
        idx.append(choice[idx[-1]])
    return grid[np.array(idx[::-1])]


class TestIsotonicRegression:
    def test_already_monotone_is_fixed_point(self):
        solution, sizes = isotonic_regression_l2([1.0, 2.0, 3.0])
        assert solution.tolist() == [1.0, 2.0, 3.0]
        assert sizes.tolist() == [1, 1, 1]

    def test_two_point_average(self):
        solution, sizes = isotonic_regression_l2([3.0, 1.0])
        assert solution.tolist() == [2.0, 2.0]
        assert sizes.tolist() == [2]

    def test_matches_grid_search_oracle_on_small_instances(self):
        values = [-1.0, 0.0, 1.0, 2.0]
        for n in (1, 2, 3, 4):
            for combo in itertools.product(values, repeat=n):
                v = np.asarray(combo)
                solution, _ = isotonic_regression_l2(v)
                oracle = grid_search_isotonic(v)
                assert np.max(np.abs(solution - oracle)) < 2e-3

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(InvalidInputError):
            isotonic_regression_l2([])
        with pytest.raises(InvalidInputError):
            isotonic_regression_l2([1.0, np.inf])


class TestSoftSortForward:
    def test_sorted_input_is_exact_fixed_point(self):
        v = np.array([0.5, 1.25, 7.0, 7.5])
        result = soft_sort(v, 1e-6)
        assert np.array_equal(result.sorted_values, v)

    def test_hard_sort_limit(self):
        result = soft_sort(np.array([5.0, 1.0, 3.0]), 1e-6)
        assert np.max(np.abs(result.sorted_values - [1.0, 3.0, 5.0])) < 1e-4

    def test_large_epsilon_pools_blocks(self):
        result = soft_sort(np.array([3.0, 1.0]), 1.0)
        assert result.sorted_values.tolist() == [1.5, 2.5]
        assert result.blocks == [(0, 2)]

    def test_sum_preserved_and_monotone(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=16)
        result = soft_sort(v, 1.0)
        assert abs(result.sorted_values.sum() - v.sum()) < 1e-10
        assert np.all(np.diff(result.sorted_values) >= 0)

    def test_rejects_bad_epsilon(self):
        with pytest.raises(InvalidInputError):
            soft_sort(np.array([1.0]), 0.0)
        with pytest.raises(InvalidInputError):
            soft_sort(np.array([]), 1.0)

    @settings(max_examples=300, deadline=None)
    @given(
        arrays(
            np.float64,
            st.integers(min_value=1, max_value=64),
            elements=st.floats(min_value=-100, max_value=100, allow_nan=False),
        ),
        st.floats(min_value=1e-4, max_value=10.0),
    )
    def test_monotone_and_sum_preserving_for_all_inputs(self, v, epsilon):
        result = soft_sort(v, epsilon)
        assert np.all(np.diff(result.sorted_values) >= -1e-9)
        scale = max(1.0, np.abs(v).sum())
        assert abs(result.sorted_values.sum() - v.sum()) < 1e-9 * len(v) * scale

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(
            np.float64,
            st.integers(min_value=2, max_value=32),
            elements=st.floats(min_value=-50, max_value=50, allow_nan=False),
        ),
        st.randoms(),
    )
    def test_permutation_equivariance(self, v, rand):
        shuffled = v.copy()
        rand.shuffle(shuffled)
        a = soft_sort(v, 0.7).sorted_values
        b = soft_sort(shuffled, 0.7).sorted_values
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_sum_preservation_large_input(self):
        rng = np.random.default_rng(11)
        v = rng.normal(scale=10.0, size=10_000)
        result = soft_sort(v, 1.0)
        assert abs(result.sorted_values.sum() - v.sum()) < 1e-9 * v.size

    def test_hard_limit_on_gap_separated_vectors(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = rng.integers(2, 40)
            v = np.cumsum(rng.uniform(1e-2, 2.0, size=n))
            rng.shuffle(v)
            result = soft_sort(v, 1e-6)
            assert np.max(np.abs(result.sorted_values - np.sort(v))) < 1e-4


def finite_difference_vjp(v, upstream, epsilon, h=1e-5):
    grad = np.empty_like(v)
    for i in range(v.size):
        bumped = v.copy()
        bumped[i] += h
        hi = soft_sort(bumped, epsilon).sorted_values @ upstream
        bumped[i] -= 2 * h
        lo = soft_sort(bumped, epsilon).sorted_values @ upstream
        grad[i] = (hi - lo) / (2 * h)
    return grad


class TestSoftSortVjp:
    def test_identity_permutation_singleton_blocks(self):
        v = np.array([1.0, 2.0, 3.0])
        upstream = np.array([0.1, 0.2, 0.3])
        result = soft_sort(v, 1e-6)
        np.testing.assert_array_equal(
            soft_sort_vjp(v, upstream, result), upstream
        )

    def test_two_block_averages_upstream(self):
        v = np.array([3.0, 1.0])
        result = soft_sort(v, 1.0)
        grad = soft_sort_vjp(v, np.array([10.0, 20.0]), result)
        assert grad.tolist() == [15.0, 15.0]

    def test_matches_finite_differences_on_separated_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            gaps = rng.uniform(0.1, 3.0, size=8)
            gaps = gaps[np.abs(gaps - 2.0) > 0.02]  # keep off pool boundaries
            v = np.cumsum(gaps)
            rng.shuffle(v)
            upstream = rng.normal(size=v.size)
            result = soft_sort(v, 0.5)
            analytic = soft_sort_vjp(v, upstream, result)
            numeric = finite_difference_vjp(v, upstream, 0.5)
            assert gradient_rel_error(analytic, numeric) < 1e-5

    def test_rejects_shape_mismatch(self):
        v = np.array([1.0, 2.0])
        result = soft_sort(v, 1.0)
        with pytest.raises(InvalidInputError):
            soft_sort_vjp(v, np.array([1.0]), result)
