import pytest
from hypothesis import given
from hypothesis import strategies as st

from detpipe._stats import nearest_rank, nearest_rank_index, nearest_rank_many


def sort_and_index(values, q):
    """Oracle: textbook nearest rank, rank = smallest r with r/n >= q."""
    ordered = sorted(values)
    n = len(ordered)
    for r in range(1, n + 1):
        if r / n >= q - 1e-12:
            return ordered[r - 1]
    return ordered[-1]


class TestNearestRank:
    def test_worked_values(self):
        assert nearest_rank([0.2, 0.9, 0.4], 0.5) == 0.4
        assert nearest_rank([0.2, 0.9, 0.4], 0.95) == 0.9
        assert nearest_rank([5.0], 0.0) == 5.0

    def test_float_noise_does_not_bump_rank(self):
        # 0.95 * 20 evaluates to 19.000000000000004 in floating point
        assert nearest_rank_index(0.95, 20) == 18

    def test_q_zero_is_minimum(self):
        assert nearest_rank([3, 1, 2], 0.0) == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            nearest_rank([], 0.5)
        with pytest.raises(ValueError):
            nearest_rank([1.0], 1.5)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(0, 1))
    def test_matches_sort_oracle(self, values, q):
        assert nearest_rank(values, q) == sort_and_index(values, q)

    @given(st.lists(st.integers(-100, 100), min_size=1, max_size=40))
    def test_monotone_in_q(self, values):
        qs = [0.1, 0.25, 0.5, 0.75, 0.9, 0.99]
        out = nearest_rank_many(values, qs)
        assert out == sorted(out)
        assert out == [nearest_rank(values, q) for q in qs]
