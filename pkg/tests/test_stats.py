from __future__ import annotations

import itertools
import math

import pytest
from hypothesis import given, strategies as st

from probe_lab.stats import binary_entropy, binom_tail, majority_failure, median_failure, wilson_interval


def _brute_tail(n, p, m):
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n):
        k = sum(bits)
        if k >= m:
            total += p**k * (1 - p) ** (n - k)
    return total


@given(st.integers(1, 10), st.floats(0, 1), st.integers(-1, 12))
def test_binom_tail_matches_enumeration(n, p, m):
    assert binom_tail(n, p, m) == pytest.approx(_brute_tail(n, p, m), abs=1e-12)


def test_majority_of_three():
    assert majority_failure(3, 0.3) == pytest.approx(3 * 0.3**2 * 0.7 + 0.3**3)
    assert majority_failure(3, 0.3) == pytest.approx(0.216)
    assert majority_failure(1, 0.3) == pytest.approx(0.3)


def test_median_failure_uses_half_the_rows():
    assert median_failure(3, 0.1) == pytest.approx(binom_tail(3, 0.1, 2))
    assert median_failure(4, 0.1) == pytest.approx(binom_tail(4, 0.1, 2))


def test_wilson_interval_contains_estimate():
    lo, hi = wilson_interval(90, 100)
    assert lo < 0.9 < hi
    assert wilson_interval(100, 100)[1] == 1.0
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_binary_entropy_of_one_third():
    assert binary_entropy(1 / 3) == pytest.approx(0.9183, abs=1e-4)
    assert binary_entropy(0.0) == 0.0 and binary_entropy(0.5) == 1.0
    assert math.isclose(binary_entropy(0.2), binary_entropy(0.8))
