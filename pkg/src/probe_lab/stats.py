"""Small exact-probability helpers used for declared failure rates and Monte Carlo checks."""

from __future__ import annotations

import math


def binom_tail(n: int, p: float, m: int) -> float:
    """P(Binomial(n, p) >= m)."""
    if m <= 0:
        return 1.0
    if m > n:
        return 0.0
    return math.fsum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(m, n + 1))


def median_failure(rows: int, p_row: float) -> float:
    """Bound on a median-of-rows failing when each row fails independently w.p. ``p_row``.

    The median of ``rows`` values leaves an interval only if at least
    ``ceil(rows/2)`` of them lie on the same side of it.
    """
    return binom_tail(rows, min(1.0, p_row), (rows + 1) // 2)


def majority_failure(alpha: int, f: float) -> float:
    """P(more than half of ``alpha`` independent copies fail), per-copy failure ``f``."""
    return binom_tail(alpha, f, alpha // 2 + 1)


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    phat = successes / trials
    denom = 1 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    # at phat = 0 or 1 the matching endpoint is exactly 0 or 1; avoid rounding drift
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return (lo, hi)


def binomial_sigma(p: float, trials: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / trials) if trials else 0.0


def lg_binomial(n: int, k: int) -> float:
    return math.log2(math.comb(n, k))


def binary_entropy(x: float) -> float:
    if x in (0.0, 1.0):
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)
