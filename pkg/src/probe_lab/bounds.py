"""Update-time lower-bound shape functions, majority amplification, entropy margins.

All asymptotic constants collapse into one explicit ``c`` (default 1), so the
numbers produced here are shape functions for trend comparison, not
impossibility certificates.  Logarithms are base 2 except where ``e`` appears
as a literal constant.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .cellprobe import ConfigError, MemoryImage, Sketch
from .hashing import SketchSeed
from .stats import majority_failure


@dataclass(frozen=True)
class BoundParams:
    n: int
    S: int
    w: int = 64
    delta: float = 0.01
    k: int = 1
    c: float = 1.0
    # delta is accepted down to n^-delta_floor_exponent
    delta_floor_exponent: float = 10.0

    def __post_init__(self) -> None:
        if self.n < 2 or self.S < 1 or self.k < 1:
            raise ConfigError(f"need n >= 2, S >= 1, k >= 1: {self}")
        floor = self.n ** -self.delta_floor_exponent
        if not floor <= self.delta <= 0.5:
            raise ConfigError(f"delta={self.delta} outside [n^-{self.delta_floor_exponent}, 1/2]")


def randomized_bound(params: BoundParams) -> int:
    """Largest t <= S with t <= c * min(sqrt(lg(1/d)/lg(eS/t)), lg(1/d)/sqrt(lg k * lg(eS/t))).

    Searched exhaustively over t in [1, S]; 0 when no t qualifies.
    """
    t = np.arange(1, params.S + 1, dtype=np.float64)
    lg_inv_delta = math.log2(1 / params.delta)
    lg_space = np.log2(math.e * params.S / t)
    first = np.sqrt(lg_inv_delta / lg_space)
    lg_k = math.log2(params.k)
    second = lg_inv_delta / np.sqrt(lg_k * lg_space) if lg_k > 0 else np.full_like(t, np.inf)
    ok = np.flatnonzero(t <= params.c * np.minimum(first, second))
    return int(t[ok[-1]]) if len(ok) else 0


def deterministic_bound(n: int, S: int, c: float = 1.0) -> int:
    """Least t in [1, S] with t * lg(eS/t) >= c * lg n; ``S + 1`` if none exists."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    target = c * math.log2(n)
    t = np.arange(1, S + 1, dtype=np.float64)
    ok = np.flatnonzero(t * np.log2(math.e * S / t) >= target)
    return int(t[ok[0]]) if len(ok) else S + 1


@dataclass
class TrendResult:
    regime: str
    points: list[tuple[int, int, int, float]]  # (n, S, t, scale)
    kappa: float
    max_rel_dev: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_dev <= self.tolerance


def trend_check(regime: str, exponents=range(10, 31), c: float = 1.0, tolerance: float = 0.2) -> TrendResult:
    """Fit deterministic_bound = kappa * scale(n) through the origin and report the worst deviation.

    ``regime="log"``: S = ceil(lg n), scale = lg n.
    ``regime="loglog"``: S = ceil((lg n / lg lg n)^2), scale = lg n / lg lg n.
    """
    points = []
    for e in exponents:
        n = 1 << e
        lg_n = float(e)
        if regime == "log":
            scale, S = lg_n, math.ceil(lg_n)
        elif regime == "loglog":
            scale = lg_n / math.log2(lg_n)
            S = math.ceil(scale**2)
        else:
            raise ValueError(f"unknown regime {regime!r}")
        points.append((n, S, deterministic_bound(n, S, c), scale))
    if not points:
        return TrendResult(regime, [], 0.0, 0.0, tolerance)
    kappa = sum(t * x for _, _, t, x in points) / sum(x * x for *_, x in points)
    dev = max(abs(t - kappa * x) / (kappa * x) for _, _, t, x in points)
    return TrendResult(regime, points, kappa, dev, tolerance)


# -- amplification ------------------------------------------------------------------


class AmplifiedSketch(Sketch):
    """``alpha`` independent copies side by side; median for numbers, majority for indices."""

    def __init__(self, build, alpha: int, seed: SketchSeed, n: int, w: int = 64,
                 memory: MemoryImage | None = None) -> None:
        if alpha < 1 or alpha % 2 == 0:
            raise ConfigError(f"alpha must be odd and >= 1, got {alpha}")
        super().__init__(n, seed, memory, w)
        self.alpha = alpha
        self.copies = [build(seed.child("copy", c), self.memory) for c in range(alpha)]
        self.M = self.copies[0].M
        self.name = f"{self.copies[0].name}x{alpha}"
        self.supports = self.copies[0].supports
        self._seal()

    @property
    def t_u(self) -> int:
        return sum(c.t_u for c in self.copies)

    @property
    def delta(self) -> float:
        return min(0.5, majority_failure(self.alpha, self.copies[0].delta))

    def _update(self, i: int, delta: int) -> None:
        for c in self.copies:
            c._update(i, delta)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return np.concatenate([c._footprint_cells(i) for c in self.copies])

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        return np.hstack([c.footprint_table(indices) for c in self.copies])

    def load_words(self, words) -> None:
        super().load_words(words)
        for c in self.copies:
            if hasattr(c, "vector"):
                c.load_words(self.memory.words)

    def point_query(self, t: int) -> float:
        return float(np.median([c.point_query(t) for c in self.copies]))

    def point_query_many(self, ts: np.ndarray) -> np.ndarray:
        return np.median(np.stack([c.point_query_many(ts) for c in self.copies]).astype(np.float64), axis=0)

    def norm(self, p: int) -> float:
        return float(np.median([c.norm(p) for c in self.copies]))

    def entropy(self) -> float | None:
        answers = [c.entropy() for c in self.copies]
        if all(a is None for a in answers):
            return None
        return float(np.median([0.0 if a is None else a for a in answers]))

    def heavy_hitter(self) -> int | None:
        votes = Counter(c.heavy_hitter() for c in self.copies)
        top = max(votes.values())
        winners = [i for i, v in votes.items() if v == top]
        ints = sorted(i for i in winners if i is not None)
        return ints[0] if ints else None


def amplify(factory, alpha: int, seed: SketchSeed) -> AmplifiedSketch:
    """Run ``alpha`` independent copies of ``factory``'s sketch and combine their answers."""
    probe = factory(seed.child("probe"))
    return AmplifiedSketch(factory, alpha, seed, n=probe.n, w=probe.w)


# -- entropy decoding margins -------------------------------------------------------------


def _entropy_mp(values) -> mpmath.mpf:
    mags = [mpmath.mpf(abs(v)) for v in values if v]
    if not mags:
        return mpmath.mpf(0)
    total = mpmath.fsum(mags)
    return mpmath.fsum(m / total * mpmath.log(total / m, 2) for m in mags)


@dataclass
class EntropyMargins:
    C: int
    a: int
    low_limit: float = 1 / 6
    high_limit: float = 2 / 3
    worst_low: float = 0.0  # largest residual entropy when t = i_j
    worst_high: float = math.inf  # smallest entropy when t != i_j
    offending: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.offending


def entropy_margins(C: int, a: int, dps: int = 50) -> EntropyMargins:
    """Entropies of every residual vector the entropy check can see, for levels j <= a.

    Case ``t = i_j``: the residual holds C^1..C^(j-1).  Cases ``t != i_j``:
    C^1..C^j plus either a fresh entry -C^j or C^(j') - C^j at an earlier item.
    Weights are |v_i|.
    """
    if C < 2 or a < 1:
        raise ConfigError(f"need C >= 2 and a >= 1, got C={C}, a={a}")
    out = EntropyMargins(C, a)
    with mpmath.workdps(dps):
        for j in range(1, a + 1):
            powers = [C**i for i in range(1, j + 1)]
            low = float(_entropy_mp(powers[:-1]))
            out.worst_low = max(out.worst_low, low)
            if low >= out.low_limit:
                out.offending.append((j, "t=i_j", low))
            cases = [("t unused", powers + [-C**j])]
            for jp in range(1, j):
                vec = list(powers)
                vec[jp - 1] -= C**j
                cases.append((f"t=i_{jp}", vec))
            for label, vec in cases:
                h = float(_entropy_mp(vec))
                out.worst_high = min(out.worst_high, h)
                if h <= out.high_limit:
                    out.offending.append((j, label, h))
    return out


def entropy_threshold_validate(C: int, a: int) -> EntropyMargins:
    """Reject (C, a) unless every entropy check has a factor-2 margin around 1/3."""
    margins = entropy_margins(C, a)
    if not margins.ok:
        j, case, h = margins.offending[0]
        raise ConfigError(f"entropy margins fail for C={C}, a={a}: level j={j}, case {case}, entropy {h:.4f}")
    return margins


# -- measured-versus-bound report --------------------------------------------------------------


@dataclass(frozen=True)
class BoundRow:
    sketch: str
    n: int
    S_measured: int
    t_u_measured: int
    det_bound: int
    rand_bound: int
    preconditions_met: bool
    delta: float


def bound_rows(descriptor, deltas=(), k: int | None = None, c: float = 1.0) -> list[BoundRow]:
    """Both bound shapes next to one measured sketch, one row per failure probability.

    Without explicit ``deltas`` the sketch's declared failure probability is
    used.  ``preconditions_met`` records whether ``delta`` lies in the accepted
    range and the measured update time satisfies ``t_u <= (1/2) lg n / lg(eS/t_u)``,
    the regime in which the compression argument applies.
    """
    n, S, t_u = descriptor.n, descriptor.S, descriptor.t_u
    det = deterministic_bound(n, S, c)
    rows = []
    for delta in (list(deltas) or [descriptor.delta]):
        try:
            params = BoundParams(n, S, descriptor.w, float(delta), k or n, c)
        except ConfigError:
            rows.append(BoundRow(descriptor.name, n, S, t_u, det, 0, False, float(delta)))
            continue
        in_regime = t_u <= 0.5 * math.log2(n) / math.log2(math.e * S / t_u)
        rows.append(BoundRow(descriptor.name, n, S, t_u, det, randomized_bound(params), in_regime, float(delta)))
    return rows
