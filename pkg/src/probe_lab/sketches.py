"""Non-adaptive turnstile sketches and exact query evaluators.

Every sketch here decides which cells an update touches from the updated index
and its seed alone.  Queries may read whatever they like; their reads are
logged but not budgeted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping

import numpy as np

from .cellprobe import ConfigError, CounterBank, MemoryImage, Sketch, limbs_for
from .hashing import PolyHash, SketchSeed, uniform53
from .stats import binom_tail, median_failure

# Rows for a target failure probability: d = ceil(ROW_CONSTANT * lg(1/delta)),
# rounded up to odd.  Calibrated so that a row failing with probability 1/b
# (b = 6) keeps the median's failure below delta for delta in [2^-40, 1/2].
ROW_CONSTANT = 2.25
DEFAULT_BUCKETS = 6

STABLE_FRAC_BITS = 10
# Median of |X| for X standard Cauchy.
CAUCHY_ABS_MEDIAN = 1.0
_P_CAUCHY_LOW = 2 / math.pi * math.atan(0.5)
_P_CAUCHY_HIGH = 1 - 2 / math.pi * math.atan(1.5)


def rows_for_delta(delta: float) -> int:
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    d = max(1, math.ceil(ROW_CONSTANT * math.log2(1 / delta)))
    return d if d % 2 else d + 1


def _odd_rows_for(delta: float, row_failure) -> int:
    d = 1
    while row_failure(d) > delta:
        d += 2
        if d > 100_001:
            raise ConfigError(f"no row count reaches delta={delta}")
    return d


# -- exact evaluators -------------------------------------------------------------


def _items(v) -> Iterable[tuple[int, int]]:
    if type(v) is dict or isinstance(v, Mapping):
        return v.items()
    return enumerate(v)


def exact_l1(v) -> int:
    return sum(abs(int(x)) for _, x in _items(v))


def exact_norm(v, p: int) -> float:
    if p == 1:
        return float(exact_l1(v))
    if p == 2:
        return math.sqrt(sum(int(x) * int(x) for _, x in _items(v)))
    raise ValueError(f"unsupported p={p}")


def exact_entropy(v) -> float | None:
    """Shannon entropy (bits) of |v_i| / ||v||_1; ``None`` for the zero vector."""
    mags = [abs(int(x)) for _, x in _items(v) if x]
    if not mags:
        return None
    total = sum(mags)
    lg_total = math.log2(total)
    return max(0.0, math.fsum(m / total * (lg_total - math.log2(m)) for m in mags))


def exact_heavy_hitter(v) -> int | None:
    """Index of largest |v_i|, lowest index on ties; ``None`` for the zero vector."""
    best, best_mag = None, 0
    for i, x in sorted(_items(v)):
        if abs(int(x)) > best_mag:
            best, best_mag = i, abs(int(x))
    return best


def is_valid_heavy_hitter(v, i: int | None) -> bool:
    """Whether ``|v_i| >= ||v||_inf - ||v||_1 / 2``."""
    if i is None:
        return exact_l1(v) == 0
    vals = dict(_items(v))
    linf = max((abs(int(x)) for x in vals.values()), default=0)
    return 2 * abs(int(vals.get(i, 0))) >= 2 * linf - exact_l1(vals)


# -- sketches -----------------------------------------------------------------------


class ExactBaseline(Sketch):
    """One counter per index.  Ground truth for every game.

    A decoded copy of the nonzero entries is kept beside the memory image so
    that whole-vector queries cost time proportional to the support; each such
    query is still charged a read of every cell.
    """

    name = "exact"
    supports = frozenset({"point_query", "heavy_hitter", "l1", "l2", "entropy"})

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None) -> None:
        super().__init__(n, seed, memory, w, M)
        self.bank = CounterBank(self.memory, n, limbs_for(max_abs or self.M, self.w))
        self._seal()
        self._region = None
        self.vector: dict[int, int] = {}

    @property
    def t_u(self) -> int:
        return self.bank.limbs

    @property
    def delta(self) -> float:
        return 0.0

    def _update(self, i: int, delta: int) -> None:
        self.bank.add_one(i, delta)
        value = self.vector.get(i, 0) + delta
        if value:
            self.vector[i] = value
        else:
            self.vector.pop(i, None)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return self.bank.cells(i)

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        return self.bank.cells(indices).reshape(len(indices), self.bank.limbs)

    def load_words(self, words) -> None:
        super().load_words(words)
        self.vector = {}
        region = self.memory.words[self.bank.offset:self.bank.offset + self.bank.size]
        if self.bank.limbs == 1:
            signed = self.bank._signed(region)
            for i in np.flatnonzero(signed).tolist():
                self.vector[i] = int(signed[i])
        else:
            occupied = np.flatnonzero(region.reshape(self.n, self.bank.limbs).any(axis=1))
            for i in occupied.tolist():
                value = self.bank.peek_exact(i)
                if value:
                    self.vector[i] = value

    def _read_all(self) -> None:
        if self._region is None:
            self._region = np.arange(self._start, self._end, dtype=np.int64)
        self.memory.touch_many(self._region)

    def point_query(self, t: int) -> int:
        self._check_index(t)
        self._begin_query()
        return self.bank.exact_value(t)

    def point_query_many(self, ts: np.ndarray) -> np.ndarray:
        self._begin_query()
        return self.bank.values(np.asarray(ts, dtype=np.int64))

    def heavy_hitter(self) -> int | None:
        self._begin_query()
        self._read_all()
        return exact_heavy_hitter(self.vector)

    def norm(self, p: int) -> float:
        if p not in (1, 2):
            raise ValueError(f"unsupported p={p}")
        self._begin_query()
        self._read_all()
        return exact_norm(self.vector, p)

    def entropy(self) -> float | None:
        self._begin_query()
        self._read_all()
        return exact_entropy(self.vector)


class CountMedianSketch(Sketch):
    """``d`` rows of ``b`` counters, pairwise-independent bucket per row, median estimate.

    Handles negative updates (general turnstile): the estimate for ``t`` is the
    median over rows of the counter ``t`` hashes to.
    """

    name = "count_median"
    supports = frozenset({"point_query"})
    _TABLE_LIMIT = 1 << 22

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None, d: int | None = None,
                 b: int | None = None, delta: float | None = None) -> None:
        super().__init__(n, seed, memory, w, M)
        self.b = DEFAULT_BUCKETS if b is None else int(b)
        self._target_delta = None
        if d is None:
            self._target_delta = 0.05 if delta is None else delta
            d = rows_for_delta(self._target_delta)
        if d < 1 or self.b < 1:
            raise ConfigError(f"need d >= 1 and b >= 1, got d={d}, b={self.b}")
        self.d = int(d)
        self.hashes = [PolyHash(2, seed.rng("row", r)) for r in range(self.d)]
        self.bank = CounterBank(self.memory, self.d * self.b, limbs_for(max_abs or self.M, self.w))
        self._seal()
        self._row_base = np.arange(self.d, dtype=np.int64) * self.b
        self._table: np.ndarray | None = None

    @property
    def t_u(self) -> int:
        return self.d * self.bank.limbs

    @property
    def delta(self) -> float:
        if self._target_delta is not None and self.b == DEFAULT_BUCKETS:
            return min(0.5, self._target_delta)
        return min(0.5, median_failure(self.d, 1 / self.b))

    def counters(self, i: int) -> np.ndarray:
        if self._table is not None:
            return self._table[:, i]
        return self._row_base + np.array([h(i) % self.b for h in self.hashes], dtype=np.int64)

    def counters_many(self, ts: np.ndarray) -> np.ndarray:
        """Counter ids, shape (d, len(ts))."""
        ts = np.asarray(ts, dtype=np.int64)
        if self.n <= self._TABLE_LIMIT:
            if self._table is None:
                self._table = self._compute(np.arange(self.n, dtype=np.int64))
            return self._table[:, ts]
        return self._compute(ts)

    def _compute(self, ts: np.ndarray) -> np.ndarray:
        rows = [(h.many(ts) % np.uint64(self.b)).astype(np.int64) for h in self.hashes]
        return np.stack(rows) + self._row_base[:, None]

    def _update(self, i: int, delta: int) -> None:
        self.bank.add(self.counters(i), delta)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return self.bank.cells(self.counters(i))

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        ctr = self.counters_many(indices).T
        return self.bank.cells(ctr.reshape(-1)).reshape(len(ctr), -1)

    def _estimates(self, ts: np.ndarray) -> np.ndarray:
        ctr = self.counters_many(ts)
        vals = self.bank.values(ctr)
        return np.median(vals, axis=0)

    def point_query(self, t: int) -> float:
        self._check_index(t)
        self._begin_query()
        return float(np.median(self.bank.values(self.counters(t))))

    def point_query_many(self, ts: np.ndarray) -> np.ndarray:
        self._begin_query()
        return self._estimates(ts)


class DyadicHeavyHitter(Sketch):
    """A Count-Median sketch per dyadic level; the query walks root to leaf.

    Level ``l`` summarises the ``n >> l`` blocks of ``2^l`` consecutive
    indices.  At each level the walk keeps the child with the larger absolute
    estimate (lower index on ties).
    """

    name = "dyadic_hh"
    supports = frozenset({"heavy_hitter", "point_query"})

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None, d: int | None = None,
                 b: int | None = None, delta: float | None = None) -> None:
        super().__init__(n, seed, memory, w, M)
        if n < 2 or n & (n - 1):
            raise ConfigError(f"dyadic sketch needs n a power of two >= 2, got {n}")
        self.num_levels = n.bit_length() - 1
        self.levels = [
            CountMedianSketch(n >> lvl, seed.child("level", lvl), self.memory, w, self.M, max_abs, d, b, delta)
            for lvl in range(self.num_levels)
        ]
        self.d, self.b = self.levels[0].d, self.levels[0].b
        self._seal()

    @property
    def t_u(self) -> int:
        return sum(level.t_u for level in self.levels)

    @property
    def delta(self) -> float:
        # Two children compared per level, union bound over levels.
        return min(0.5, 2 * self.num_levels * self.levels[0].delta)

    def _update(self, i: int, delta: int) -> None:
        for lvl, level in enumerate(self.levels):
            level._update(i >> lvl, delta)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return np.concatenate([level._footprint_cells(i >> lvl) for lvl, level in enumerate(self.levels)])

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        return np.hstack([level.footprint_table(indices >> lvl) for lvl, level in enumerate(self.levels)])

    def _walk(self) -> int | None:
        node, seen_mass = 0, False
        for lvl in range(self.num_levels - 1, -1, -1):
            children = np.array([2 * node, 2 * node + 1])
            est = np.abs(self.levels[lvl]._estimates(children))
            seen_mass = seen_mass or bool(est.any())
            node = int(children[1] if est[1] > est[0] else children[0])
        return node if seen_mass else None

    def heavy_hitter(self) -> int | None:
        self._begin_query()
        return self._walk()

    def point_query(self, t: int) -> float:
        return self.levels[0].point_query(t)

    def point_query_many(self, ts: np.ndarray) -> np.ndarray:
        return self.levels[0].point_query_many(ts)


class SignBucketL2(Sketch):
    """``d`` rows of ``b`` signed buckets; ||v||_2^2 is the median of per-row sums of squares.

    Buckets use a pairwise-independent hash and signs a 4-wise independent one.
    """

    name = "sign_bucket_l2"
    supports = frozenset({"l2"})

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None, d: int | None = None,
                 b: int | None = None, delta: float | None = None) -> None:
        super().__init__(n, seed, memory, w, M)
        self.b = 32 if b is None else int(b)
        if d is None:
            d = _odd_rows_for(0.05 if delta is None else delta, lambda rows: median_failure(rows, self._row_failure()))
        self.d = int(d)
        self.bucket_hashes = [PolyHash(2, seed.rng("bucket", r)) for r in range(self.d)]
        self.sign_hashes = [PolyHash(4, seed.rng("sign", r)) for r in range(self.d)]
        self.bank = CounterBank(self.memory, self.d * self.b, limbs_for(max_abs or self.M, self.w))
        self._seal()
        self._row_base = np.arange(self.d, dtype=np.int64) * self.b

    def _row_failure(self) -> float:
        # Chebyshev with Var <= 2||v||^4/b and relative window 3/4 on ||v||^2.
        return min(1.0, 32 / (9 * self.b))

    @property
    def t_u(self) -> int:
        return self.d * self.bank.limbs

    @property
    def delta(self) -> float:
        return min(0.5, median_failure(self.d, self._row_failure()))

    def _signs(self, i: int) -> list[int]:
        return [1 if h(i) & 1 else -1 for h in self.sign_hashes]

    def counters(self, i: int) -> np.ndarray:
        return self._row_base + np.array([h(i) % self.b for h in self.bucket_hashes], dtype=np.int64)

    def counters_many(self, ts: np.ndarray) -> np.ndarray:
        rows = [(h.many(ts) % np.uint64(self.b)).astype(np.int64) for h in self.bucket_hashes]
        return np.stack(rows) + self._row_base[:, None]

    def _update(self, i: int, delta: int) -> None:
        self.bank.add(self.counters(i), [s * delta for s in self._signs(i)])

    def _footprint_cells(self, i: int) -> np.ndarray:
        return self.bank.cells(self.counters(i))

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        ctr = self.counters_many(np.asarray(indices, dtype=np.int64)).T
        return self.bank.cells(ctr.reshape(-1)).reshape(len(ctr), -1)

    def norm(self, p: int) -> float:
        if p != 2:
            raise ValueError(f"{self.name} estimates l2 only, not l{p}")
        self._begin_query()
        vals = self.bank.all_values().astype(np.float64).reshape(self.d, self.b)
        return math.sqrt(float(np.median((vals * vals).sum(axis=1))))


class StableProjectionL1(Sketch):
    """``d`` accumulators of Cauchy-weighted sums; ||v||_1 is the median of |row|.

    The coefficient for ``(i, r)`` is regenerated from the seed on demand:
    53 hashed bits go through the Cauchy inverse CDF, are scaled by
    ``2^STABLE_FRAC_BITS``, rounded, and clamped to ``n^3`` in magnitude, so
    rows hold exact integers and the sketch is exactly linear.
    """

    name = "stable_l1"
    supports = frozenset({"l1"})

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None, d: int | None = None,
                 b: int | None = None, delta: float | None = None) -> None:
        super().__init__(n, seed, memory, w, M)
        if d is None:
            d = _odd_rows_for(0.05 if delta is None else delta, self._failure)
        self.d = int(d)
        self.coef_bound = n**3
        self.row_keys = np.array([seed.derive("row", r) for r in range(self.d)], dtype=np.uint64)
        limbs = limbs_for((max_abs or self.M) * self.coef_bound, self.w)
        self.bank = CounterBank(self.memory, self.d, limbs)
        self._seal()
        self._rows = np.arange(self.d, dtype=np.int64)

    @staticmethod
    def _failure(rows: int) -> float:
        m = (rows + 1) // 2
        return binom_tail(rows, _P_CAUCHY_LOW, m) + binom_tail(rows, _P_CAUCHY_HIGH, m)

    @property
    def t_u(self) -> int:
        return self.d * self.bank.limbs

    @property
    def delta(self) -> float:
        return min(0.5, self._failure(self.d))

    def coefficients(self, indices) -> np.ndarray:
        """Quantised coefficients, shape (d, len(indices)), as int64."""
        u = uniform53(self.row_keys[:, None], np.atleast_1d(np.asarray(indices, dtype=np.uint64))[None, :])
        c = np.tan(np.pi * (u - 0.5)) * (1 << STABLE_FRAC_BITS)
        return np.clip(np.rint(c), -self.coef_bound, self.coef_bound).astype(np.int64)

    def _update(self, i: int, delta: int) -> None:
        q = self.coefficients([i])[:, 0].tolist()
        self.bank.add(self._rows, [c * delta for c in q])

    def _footprint_cells(self, i: int) -> np.ndarray:
        return self.bank.cells(self._rows)

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        return np.tile(self.bank.cells(self._rows), (len(indices), 1))

    def _l1(self) -> float:
        vals = np.abs(self.bank.all_values().astype(np.float64))
        return float(np.median(vals)) / (1 << STABLE_FRAC_BITS) / CAUCHY_ABS_MEDIAN

    def norm(self, p: int) -> float:
        if p != 1:
            raise ValueError(f"{self.name} estimates l1 only, not l{p}")
        self._begin_query()
        return self._l1()


class PluginEntropyEstimator(Sketch):
    """Entropy of |v_i|/||v||_1 from recovered heavy entries.

    Built for the geometric instances of the decoding game (support at most
    ``a + 1``), not as a worst-case entropy sketch.  The stable sketch
    estimates the mass; every leaf of the dyadic sketch whose estimate reaches
    ``tau`` times that mass is kept, and the plug-in entropy of the kept
    estimates is returned.
    """

    name = "plugin_entropy"
    supports = frozenset({"entropy"})

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None, w: int = 64,
                 M: int | None = None, max_abs: int | None = None, d: int | None = None,
                 b: int | None = None, delta: float | None = None, d_l1: int | None = None,
                 tau: float = 0.125) -> None:
        super().__init__(n, seed, memory, w, M)
        self.support = DyadicHeavyHitter(n, seed.child("support"), self.memory, w, self.M, max_abs,
                                         d, 32 if b is None else b, delta)
        self.mass = StableProjectionL1(n, seed.child("mass"), self.memory, w, self.M, max_abs, d_l1,
                                       delta=delta)
        self.tau = tau
        self._seal()

    @property
    def t_u(self) -> int:
        return self.support.t_u + self.mass.t_u

    @property
    def delta(self) -> float:
        # Nominal: the components' declared rates; accuracy is validated empirically.
        return min(0.5, self.support.delta + self.mass.delta)

    def _update(self, i: int, delta: int) -> None:
        self.support._update(i, delta)
        self.mass._update(i, delta)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return np.concatenate([self.support._footprint_cells(i), self.mass._footprint_cells(i)])

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        return np.hstack([self.support.footprint_table(indices), self.mass.footprint_table(indices)])

    def entropy(self) -> float | None:
        self._begin_query()
        mass = self.mass._l1()
        if mass <= 0:
            return None
        est = np.abs(self.support.levels[0]._estimates(np.arange(self.n)))
        kept = est[est >= self.tau * mass]
        if not len(kept):
            return math.log2(1 / self.tau)
        p = kept / kept.sum()
        return float(max(0.0, -(p * np.log2(p)).sum()))


SKETCHES: dict[str, type[Sketch]] = {
    cls.name: cls
    for cls in (ExactBaseline, CountMedianSketch, DyadicHeavyHitter, SignBucketL2, StableProjectionL1,
                PluginEntropyEstimator)
}


@dataclass
class SketchConfig:
    """The ``{name, n, d, b, w, delta, seed}`` block of an experiment config."""

    name: str
    n: int
    d: int | None = None
    b: int | None = None
    w: int = 64
    delta: float | None = None
    seed: int | None = None
    M: int | None = None
    max_abs: int | None = None
    alpha: int = 1
    d_l1: int | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> SketchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sketch config keys: {sorted(unknown)}")
        if "name" not in data or "n" not in data:
            raise ConfigError("sketch config needs 'name' and 'n'")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.name not in SKETCHES:
            raise ConfigError(f"unknown sketch {self.name!r}; choose from {sorted(SKETCHES)}")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.alpha < 1 or self.alpha % 2 == 0:
            raise ConfigError(f"alpha must be odd and >= 1, got {self.alpha}")
        if self.delta is not None and not 0 < self.delta < 0.5:
            raise ConfigError(f"delta must lie in (0, 1/2), got {self.delta}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def build(self, seed: SketchSeed, memory: MemoryImage | None = None) -> Sketch:
        if self.alpha > 1:
            from .bounds import AmplifiedSketch

            base = SketchConfig(**{**asdict(self), "alpha": 1})
            return AmplifiedSketch(base.build, self.alpha, seed, n=self.n, w=self.w, memory=memory)
        cls = SKETCHES[self.name]
        kwargs = dict(memory=memory, w=self.w, M=self.M, max_abs=self.max_abs)
        if cls is not ExactBaseline:
            kwargs.update(d=self.d, b=self.b, delta=self.delta)
        if cls is PluginEntropyEstimator:
            kwargs["d_l1"] = self.d_l1
        return cls(self.n, seed, **kwargs)

    def factory(self):
        """A ``seed -> sketch`` callable; a configured ``seed`` is mixed into every derived seed."""
        if self.seed is None:
            return self.build
        salt = int(self.seed)
        return lambda seed, memory=None: self.build(seed.child("config-seed", salt), memory)
