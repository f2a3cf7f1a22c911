"""Compressing a non-adaptive sketch's message by cell sampling and index relabeling.

Alice and Bob share the sketch's coins, so both can compute every update
footprint.  They pick a set ``C`` of ``t_u`` cells that fully contains the
footprints of many indices (the set ``I^C``), and a public family of
permutations of ``[n]``.  Alice sends the index of a permutation that maps all
of her updates into ``I^C``, followed by the addresses and contents of the
cells in ``C``: nothing outside ``C`` was touched, so Bob can rebuild the whole
memory image and run his queries on the relabeled vector.

Wire layout (bit-packed, most significant bit first, zero-padded to a byte)::

    [perm_index: ceil(lg k) bits][t_u x (address: ceil(lg S) bits, contents: w bits)]

Cells appear in increasing address order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import mpmath
import numpy as np

from .cellprobe import ConfigError, ContractViolation, Sketch
from .game import AliceInput, DecodeResult, GameConfig, alice_encode, bob_decode, decode, draw_input, trial_seed
from .hashing import SketchSeed, derive_seed
from .sketches import exact_entropy, exact_heavy_hitter, exact_norm, is_valid_heavy_hitter
from .stats import binomial_sigma

# sum_{j<=20} 1/j!, a rational strictly below e
E_LOWER = sum(Fraction(1, math.factorial(j)) for j in range(21))


def ceil_lg(x: int) -> int:
    """Bits needed to write an integer in ``[0, x)``."""
    if x < 1:
        raise ValueError("need x >= 1")
    return (x - 1).bit_length()


# -- cell sampling ------------------------------------------------------------------------


@dataclass
class CellSample:
    cells: tuple[int, ...]
    covered: np.ndarray  # sorted indices whose footprint lies inside ``cells``
    n: int
    S: int
    t_u: int
    class_sets: np.ndarray = field(repr=False)  # canonical padded footprints, one row per class
    class_counts: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.covered)

    @cached_property
    def covered_set(self) -> frozenset[int]:
        return frozenset(self.covered.tolist())

    @property
    def class_census(self) -> dict[tuple[int, ...], int]:
        return {tuple(row): int(c) for row, c in zip(self.class_sets.tolist(), self.class_counts.tolist())}

    @property
    def certificate_ok(self) -> bool:
        """Pigeonhole: |I^C| * C(S, t_u) >= n, in exact integers."""
        return self.size * math.comb(self.S, self.t_u) >= self.n


def _canonical(cells: Iterable[int], t_u: int) -> list[int]:
    chosen = sorted(set(cells))
    filler = 0
    taken = set(chosen)
    while len(chosen) < t_u:
        if filler not in taken:
            chosen.append(filler)
        filler += 1
    return sorted(chosen)


def cell_sample(footprints: Mapping[int, Iterable[int]] | np.ndarray, t_u: int, S: int) -> CellSample:
    """Largest class of indices sharing a (padded) footprint, and everything it covers.

    ``footprints`` is either a mapping ``index -> cells`` over ``[n]`` or an
    ``(n, width)`` array whose row ``i`` lists the cells of index ``i``.
    Footprints smaller than ``t_u`` are padded with the lowest cells they do
    not already contain.
    """
    if isinstance(footprints, np.ndarray):
        table = footprints.astype(np.int64)
        rows = [None] * len(table)
    else:
        n = len(footprints)
        if sorted(footprints) != list(range(n)):
            raise ValueError("footprint map must cover indices 0..n-1")
        rows = [sorted(set(footprints[i])) for i in range(n)]
        table = None
    n = len(rows)
    if table is not None:
        ordered = np.sort(table, axis=1)
        distinct = 1 + np.count_nonzero(np.diff(ordered, axis=1), axis=1)
        if distinct.max(initial=0) > t_u:
            bad = int(np.argmax(distinct))
            raise ContractViolation(f"footprint of index {bad} has {distinct[bad]} cells > t_u={t_u}")
        if table.shape[1] == t_u and np.all(distinct == t_u):
            canon = ordered
        else:
            canon = np.array([_canonical(r, t_u) for r in table.tolist()], dtype=np.int64)
    else:
        for i, r in enumerate(rows):
            if len(r) > t_u:
                raise ContractViolation(f"footprint of index {i} has {len(r)} cells > t_u={t_u}")
        canon = np.array([_canonical(r, t_u) for r in rows], dtype=np.int64).reshape(n, t_u)
    if t_u > S or (canon.size and canon.max() >= S):
        raise ContractViolation(f"footprints reach outside the {S} cells")
    classes, counts = np.unique(canon, axis=0, return_counts=True)
    best = classes[int(np.argmax(counts))]  # ties go to the lexicographically smallest set
    if table is not None:
        inside = np.isin(table, best).all(axis=1)
    else:
        best_set = set(best.tolist())
        inside = np.array([set(r) <= best_set for r in rows], dtype=bool)
    return CellSample(tuple(int(c) for c in best), np.flatnonzero(inside), n, S, t_u, classes, counts)


def cell_sample_for(sketch: Sketch) -> CellSample:
    """Cell sample of a concrete sketch, from its footprint table."""
    table = sketch.footprint_table(np.arange(sketch.n, dtype=np.int64))
    return cell_sample(np.asarray(table), sketch.t_u, sketch.size)


# -- coverage and family size ----------------------------------------------------------------


@dataclass(frozen=True)
class Coverage:
    exact: Fraction  # C(m, a) / C(n, a)
    lower_bound: float  # (m / (e n))^a
    lower_bound_rational: Fraction  # (m / (E_LOWER n))^a, which is >= lower_bound
    vacuous: bool  # a > m

    @property
    def holds(self) -> bool:
        return self.exact >= self.lower_bound_rational


def coverage_probability(n: int, m: int, a: int) -> Coverage:
    """Chance that a uniform permutation maps a fixed a-set into a fixed m-set."""
    if not 0 <= m <= n or a < 0 or a > n:
        raise ValueError(f"need 0 <= m <= n and 0 <= a <= n, got n={n}, m={m}, a={a}")
    exact = Fraction(math.comb(m, a), math.comb(n, a))
    rational = Fraction(m, 1) ** a / (E_LOWER * n) ** a if a else Fraction(1)
    return Coverage(exact, (m / (math.e * n)) ** a, rational, a > m)


@dataclass(frozen=True)
class Preconditions:
    a_ok: bool  # a <= sqrt(n)
    t_u_ok: bool  # t_u <= (1/2) lg n / lg(eS/t_u)
    t_u_limit: float

    @property
    def ok(self) -> bool:
        return self.a_ok and self.t_u_ok

    def failures(self) -> list[str]:
        out = []
        if not self.a_ok:
            out.append("a <= sqrt(n)")
        if not self.t_u_ok:
            out.append(f"t_u <= (1/2) lg n / lg(eS/t_u) = {self.t_u_limit:.4f}")
        return out


def preconditions(n: int, a: int, S: int, t_u: int) -> Preconditions:
    limit = 0.5 * math.log2(n) / math.log2(math.e * S / t_u)
    return Preconditions(a * a <= n, t_u <= limit, limit)


def _lg_k_estimate(n: int, a: int, S: int, t_u: int) -> float:
    return (a * math.log2(math.e) + t_u * a * math.log2(math.e * S / t_u) + 1
            + math.log2(a * math.log(math.e * n / a)))


def required_family_size(n: int, a: int, S: int, t_u: int, strict: bool = False) -> int:
    """``ceil(a ln(en/a) / p)`` with ``p = e^-a (eS/t_u)^(-t_u a) / 2``, evaluated exactly enough.

    ``a <= sqrt(n)`` is always enforced.  The update-time inequality on
    ``t_u`` is enforced only when ``strict``; the family size is well defined
    without it, only the compression guarantee lapses.
    """
    if a < 1 or not 1 <= t_u <= S:
        raise ConfigError(f"need a >= 1 and 1 <= t_u <= S, got a={a}, t_u={t_u}, S={S}")
    pre = preconditions(n, a, S, t_u)
    if not pre.a_ok or (strict and not pre.ok):
        raise ConfigError(f"precondition failed for n={n}, a={a}, S={S}, t_u={t_u}: {'; '.join(pre.failures())}")
    with mpmath.workdps(int(_lg_k_estimate(n, a, S, t_u) * 0.31) + 30):
        p = mpmath.exp(-a) * (mpmath.e * S / t_u) ** (-t_u * a) / 2
        return int(mpmath.ceil(a * mpmath.log(mpmath.e * n / a) / p))


def family_size_for(p: float | Fraction, n: int, a: int) -> int:
    """``ceil(a ln(en/a) / p)`` for an explicit per-permutation success probability ``p``."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    return math.ceil(a * math.log(math.e * n / a) / float(p))


def bound_bits(n: int, a: int, S: int, t_u: int, w: int) -> float:
    """a lg e + t_u a lg(eS/t_u) + lg a + lg lg(en/a) + 2 t_u w + 1."""
    return (a * math.log2(math.e) + t_u * a * math.log2(math.e * S / t_u) + math.log2(a)
            + math.log2(math.log2(math.e * n / a)) + 2 * t_u * w + 1)


def structural_bits(k: int, t_u: int, S: int, w: int) -> int:
    return ceil_lg(k) + t_u * (ceil_lg(S) + w)


# -- permutation family --------------------------------------------------------------------


class PermutationFamily:
    """``k`` permutations of ``[n]``, each stored as a 64-bit seed and shuffled on demand."""

    def __init__(self, n: int, k: int, seed: int, identity_first: bool = False) -> None:
        if k < 1:
            raise ValueError("family needs k >= 1")
        self.n = n
        self.k = k
        self.seed = seed
        self.identity_first = identity_first

    def perm_seed(self, index: int) -> int:
        return derive_seed(self.seed, "perm", index)

    def permutation(self, index: int) -> np.ndarray:
        if not 0 <= index < self.k:
            raise IndexError(f"permutation index {index} outside [0, {self.k})")
        if self.identity_first and index == 0:
            return np.arange(self.n, dtype=np.int64)
        return np.random.Generator(np.random.PCG64(self.perm_seed(index))).permutation(self.n)

    def inverse(self, index: int) -> np.ndarray:
        perm = self.permutation(index)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n, dtype=perm.dtype)
        return inv


def find_covering_permutation(alice: AliceInput, family: PermutationFamily, covered: Iterable[int],
                              max_tries: int = 100_000) -> int | None:
    """Least ``i < min(k, max_tries)`` whose permutation sends every index of ``alice`` into ``covered``."""
    mask = np.zeros(family.n, dtype=bool)
    mask[np.fromiter(covered, dtype=np.int64)] = True
    idx = np.asarray(alice.indices, dtype=np.int64)
    for i in range(min(family.k, max_tries)):
        if mask[family.permutation(i)[idx]].all():
            return i
    return None


# -- messages ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class CompressedMessage:
    perm_index: int
    cells: tuple[tuple[int, int], ...]  # (address, contents), addresses increasing
    k: int
    S: int
    w: int

    def __post_init__(self) -> None:
        if not 0 <= self.perm_index < self.k:
            raise ValueError(f"malformed message: perm_index {self.perm_index} >= k={self.k}")
        addrs = [c for c, _ in self.cells]
        if addrs != sorted(set(addrs)):
            raise ValueError("cell addresses must be distinct and increasing")

    @property
    def t_u(self) -> int:
        return len(self.cells)

    @property
    def kind(self) -> str:
        return "compressed"

    @property
    def bit_count(self) -> int:
        return structural_bits(self.k, self.t_u, self.S, self.w)

    def to_bytes(self) -> bytes:
        value = self.perm_index
        addr_bits = ceil_lg(self.S)
        for addr, word in self.cells:
            value = (value << addr_bits) | addr
            value = (value << self.w) | word
        pad = -self.bit_count % 8
        return (value << pad).to_bytes((self.bit_count + pad) // 8, "big")

    @classmethod
    def from_bytes(cls, data: bytes, k: int, t_u: int, S: int, w: int) -> CompressedMessage:
        bits = structural_bits(k, t_u, S, w)
        if len(data) != (bits + 7) // 8:
            raise ValueError(f"expected {(bits + 7) // 8} bytes, got {len(data)}")
        value = int.from_bytes(data, "big") >> (-bits % 8)
        addr_bits = ceil_lg(S)
        cells = []
        for _ in range(t_u):
            word = value & ((1 << w) - 1)
            value >>= w
            addr = value & ((1 << addr_bits) - 1)
            value >>= addr_bits
            cells.append((addr, word))
        return cls(value, tuple(reversed(cells)), k, S, w)


def compress(sketch_factory: Callable[[], Sketch], alice: AliceInput, C_base: int, family: PermutationFamily,
             sample: CellSample, perm_index: int | None = None) -> CompressedMessage:
    """Alice's side: stream the relabeled input and ship the cells of ``C``.

    Raises :class:`ContractViolation` if any update touches a cell outside ``C``.
    """
    if perm_index is None:
        perm_index = find_covering_permutation(alice, family, sample.covered)
        if perm_index is None:
            raise ValueError("no covering permutation in the searched part of the family")
    perm = family.permutation(perm_index)
    sketch = sketch_factory()
    log = sketch.memory.probe_log
    mark = log.mark()
    relabeled = AliceInput(tuple(int(perm[i]) for i in alice.indices))
    alice_encode(sketch, relabeled, C_base)
    stray = log.cells_since(mark) - set(sample.cells)
    if stray:
        raise ContractViolation(f"updates touched cells outside C: {sorted(stray)[:8]}")
    words = sketch.memory.words
    cells = tuple((c, int(words[c])) for c in sample.cells)
    return CompressedMessage(perm_index, cells, family.k, sketch.size, sketch.w)


class PermutedSketch:
    """View of a sketch holding ``rho(v)``, answering queries about ``v``."""

    def __init__(self, base: Sketch, perm: np.ndarray) -> None:
        self.base = base
        self.perm = np.asarray(perm, dtype=np.int64)
        self.inv = np.empty_like(self.perm)
        self.inv[self.perm] = np.arange(len(self.perm))
        self.n = base.n
        self.M = base.M
        self.memory = base.memory

    @property
    def max_update_probes(self) -> int:
        return self.base.max_update_probes

    def update(self, i: int, delta: int) -> None:
        self.base.update(int(self.perm[i]), delta)

    def point_query(self, t: int):
        return self.base.point_query(int(self.perm[t]))

    def point_query_many(self, ts):
        return self.base.point_query_many(self.perm[np.asarray(ts, dtype=np.int64)])

    def norm(self, p: int):
        return self.base.norm(p)

    def entropy(self):
        return self.base.entropy()

    def heavy_hitter(self):
        i = self.base.heavy_hitter()
        return None if i is None else int(self.inv[i])


def restore(message: CompressedMessage, family: PermutationFamily, sketch_factory: Callable[[], Sketch]
            ) -> PermutedSketch:
    """Bob's reconstruction: fresh sketch, cells of ``C`` overwritten, relabeling applied."""
    if message.perm_index >= family.k:
        raise ValueError(f"malformed message: perm_index {message.perm_index} >= k={family.k}")
    sketch = sketch_factory()
    if sketch.size != message.S or sketch.w != message.w:
        raise ValueError("message does not match the sketch's memory geometry")
    words = sketch.memory.words.copy()
    for addr, word in message.cells:
        words[addr] = word
    sketch.load_words(words)
    return PermutedSketch(sketch, family.permutation(message.perm_index))


def decompress_and_answer(message: CompressedMessage, bob_ops: Sequence[tuple], family: PermutationFamily,
                          sample: CellSample, sketch_factory: Callable[[], Sketch]) -> list:
    """Run Bob's operations against the restored, relabeled sketch.

    Operations: ``("update", i, delta)``, ``("point_query", t)``, ``("norm", p)``,
    ``("entropy",)``, ``("heavy_hitter",)``.  Updates answer ``None``.
    """
    if set(a for a, _ in message.cells) != set(sample.cells):
        raise ValueError("message cells differ from the agreed cell sample")
    view = restore(message, family, sketch_factory)
    answers = []
    for op in bob_ops:
        kind, *args = op
        if kind == "update":
            view.update(*args)
            answers.append(None)
        elif kind in ("point_query", "norm", "entropy", "heavy_hitter"):
            answers.append(getattr(view, kind)(*args))
        else:
            raise ValueError(f"unknown operation {kind!r}")
    return answers


def compressed_decode(message: CompressedMessage, config: GameConfig, family: PermutationFamily,
                      sketch_factory: Callable[[], Sketch], truth: AliceInput | None = None) -> DecodeResult:
    """Bob's full decoding game on a compressed message."""
    view = restore(message, family, sketch_factory)
    res = decode(view, config, truth)
    res.probe_events = len(view.memory.probe_log)
    res.max_update_probes = view.max_update_probes
    return res


# -- permutation invariance ---------------------------------------------------------------------


INVARIANCE_PROBLEMS = ("point_query", "lp_norm", "entropy", "heavy_hitter")


def permutation_invariance_check(problem: str, trials: int = 1000, seed: int = 0, max_n: int = 64,
                                 max_abs: int = 1000) -> int:
    """Count (v, pi) pairs where relabeling does not commute with the exact query."""
    if problem not in INVARIANCE_PROBLEMS:
        raise ValueError(f"problem must be one of {INVARIANCE_PROBLEMS}")
    rng = SketchSeed(seed).rng("invariance", problem)
    violations = 0
    for _ in range(trials):
        n = int(rng.integers(2, max_n + 1))
        v = rng.integers(-max_abs, max_abs + 1, size=n)
        v[rng.random(n) < 0.5] = 0
        pi = rng.permutation(n)
        pv = np.zeros(n, dtype=np.int64)
        pv[pi] = v
        v_map = {i: int(x) for i, x in enumerate(v.tolist()) if x}
        pv_map = {i: int(x) for i, x in enumerate(pv.tolist()) if x}
        if problem == "point_query":
            t = int(rng.integers(n))
            ok = v_map.get(t, 0) == pv_map.get(int(pi[t]), 0)
        elif problem == "lp_norm":
            ok = all(exact_norm(v_map, p) == exact_norm(pv_map, p) for p in (1, 2))
        elif problem == "entropy":
            ok = exact_entropy(v_map) == exact_entropy(pv_map)
        else:
            answer = exact_heavy_hitter(v_map)
            mapped = None if answer is None else int(pi[answer])
            ok = is_valid_heavy_hitter(pv_map, mapped)
        violations += not ok
    return violations


# -- paired compressed/uncompressed runs -----------------------------------------------------------


@dataclass
class CompressionTrial:
    trial_id: int
    covered_size: int
    perm_index: int | None
    full_bits: int
    compressed_bits: int | None
    full_success: bool
    compressed_success: bool | None
    non_erring: bool
    answers_equal: bool | None


@dataclass
class CompressionReport:
    trials: int
    found: int
    hit_rate: float  # fraction of trials with a covering permutation found
    non_erring: int
    equal_non_erring: int
    equality_rate: float  # among non-erring paired trials
    min_coverage: float  # exact single-permutation coverage at the smallest |I^C| seen
    certificate_failures: int
    full_bits: int
    max_compressed_bits: int | None
    bound_bits: float
    preconditions_met: bool
    lg_k: int
    records: list[CompressionTrial] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "records"}
        return out


def run_compression_demo(config: GameConfig, max_tries: int = 20_000, identity_first: bool = False
                         ) -> CompressionReport:
    """Compressed and uncompressed games side by side on the same inputs and coins."""
    records: list[CompressionTrial] = []
    cert_failures = 0
    coverage_seen = []
    k = lg_k = None
    probe = config.sketch.build(SketchSeed(config.master_seed))
    S, w, t_u = probe.size, probe.w, probe.t_u
    k = required_family_size(config.n, max(config.a, 1), S, t_u)
    lg_k = ceil_lg(k)
    for tid in range(config.trials):
        seed = trial_seed(config, tid)
        alice = draw_input(config.n, config.a, seed.rng("alice"))
        sketch_seed = seed.child("sketch")
        factory = config.sketch.factory()

        def fresh(factory=factory, sketch_seed=sketch_seed) -> Sketch:
            return factory(sketch_seed)

        full_sketch = fresh()
        full_msg = alice_encode(full_sketch, alice, config.C)
        full = bob_decode(full_msg, config, truth=alice)
        sample = cell_sample_for(fresh())
        cert_failures += not sample.certificate_ok
        coverage_seen.append(sample.size)
        family = PermutationFamily(config.n, k, seed.derive("family"), identity_first=identity_first)
        idx = find_covering_permutation(alice, family, sample.covered, max_tries=max_tries)
        if idx is None:
            records.append(CompressionTrial(tid, sample.size, None, full_msg.bit_count, None, full.success,
                                            None, False, None))
            continue
        msg = compress(fresh, alice, config.C, family, sample, perm_index=idx)
        packed = CompressedMessage.from_bytes(msg.to_bytes(), k, msg.t_u, msg.S, msg.w)
        comp = compressed_decode(packed, config, family, fresh, truth=alice)
        non_erring = full.query_errors == 0 and comp.query_errors == 0
        equal = (full.transcript == comp.transcript and full.recovered == comp.recovered
                 and full.queries_used == comp.queries_used)
        records.append(CompressionTrial(tid, sample.size, idx, full_msg.bit_count, msg.bit_count, full.success,
                                        comp.success, non_erring, equal))
    found = [r for r in records if r.perm_index is not None]
    clean = [r for r in found if r.non_erring]
    equal_clean = sum(bool(r.answers_equal) for r in clean)
    smallest = min(coverage_seen)
    cov = coverage_probability(config.n, smallest, config.a) if config.a <= config.n else None
    return CompressionReport(
        trials=config.trials,
        found=len(found),
        hit_rate=len(found) / config.trials,
        non_erring=len(clean),
        equal_non_erring=equal_clean,
        equality_rate=equal_clean / len(clean) if clean else 1.0,
        min_coverage=float(cov.exact) if cov else 0.0,
        certificate_failures=cert_failures,
        full_bits=records[0].full_bits,
        max_compressed_bits=max((r.compressed_bits for r in found), default=None),
        bound_bits=bound_bits(config.n, max(config.a, 1), S, t_u, w),
        preconditions_met=preconditions(config.n, max(config.a, 1), S, t_u).ok,
        lg_k=lg_k,
        records=records,
    )


def hit_rate_check(n: int, m: int, a: int, trials: int, seed: int = 0) -> tuple[float, float, float]:
    """Monte Carlo rate at which one uniform permutation covers a fixed a-set; returns (rate, exact, sigma)."""
    rng = SketchSeed(seed).rng("hit-rate", n, m, a)
    target = np.zeros(n, dtype=bool)
    target[:m] = True
    items = np.arange(a)
    hits = sum(bool(target[rng.permutation(n)[items]].all()) for _ in range(trials))
    exact = float(coverage_probability(n, m, a).exact)
    return hits / trials, exact, binomial_sigma(exact, trials)
