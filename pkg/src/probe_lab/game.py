"""The one-way decoding game: Alice streams C^j onto a random indices, Bob peels them off.

Alice's message is her sketch's memory image.  Bob rebuilds the sketch from
it and, for ``j = a .. 1``, finds ``i_j`` either by scanning ``t`` with a
problem-specific check or (heavy hitters) with a single query, then
subtracts ``C^j`` at the index he declared.

The harness optionally tracks the true vector next to Bob so that every query
answer can be compared with the exact answer on the same state.  Bob never
reads it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .bounds import entropy_threshold_validate
from .cellprobe import ConfigError, Sketch, deserialize_image, payload_bits, serialize_image
from .hashing import SketchSeed
from .sketches import SketchConfig, exact_entropy, is_valid_heavy_hitter
from .stats import lg_binomial, wilson_interval

PROBLEMS = ("point_query", "lp_norm", "entropy", "heavy_hitter")
_NEEDS = {"point_query": "point_query", "entropy": "entropy", "heavy_hitter": "heavy_hitter"}


def geometric_l1(C: int, j: int) -> int:
    """C + C^2 + ... + C^j, i.e. (C^(j+1) - C) / (C - 1)."""
    return (C ** (j + 1) - C) // (C - 1)


@dataclass
class GameConfig:
    n: int
    a: int
    C: int
    problem: str
    p: int = 1
    sketch: SketchConfig | None = None
    trials: int = 1
    master_seed: int = 0
    M: int | None = None
    exhaustive: bool = False

    def __post_init__(self) -> None:
        if self.sketch is None:
            self.sketch = SketchConfig(name="exact", n=self.n)
        elif isinstance(self.sketch, Mapping):
            self.sketch = SketchConfig.from_dict(self.sketch)
        if self.M is None:
            self.M = self.n**3
        self.validate()
        # Counters must hold the largest l1 mass seen during decoding.
        if self.sketch.M is None:
            self.sketch.M = self.M
        if self.sketch.max_abs is None:
            self.sketch.max_abs = 2 * geometric_l1(self.C, max(self.a, 1))

    @classmethod
    def from_dict(cls, data: Mapping) -> GameConfig:
        allowed = {"n", "a", "C", "problem", "p", "sketch", "trials", "master_seed", "M", "exhaustive"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown game config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.problem == "lp_norm" and self.p not in (1, 2):
            raise ConfigError(f"p must be 1 or 2, got {self.p}")
        if self.n < 2 or self.a < 0:
            raise ConfigError("need n >= 2 and a >= 0")
        if self.a * self.a > self.n:
            raise ConfigError(f"a={self.a} violates a <= sqrt(n) for n={self.n}")
        if self.C ** self.a > self.M:
            raise ConfigError(f"C^a = {self.C}^{self.a} exceeds magnitude bound M={self.M}")
        if self.problem == "entropy":
            if self.a >= 1:
                entropy_threshold_validate(self.C, self.a)
        elif self.C < 10:
            raise ConfigError(f"C={self.C} < 10 breaks the check thresholds")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.sketch.n != self.n:
            raise ConfigError(f"sketch n={self.sketch.n} differs from game n={self.n}")
        need = _NEEDS.get(self.problem, f"l{self.p}")
        from .sketches import SKETCHES

        if need not in SKETCHES[self.sketch.name].supports:
            raise ConfigError(f"sketch {self.sketch.name!r} cannot answer {need} queries")

    @property
    def query_budget(self) -> int:
        """k: queries Bob may issue (n*a for scans, a for heavy hitters)."""
        return self.a if self.problem == "heavy_hitter" else self.n * self.a

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sketch"] = self.sketch.to_dict()
        return out


@dataclass(frozen=True)
class AliceInput:
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("indices must be distinct")


def draw_input(n: int, a: int, rng: np.random.Generator) -> AliceInput:
    return AliceInput(tuple(int(i) for i in rng.choice(n, size=a, replace=False)))


@dataclass(frozen=True)
class Message:
    kind: str  # "full" or "compressed"
    data: bytes
    bit_count: int

    def __post_init__(self) -> None:
        if len(self.data) < (self.bit_count + 7) // 8:
            raise ValueError("payload shorter than bit_count")


def alice_encode(sketch: Sketch, alice: AliceInput, C: int) -> Message:
    """Apply v[i_j] += C^j for j = 1..a and ship the memory image."""
    for j, i in enumerate(alice.indices, start=1):
        if C**j > sketch.M:
            raise ConfigError(f"C^{j} exceeds the sketch magnitude bound M={sketch.M}")
        sketch.update(i, C**j)
    return Message("full", serialize_image(sketch), payload_bits(sketch))


# -- checks ----------------------------------------------------------------------


def check_point_query(sketch, t: int, j: int, C: int) -> bool:
    return 3 * sketch.point_query(t) >= C**j


def check_lp(sketch, t: int, j: int, C: int, p: int) -> bool:
    sketch.update(t, -(C**j))
    est = sketch.norm(p)
    sketch.update(t, C**j)
    return 3 * est <= C**j


def check_entropy(sketch, t: int, j: int, C: int) -> bool:
    sketch.update(t, -(C**j))
    est = sketch.entropy()
    sketch.update(t, C**j)
    return 3 * (0.0 if est is None else est) <= 1


class _Oracle:
    """Exact vector shadowing Bob's state, for scoring answers (never consulted by Bob)."""

    def __init__(self, n: int, alice: AliceInput, C: int) -> None:
        self.n = n
        self.v: dict[int, int] = {i: C**j for j, i in enumerate(alice.indices, start=1)}
        self._version = 0
        self._fresh_key: tuple | None = None
        self._fresh = False

    def add(self, i: int, delta: int) -> None:
        self._version += 1
        value = self.v.get(i, 0) + delta
        if value:
            self.v[i] = value
        else:
            self.v.pop(i, None)

    def l1(self) -> int:
        return sum(abs(x) for x in self.v.values())

    def point_decisions(self, j: int, C: int) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        if 0 >= C**j:
            out[:] = True
        for i, x in self.v.items():
            out[i] = 3 * x >= C**j
        return out

    def lp_decision(self, t: int, j: int, C: int, p: int, l1: int, sq: int) -> bool:
        vt = self.v.get(t, 0)
        shifted = vt - C**j
        if p == 1:
            return 3 * (l1 - abs(vt) + abs(shifted)) <= C**j
        return 9 * (sq - vt * vt + shifted * shifted) <= C ** (2 * j)

    def entropy_decision(self, t: int, j: int, C: int) -> bool:
        if t not in self.v:
            # every index outside the support yields the same residual
            key = (j, self._version)
            if self._fresh_key != key:
                self._fresh_key = key
                self._fresh = self._entropy_with(t, j, C)
            return self._fresh
        return self._entropy_with(t, j, C)

    def _entropy_with(self, t: int, j: int, C: int) -> bool:
        v = dict(self.v)
        v[t] = v.get(t, 0) - C**j
        h = exact_entropy(v)
        return 3 * (0.0 if h is None else h) <= 1

    def unique_heavy_hitter(self) -> int:
        """Number of indices meeting the heavy-hitter guarantee (exhaustive over [n])."""
        l1 = self.l1()
        linf = max((abs(x) for x in self.v.values()), default=0)
        count = sum(1 for x in self.v.values() if 2 * abs(x) >= 2 * linf - l1)
        if 2 * linf <= l1:  # zero entries qualify too
            count += self.n - len(self.v)
        return count


@dataclass
class DecodeResult:
    recovered: list[int]  # i_a first, down to i_1
    success: bool
    queries_used: int
    query_errors: int = 0
    scored_queries: int = 0
    failure: str | None = None
    level_identity_violations: int = 0
    hh_uniqueness_violations: int = 0
    probe_events: int = 0
    max_update_probes: int = 0
    # indices that passed at each level, in decoding order
    transcript: list[tuple[int, ...]] = field(default_factory=list)


def decode(sketch, config: GameConfig, truth: AliceInput | None = None) -> DecodeResult:
    """Bob's side of the protocol on an already-loaded sketch (or a view of one)."""
    n, a, C = config.n, config.a, config.C
    oracle = _Oracle(n, truth, C) if truth is not None else None
    expected = list(reversed(truth.indices)) if truth is not None else None
    res = DecodeResult([], False, 0)
    all_t = np.arange(n, dtype=np.int64)
    for j in range(a, 0, -1):
        on_track = expected is not None and res.recovered == expected[:len(res.recovered)]
        if oracle is not None and on_track:
            l1 = oracle.l1()
            if not (l1 == geometric_l1(C, j) and l1 < 2 * C**j):
                res.level_identity_violations += 1
            if config.problem == "heavy_hitter" and oracle.unique_heavy_hitter() != 1:
                res.hh_uniqueness_violations += 1
        passers: list[int] = []
        if config.problem == "point_query":
            est = np.asarray(sketch.point_query_many(all_t), dtype=np.float64)
            decisions = 3 * est >= C**j
            res.queries_used += n
            if oracle is not None:
                res.query_errors += int(np.count_nonzero(decisions != oracle.point_decisions(j, C)))
                res.scored_queries += n
            passers = np.flatnonzero(decisions).tolist()
        elif config.problem == "heavy_hitter":
            hh = sketch.heavy_hitter()
            res.queries_used += 1
            if oracle is not None:
                res.query_errors += int(not is_valid_heavy_hitter(oracle.v, hh))
                res.scored_queries += 1
            passers = [] if hh is None else [hh]
        else:
            if oracle is not None:
                l1 = oracle.l1()
                sq = sum(x * x for x in oracle.v.values())
            for t in range(n):
                if config.problem == "lp_norm":
                    ok = check_lp(sketch, t, j, C, config.p)
                    truth_ok = oracle.lp_decision(t, j, C, config.p, l1, sq) if oracle else ok
                else:
                    ok = check_entropy(sketch, t, j, C)
                    truth_ok = oracle.entropy_decision(t, j, C) if oracle else ok
                res.queries_used += 1
                if oracle is not None:
                    res.query_errors += int(ok != truth_ok)
                    res.scored_queries += 1
                if ok:
                    passers.append(t)
                    if not config.exhaustive:
                        break
        res.transcript.append(tuple(int(x) for x in passers))
        if not passers:
            res.failure = f"no index passed the check at level {j}"
            break
        if config.exhaustive and len(passers) > 1:
            res.failure = f"{len(passers)} indices passed at level {j}: {passers[:8]}"
            break
        chosen = int(passers[0])
        res.recovered.append(chosen)
        sketch.update(chosen, -(C**j))
        if oracle is not None:
            oracle.add(chosen, -(C**j))
    if res.failure is None and expected is not None:
        res.success = res.recovered == expected
        if not res.success:
            res.failure = "decoded indices differ from Alice's input"
    elif res.failure is None:
        res.success = len(res.recovered) == a
    return res


def bob_decode(message: Message, config: GameConfig, truth: AliceInput | None = None) -> DecodeResult:
    """Rebuild the sketch from a full message (same public coins) and decode."""
    if message.kind != "full":
        raise ValueError("bob_decode takes full memory-image messages; see compression for the other kind")
    header, words = deserialize_image(message.data)
    sketch = config.sketch.build(SketchSeed(header.master_seed))
    if (header.n, header.S, header.name) != (sketch.n, sketch.memory.S, sketch.name):
        raise ValueError(f"message header {header} does not match configured sketch {sketch.name}")
    sketch.load_words(words)
    log = sketch.memory.probe_log
    res = decode(sketch, config, truth)
    res.probe_events = len(log)
    res.max_update_probes = sketch.max_update_probes
    return res


# -- Monte Carlo driver ---------------------------------------------------------------


@dataclass
class TrialRecord:
    trial_id: int
    problem: str
    n: int
    a: int
    C: int
    success: bool
    queries_used: int
    message_bits: int
    max_probes_per_update: int
    query_errors: int
    scored_queries: int
    failure: str | None = None


@dataclass
class GameStats:
    problem: str
    n: int
    a: int
    C: int
    sketch: str
    trials: int
    successes: int
    success_rate: float
    wilson_low: float
    wilson_high: float
    mean_message_bits: float
    mean_queries: float
    max_probes_per_update: int
    query_budget: int
    queries_scored: int
    query_errors: int
    per_query_failure: float
    union_bound_success: float
    declared_delta: float
    information_bits: float
    level_identity_violations: int
    hh_uniqueness_violations: int
    records: list[TrialRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("records")
        return out


def trial_seed(config: GameConfig, trial_id: int) -> SketchSeed:
    return SketchSeed(config.master_seed).child("trial", trial_id)


def play_trial(config: GameConfig, trial_id: int) -> tuple[TrialRecord, DecodeResult]:
    seed = trial_seed(config, trial_id)
    alice = draw_input(config.n, config.a, seed.rng("alice"))
    sketch = config.sketch.factory()(seed.child("sketch"))
    message = alice_encode(sketch, alice, config.C)
    result = bob_decode(message, config, truth=alice)
    record = TrialRecord(
        trial_id, config.problem if config.problem != "lp_norm" else f"l{config.p}", config.n, config.a,
        config.C, result.success, result.queries_used, message.bit_count,
        max(sketch.max_update_probes, result.max_update_probes), result.query_errors, result.scored_queries,
        result.failure,
    )
    return record, result


def run_game(config: GameConfig, threads: int = 1) -> GameStats:
    """Independent encode/decode rounds with per-trial derived seeds."""
    ids = range(config.trials)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(lambda t: play_trial(config, t), ids))
    else:
        outcomes = [play_trial(config, t) for t in ids]
    records = [r for r, _ in outcomes]
    successes = sum(r.success for r in records)
    scored = sum(r.scored_queries for r in records)
    errors = sum(r.query_errors for r in records)
    per_query = errors / scored if scored else 0.0
    lo, hi = wilson_interval(successes, config.trials)
    probe_sketch = config.sketch.build(SketchSeed(config.master_seed))
    return GameStats(
        problem=records[0].problem,
        n=config.n, a=config.a, C=config.C,
        sketch=probe_sketch.name,
        trials=config.trials,
        successes=successes,
        success_rate=successes / config.trials,
        wilson_low=lo, wilson_high=hi,
        mean_message_bits=float(np.mean([r.message_bits for r in records])),
        mean_queries=float(np.mean([r.queries_used for r in records])),
        max_probes_per_update=max(r.max_probes_per_update for r in records),
        query_budget=config.query_budget,
        queries_scored=scored,
        query_errors=errors,
        per_query_failure=per_query,
        union_bound_success=1 - config.query_budget * per_query,
        declared_delta=probe_sketch.delta,
        information_bits=lg_binomial(config.n, config.a),
        level_identity_violations=sum(res.level_identity_violations for _, res in outcomes),
        hh_uniqueness_violations=sum(res.hh_uniqueness_violations for _, res in outcomes),
        records=records,
    )

