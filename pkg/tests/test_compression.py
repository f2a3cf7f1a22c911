from __future__ import annotations

import json
import math
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from probe_lab.cellprobe import ConfigError, ContractViolation
from probe_lab.compression import (
    E_LOWER, CellSample, CompressedMessage, PermutationFamily, PermutedSketch, bound_bits, ceil_lg,
    cell_sample, cell_sample_for, compress, compressed_decode, coverage_probability, decompress_and_answer,
    family_size_for, find_covering_permutation, hit_rate_check, permutation_invariance_check, preconditions,
    required_family_size, run_compression_demo, structural_bits,
)
from probe_lab.game import AliceInput, GameConfig, alice_encode, bob_decode
from probe_lab.hashing import SketchSeed
from probe_lab.sketches import SketchConfig
from probe_lab.stats import binomial_sigma

GOLDEN = Path(__file__).parent / "golden"


def test_e_lower_is_below_e():
    with mpmath.workdps(60):
        e_50 = Fraction(mpmath.nstr(mpmath.e, 50))
    assert E_LOWER < e_50 - Fraction(1, 10**45)
    assert float(E_LOWER) == pytest.approx(math.e, rel=1e-15)


# -- cell sampling -----------------------------------------------------------------------


def test_single_cell_class_covers_everything():
    sample = cell_sample({i: {0} for i in range(10)}, t_u=1, S=4)
    assert sample.cells == (0,) and sample.size == 10 and sample.certificate_ok


def test_round_robin_pairs():
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7)]
    sample = cell_sample({i: set(pairs[i % 4]) for i in range(16)}, t_u=2, S=8)
    assert sample.size == 4
    assert sample.cells == (0, 1)
    assert 16 / math.comb(8, 2) == pytest.approx(0.571, abs=1e-3)
    assert sample.certificate_ok
    assert sorted(sample.class_census.values()) == [4, 4, 4, 4]


def test_padding_uses_lowest_unused_cells():
    # index 0 probes {3}; padded to {0, 3}. Index 1 probes {0, 3}: same class.
    sample = cell_sample({0: {3}, 1: {0, 3}, 2: {5, 6}}, t_u=2, S=8)
    assert sample.cells == (0, 3) and sample.covered.tolist() == [0, 1]


def test_covered_set_can_exceed_the_class():
    # {0} is padded to {0, 1}, which is the class of indices 1 and 2
    sample = cell_sample({0: {0}, 1: {0, 1}, 2: {0, 1}, 3: {2, 3}}, t_u=2, S=4)
    assert sample.covered.tolist() == [0, 1, 2]


def test_oversized_footprint_is_a_contract_violation():
    with pytest.raises(ContractViolation):
        cell_sample({0: {0, 1, 2}, 1: {0}}, t_u=2, S=4)
    with pytest.raises(ContractViolation):
        cell_sample(np.array([[0, 1, 2]]), t_u=2, S=4)


@given(st.integers(1, 4), st.integers(4, 9), st.data())
def test_certificate_and_coverage_property(t_u, S, data):
    n = data.draw(st.integers(1, 40))
    fps = {i: set(data.draw(st.lists(st.integers(0, S - 1), min_size=1, max_size=t_u))) for i in range(n)}
    sample = cell_sample(fps, t_u, S)
    assert len(sample.cells) == t_u
    assert sample.size * math.comb(S, t_u) >= n
    for i in range(n):
        assert (i in sample.covered_set) == fps[i].issubset(sample.cells)
    table = np.array([sorted(fps[i]) + [sorted(fps[i])[0]] * (t_u - len(fps[i])) for i in range(n)])
    vectorized = cell_sample(table, t_u, S)
    assert vectorized.cells == sample.cells and vectorized.covered.tolist() == sample.covered.tolist()


def test_cell_sample_on_dyadic_footprints():
    for seed in range(5):
        sketch = SketchConfig("dyadic_hh", 1024, d=2, b=8).build(SketchSeed(seed))
        sample = cell_sample_for(sketch)
        assert sample.certificate_ok
        fp = sketch.footprint(int(sample.covered[0])).cells
        assert fp <= set(sample.cells)


# -- coverage and family size ----------------------------------------------------------------


def test_coverage_examples():
    assert coverage_probability(50, 50, 7).exact == 1
    cov = coverage_probability(16, 8, 2)
    assert cov.exact == Fraction(28, 120)
    assert cov.lower_bound == pytest.approx((8 / (16 * math.e)) ** 2)
    assert cov.holds
    for a in range(1, 9):
        assert coverage_probability(1024, 32, a).holds
    empty = coverage_probability(10, 2, 3)
    assert empty.exact == 0 and empty.vacuous


@given(st.integers(1, 300), st.data())
def test_exact_coverage_dominates_lower_bound(n, data):
    m = data.draw(st.integers(0, n))
    a = data.draw(st.integers(0, min(m, 12)))
    cov = coverage_probability(n, m, a)
    assert cov.exact >= cov.lower_bound_rational
    assert float(cov.lower_bound_rational) >= cov.lower_bound * (1 - 1e-12)


def test_family_size_small_case():
    # a = 1, S = t_u = 1: p = 1 / (2 e * e), k = ceil(2 e^2 ln(e n))
    assert required_family_size(16, 1, 1, 1) == math.ceil(2 * math.e**2 * math.log(16 * math.e))


def test_family_size_golden():
    g = json.loads((GOLDEN / "family_size.json").read_text())
    assert required_family_size(g["n"], g["a"], g["S"], g["t_u"]) == g["k"]
    p = math.exp(-4) * (math.e * 32) ** -8 / 2
    assert g["k"] == pytest.approx(4 * math.log(math.e * 2**16 / 4) / p, rel=1e-12)


def test_family_size_is_monotone():
    for a in range(1, 6):
        assert required_family_size(4096, a, 64, 2) < required_family_size(4096, a + 1, 64, 2)
    for t in range(1, 6):
        assert required_family_size(4096, 3, 64, t) < required_family_size(4096, 3, 64, t + 1)


def test_family_size_preconditions():
    with pytest.raises(ConfigError, match="sqrt"):
        required_family_size(16, 5, 8, 1)
    with pytest.raises(ConfigError, match="lg n"):
        required_family_size(2**16, 4, 64, 2, strict=True)
    assert not preconditions(2**16, 4, 64, 2).ok
    assert preconditions(2**40, 4, 4, 1).ok
    assert family_size_for(0.5, 64, 2) == math.ceil(2 * 2 * math.log(32 * math.e))


def test_huge_family_sizes_are_exact_integers():
    k = required_family_size(2**16, 4, 4096, 64)
    assert isinstance(k, int) and 1900 < ceil_lg(k) < 1930


def test_message_bits_within_bound_where_preconditions_hold():
    checked = 0
    for n_exp in (24, 32, 40, 64, 100):
        for S in (2, 3, 4, 8, 16):
            for t_u in range(1, S + 1):
                for a in (1, 2, 3, 5):
                    if not preconditions(2**n_exp, a, S, t_u).ok:
                        continue
                    w = ceil_lg(S) + 1 + (n_exp % 7)
                    k = required_family_size(2**n_exp, a, S, t_u, strict=True)
                    assert structural_bits(k, t_u, S, w) <= bound_bits(2**n_exp, a, S, t_u, w)
                    checked += 1
    assert checked >= 40


# -- permutations ---------------------------------------------------------------------------


def test_permutations_are_reproducible_bijections():
    fam = PermutationFamily(50, 10, seed=3)
    for i in range(10):
        p = fam.permutation(i)
        assert sorted(p.tolist()) == list(range(50))
        assert np.array_equal(p, PermutationFamily(50, 10, seed=3).permutation(i))
        assert np.array_equal(fam.inverse(i)[p], np.arange(50))
    assert not np.array_equal(fam.permutation(0), fam.permutation(1))
    assert np.array_equal(PermutationFamily(50, 2, 3, identity_first=True).permutation(0), np.arange(50))
    with pytest.raises(IndexError):
        fam.permutation(10)


def test_full_coverage_picks_index_zero():
    fam = PermutationFamily(40, 100, seed=1)
    assert find_covering_permutation(AliceInput((3, 7, 9)), fam, range(40)) == 0


def test_covering_permutation_is_least_index():
    fam = PermutationFamily(64, 500, seed=2)
    inp = AliceInput((1, 2))
    covered = range(16)
    i = find_covering_permutation(inp, fam, covered)
    assert i is not None
    assert set(fam.permutation(i)[[1, 2]].tolist()) <= set(covered)
    for j in range(i):
        assert not set(fam.permutation(j)[[1, 2]].tolist()) <= set(covered)


def test_single_permutation_hit_rate_matches_coverage():
    rate, exact, sigma = hit_rate_check(64, 16, 2, trials=2000, seed=1)
    assert exact == pytest.approx(16 * 15 / (64 * 63))
    assert abs(rate - exact) <= 3 * sigma


def test_not_found_frequency_is_small():
    n, m, a = 64, 16, 2
    exact = coverage_probability(n, m, a).exact
    k = family_size_for(exact / 2, n, a)
    rng = np.random.default_rng(0)
    misses = 0
    for t in range(300):
        fam = PermutationFamily(n, k, seed=t)
        inp = AliceInput(tuple(int(x) for x in rng.choice(n, a, replace=False)))
        misses += find_covering_permutation(inp, fam, range(m)) is None
    bound = float((1 - exact) ** k)
    assert misses / 300 <= bound + 3 * binomial_sigma(max(bound, 1 / 300), 300)


# -- messages --------------------------------------------------------------------------------


def test_message_layout_golden():
    g = json.loads((GOLDEN / "compressed_message.json").read_text())
    msg = CompressedMessage(g["perm_index"], tuple(map(tuple, g["cells"])), g["k"], g["S"], g["w"])
    assert msg.bit_count == g["bit_count"] == 4 + 2 * (3 + 32)
    assert msg.to_bytes().hex() == g["hex"]
    back = CompressedMessage.from_bytes(bytes.fromhex(g["hex"]), g["k"], 2, g["S"], g["w"])
    assert back == msg


@given(st.integers(1, 2**70), st.integers(1, 64), st.sampled_from([1, 7, 16, 32, 64]), st.data())
def test_message_round_trip(k, S, w, data):
    t_u = data.draw(st.integers(1, S))
    addrs = sorted(data.draw(st.sets(st.integers(0, S - 1), min_size=t_u, max_size=t_u)))
    cells = tuple((a, data.draw(st.integers(0, 2**w - 1))) for a in addrs)
    msg = CompressedMessage(data.draw(st.integers(0, k - 1)), cells, k, S, w)
    raw = msg.to_bytes()
    assert len(raw) == (msg.bit_count + 7) // 8
    assert CompressedMessage.from_bytes(raw, k, t_u, S, w) == msg


def test_malformed_messages():
    with pytest.raises(ValueError):
        CompressedMessage(10, ((0, 1),), 10, 4, 8)
    with pytest.raises(ValueError):
        CompressedMessage(0, ((2, 1), (1, 1)), 10, 4, 8)
    with pytest.raises(ValueError):
        CompressedMessage.from_bytes(b"\x00" * 5, 10, 1, 4, 8)


# -- protocol ------------------------------------------------------------------------------------


def _toy(seed=0):
    cfg = GameConfig(n=2, a=1, C=10, M=1000, problem="point_query")
    sk_seed = SketchSeed(seed)
    return cfg, (lambda: cfg.sketch.build(sk_seed))


def test_toy_message_size_and_identity_round_trip():
    cfg, fresh = _toy()
    sample = cell_sample_for(fresh())
    assert sample.t_u == 1 and sample.S == 2
    fam = PermutationFamily(2, 4, seed=0, identity_first=True)
    inp = AliceInput((int(sample.covered[0]),))
    msg = compress(fresh, inp, 10, fam, sample)
    assert msg.perm_index == 0
    assert msg.bit_count == ceil_lg(4) + 1 * (1 + 64)
    ops = [("point_query", 0), ("point_query", 1), ("norm", 1), ("heavy_hitter",), ("update", 0, 3),
           ("point_query", 0), ("entropy",)]
    compressed = decompress_and_answer(msg, ops, fam, sample, fresh)
    full = fresh()
    alice_encode(full, inp, 10)
    plain = [None if op[0] == "update" else getattr(full, op[0])(*op[1:]) for op in ops]
    for op in ops:
        if op[0] == "update":
            full.update(*op[1:])
    assert compressed[:4] == plain[:4]
    assert compressed[5] == full.point_query(0)


def test_probe_outside_c_is_a_contract_violation():
    cfg, fresh = _toy()
    sample = cell_sample_for(fresh())
    outside = 1 - int(sample.covered[0])
    fam = PermutationFamily(2, 1, seed=0, identity_first=True)
    with pytest.raises(ContractViolation):
        compress(fresh, AliceInput((outside,)), 10, fam, sample, perm_index=0)


def test_bad_perm_index_rejected_by_bob():
    cfg, fresh = _toy()
    sample = cell_sample_for(fresh())
    msg = CompressedMessage(3, ((sample.cells[0], 10),), 4, 2, 64)
    with pytest.raises(ValueError):
        decompress_and_answer(msg, [], PermutationFamily(2, 2, 0), sample, fresh)


def test_permuted_sketch_maps_heavy_hitters_back():
    base = SketchConfig("exact", 8).build(SketchSeed(0))
    perm = np.array([3, 1, 0, 2, 7, 6, 5, 4])
    view = PermutedSketch(base, perm)
    view.update(0, 50)
    assert base.point_query(3) == 50
    assert view.point_query(0) == 50 and view.heavy_hitter() == 0


def test_heavy_hitter_game_end_to_end():
    cfg = GameConfig(n=64, a=1, C=10, problem="heavy_hitter", trials=30, master_seed=4,
                     sketch={"name": "dyadic_hh", "n": 64, "d": 3, "b": 4})
    report = run_compression_demo(cfg)
    assert report.found == 30
    assert report.non_erring > 0
    assert report.equal_non_erring == report.non_erring
    assert report.max_compressed_bits < report.full_bits
    assert not report.preconditions_met


def test_compressed_point_query_game_matches_uncompressed():
    cfg = GameConfig(n=16, a=1, C=10, problem="point_query", trials=20, master_seed=1)
    report = run_compression_demo(cfg)
    assert report.found == report.non_erring == report.equal_non_erring == 20


def test_compressed_decode_recovers_alice_input():
    cfg = GameConfig(n=64, a=4, C=10, problem="lp_norm", sketch={"name": "stable_l1", "n": 64})
    sk_seed = SketchSeed(12)

    def fresh():
        return cfg.sketch.build(sk_seed)

    sample = cell_sample_for(fresh())
    assert sample.size == 64
    fam = PermutationFamily(64, required_family_size(64, 4, sample.S, sample.t_u), seed=1)
    inp = AliceInput((10, 20, 30, 40))
    msg = compress(fresh, inp, 10, fam, sample)
    res = compressed_decode(msg, cfg, fam, fresh, truth=inp)
    full = fresh()
    plain = bob_decode(alice_encode(full, inp, 10), cfg, truth=inp)
    assert res.query_errors == plain.query_errors == 0
    assert res.recovered == plain.recovered == [40, 30, 20, 10]
    assert res.transcript == plain.transcript


# -- permutation invariance --------------------------------------------------------------------


@pytest.mark.parametrize("problem", ["point_query", "lp_norm", "entropy", "heavy_hitter"])
def test_exact_queries_commute_with_relabeling(problem):
    assert permutation_invariance_check(problem, trials=200, seed=1) == 0
