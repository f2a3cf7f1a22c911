"""Seed derivation and hash families shared by every sketch.

All randomness in the package flows from a 64-bit master seed.  Sub-seeds are
derived by hashing the master seed together with a tuple of labels, so the
value for ``("trial", 17, "sketch")`` never depends on which other labels were
derived first or on which thread asked.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

# Mersenne prime 2^31 - 1: products of two residues fit in a uint64, so
# polynomial hashing vectorises without 128-bit arithmetic.
PRIME = (1 << 31) - 1

_GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(master: int, *labels: object) -> int:
    payload = repr((int(master) & MASK64, labels)).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class SketchSeed:
    """A master seed plus label-based derivation of sub-seeds."""

    master_seed: int

    def __post_init__(self) -> None:
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")

    def derive(self, *labels: object) -> int:
        return derive_seed(self.master_seed, *labels)

    def child(self, *labels: object) -> SketchSeed:
        return SketchSeed(self.derive(*labels))

    def rng(self, *labels: object) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.derive(*labels)))


class PolyHash:
    """k-wise independent hash: a random degree-(k-1) polynomial over GF(2^31 - 1)."""

    def __init__(self, k: int, rng: np.random.Generator) -> None:
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.coeffs = [int(c) for c in rng.integers(0, PRIME, size=k)]
        self._coeffs_u64 = np.array(self.coeffs, dtype=np.uint64)

    def __call__(self, x: int) -> int:
        acc = 0
        for c in self.coeffs:
            acc = (acc * x + c) % PRIME
        return acc

    def many(self, xs: np.ndarray) -> np.ndarray:
        x = np.asarray(xs, dtype=np.uint64) % np.uint64(PRIME)
        acc = np.zeros(x.shape, dtype=np.uint64)
        p = np.uint64(PRIME)
        for c in self._coeffs_u64:
            acc = (acc * x + c) % p
        return acc


def splitmix64(z: np.ndarray) -> np.ndarray:
    """Vectorised SplitMix64 finaliser (wrapping uint64 arithmetic)."""
    z = np.array(z, dtype=np.uint64, copy=True, ndmin=1)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def uniform53(keys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Uniform values in (0, 1) from 53 hashed bits of each (key, x) pair.

    ``keys`` and ``xs`` broadcast against each other.  The result is a pure
    function of its inputs, so coefficients can be regenerated on demand
    instead of being stored.
    """
    k = np.array(keys, dtype=np.uint64, ndmin=1)
    x = np.array(xs, dtype=np.uint64, ndmin=1)
    z = k + (x + np.uint64(1)) * np.uint64(_GOLDEN)
    bits = splitmix64(z) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0**-53
