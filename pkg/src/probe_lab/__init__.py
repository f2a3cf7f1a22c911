"""Cell-probe simulator for non-adaptive turnstile sketches.

Instrumented sketches, the one-way decoding game, message compression by cell
sampling, and evaluators for update-time lower-bound shapes.
"""

from .bounds import BoundParams, amplify, deterministic_bound, entropy_threshold_validate, randomized_bound
from .cellprobe import (
    ConfigError, ContractViolation, MemoryImage, Sketch, SketchDescriptor, measure, verify_nonadaptive,
)
from .compression import (
    CellSample, CompressedMessage, PermutationFamily, cell_sample, compress, coverage_probability,
    decompress_and_answer, find_covering_permutation, permutation_invariance_check, required_family_size,
)
from .game import AliceInput, GameConfig, Message, alice_encode, bob_decode, run_game
from .hashing import SketchSeed
from .sketches import SKETCHES, SketchConfig

__all__ = [
    "AliceInput", "BoundParams", "CellSample", "CompressedMessage", "ConfigError", "ContractViolation",
    "GameConfig", "MemoryImage", "Message", "PermutationFamily", "SKETCHES", "Sketch", "SketchConfig",
    "SketchDescriptor", "SketchSeed", "alice_encode", "amplify", "bob_decode", "cell_sample", "compress",
    "coverage_probability", "decompress_and_answer", "deterministic_bound", "entropy_threshold_validate",
    "find_covering_permutation", "measure", "permutation_invariance_check", "randomized_bound",
    "required_family_size", "run_game", "verify_nonadaptive",
]
