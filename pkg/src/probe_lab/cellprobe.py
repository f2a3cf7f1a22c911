"""Word-level memory with probe accounting and the non-adaptive sketch contract.

Every sketch in the package stores its state in a :class:`MemoryImage` of
``S`` words of ``w`` bits.  All reads and writes go through the image, which
appends them to a probe log, so update cost is measured rather than assumed.

Counters that need more than ``w`` bits span several adjacent words (limbs),
held in two's complement over ``limbs * w`` bits and counted toward ``S``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .hashing import SketchSeed

READ = "read"
WRITE = "write"


class ConfigError(ValueError):
    """A parameter set that violates a documented constraint."""


class ContractViolation(RuntimeError):
    """A sketch probed memory it promised not to touch."""


class ProbeEvent(NamedTuple):
    op_id: int
    cell: int
    kind: str


class ProbeLog:
    """Append-only log of probes, stored as runs of cells for speed.

    A run is ``(op_id, kind, cells)`` where ``cells`` is an int or an integer
    array; ``len(log)`` counts individual cell touches. Runs live in three
    parallel lists so logging allocates no per-run container objects.
    """

    def __init__(self) -> None:
        self._ops: list[int] = []
        self._kinds: list[str] = []
        self._cells: list[object] = []
        self._count = 0

    def append(self, op_id: int, kind: str, cells) -> None:
        if type(cells) is int:
            self._count += 1
        elif type(cells) is np.ndarray:
            self._count += cells.size
        elif isinstance(cells, np.integer):
            cells = int(cells)
            self._count += 1
        else:
            self._count += int(np.size(cells))
        self._ops.append(op_id)
        self._kinds.append(kind)
        self._cells.append(cells)

    def __len__(self) -> int:
        return self._count

    def mark(self) -> int:
        return len(self._cells)

    def events(self, start: int = 0) -> Iterator[ProbeEvent]:
        for op_id, kind, cells in zip(self._ops[start:], self._kinds[start:], self._cells[start:]):
            if isinstance(cells, int):
                yield ProbeEvent(op_id, cells, kind)
            else:
                for c in np.ravel(cells).tolist():
                    yield ProbeEvent(op_id, c, kind)

    __iter__ = events

    def cells_since(self, start: int) -> set[int]:
        out: set[int] = set()
        for cells in self._cells[start:]:
            if type(cells) is int:
                out.add(cells)
            elif type(cells) is np.ndarray:
                out.update(cells.ravel().tolist())
            else:
                out.update(np.ravel(cells).tolist())
        return out

    def count_since(self, start: int) -> int:
        return sum(1 if type(c) is int else int(np.size(c)) for c in self._cells[start:])

    def clear(self) -> None:
        self._ops.clear()
        self._kinds.clear()
        self._cells.clear()
        self._count = 0


class MemoryImage:
    """``S`` words of ``w`` bits; every access is logged."""

    def __init__(self, w: int = 64) -> None:
        if not 1 <= w <= 64:
            raise ConfigError(f"word size must be in [1, 64], got {w}")
        self.w = w
        self.mask = (1 << w) - 1
        self._mask_u64 = np.uint64(self.mask)
        self.words = np.zeros(0, dtype=np.uint64)
        self.probe_log = ProbeLog()
        self.op_id = 0
        self._all: np.ndarray | None = None

    @property
    def S(self) -> int:
        return len(self.words)

    def __len__(self) -> int:
        return len(self.words)

    def allocate(self, count: int) -> int:
        """Reserve ``count`` zeroed words; returns the offset of the first."""
        offset = len(self.words)
        self.words = np.concatenate([self.words, np.zeros(count, dtype=np.uint64)])
        self._all = None
        return offset

    def all_cells(self) -> np.ndarray:
        if self._all is None or len(self._all) != len(self.words):
            self._all = np.arange(len(self.words), dtype=np.int64)
        return self._all

    def begin_op(self) -> int:
        self.op_id += 1
        return self.op_id

    def read(self, cell: int) -> int:
        self.probe_log.append(self.op_id, READ, cell)
        return int(self.words[cell])

    def write(self, cell: int, value: int) -> None:
        if not 0 <= value <= self.mask:
            raise OverflowError(f"value {value} does not fit in a {self.w}-bit word")
        self.probe_log.append(self.op_id, WRITE, cell)
        self.words[cell] = value

    def touch_many(self, cells: np.ndarray) -> None:
        """Log reads of ``cells`` without copying their contents out."""
        self.probe_log.append(self.op_id, READ, cells)

    def read_many(self, cells: np.ndarray) -> np.ndarray:
        self.probe_log.append(self.op_id, READ, cells)
        return self.words[cells]

    def write_many(self, cells: np.ndarray, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.uint64)
        if self.w < 64 and np.any(values > self._mask_u64):
            raise OverflowError(f"value does not fit in a {self.w}-bit word")
        self.probe_log.append(self.op_id, WRITE, cells)
        self.words[cells] = values

    def load(self, words) -> None:
        """Replace the contents wholesale (state transfer, not a probe)."""
        arr = np.asarray(words, dtype=np.uint64)
        if arr.shape != self.words.shape:
            raise ValueError(f"expected {self.S} words, got {arr.shape}")
        if self.w < 64 and np.any(arr > self._mask_u64):
            raise OverflowError("word exceeds word size")
        self.words = arr.copy()

    def pack_words(self) -> bytes:
        return pack_words(self.words, self.w)


def pack_words(words: np.ndarray, w: int) -> bytes:
    """Little-endian bit packing of ``w``-bit words; ``ceil(len*w/8)`` bytes."""
    if w in (8, 16, 32, 64):
        return np.asarray(words, dtype=np.uint64).astype(f"<u{w // 8}").tobytes()
    total = 0
    for k, word in enumerate(np.asarray(words).tolist()):
        total |= int(word) << (k * w)
    return total.to_bytes((len(words) * w + 7) // 8, "little")


def unpack_words(data: bytes, count: int, w: int) -> np.ndarray:
    if w in (8, 16, 32, 64):
        return np.frombuffer(data, dtype=f"<u{w // 8}", count=count).astype(np.uint64)
    total = int.from_bytes(data, "little")
    mask = (1 << w) - 1
    return np.array([(total >> (k * w)) & mask for k in range(count)], dtype=np.uint64)


def limbs_for(max_abs: int, w: int) -> int:
    """Words per counter so that values in ``[-max_abs, max_abs]`` never wrap."""
    bits = int(max_abs).bit_length() + 1
    return max(1, -(-bits // w))


class CounterBank:
    """A contiguous block of signed multi-word counters inside a MemoryImage."""

    def __init__(self, memory: MemoryImage, count: int, limbs: int = 1) -> None:
        self.memory = memory
        self.count = count
        self.limbs = limbs
        self.w = memory.w
        self.offset = memory.allocate(count * limbs)
        self.size = count * limbs
        self._modulus = 1 << (self.w * limbs)
        self._limb_offsets = np.arange(limbs, dtype=np.int64)
        self._limb_cells: dict[int, np.ndarray] = {}

    def cells(self, idx) -> np.ndarray:
        """Word cells of the given counters, counter-major, as a flat array."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if self.limbs == 1:
            return self.offset + idx
        return (self.offset + idx[:, None] * self.limbs + self._limb_offsets).reshape(-1)

    def _decode_scalar(self, limbs: list[int]) -> int:
        value = 0
        for k, limb in enumerate(limbs):
            value |= int(limb) << (k * self.w)
        if value >= self._modulus >> 1:
            value -= self._modulus
        return value

    def _encode_scalar(self, value: int) -> list[int]:
        value %= self._modulus
        mask = (1 << self.w) - 1
        return [(value >> (k * self.w)) & mask for k in range(self.limbs)]

    def add(self, idx: np.ndarray, inc) -> None:
        """Add ``inc`` (an int or one int per counter) to counters ``idx``.

        Every word of every addressed counter is read and then written.
        """
        mem = self.memory
        idx = np.asarray(idx, dtype=np.int64)
        incs = [int(inc)] * len(idx) if isinstance(inc, (int, np.integer)) else [int(x) for x in inc]
        if self.limbs == 1:
            cells = self.offset + idx
            old = mem.read_many(cells)
            delta = np.array([x % self._modulus for x in incs], dtype=np.uint64)
            new = old + delta
            if self.w < 64:
                new &= mem._mask_u64
            mem.write_many(cells, new)
            return
        cells = self.cells(idx)
        old = mem.read_many(cells).reshape(len(idx), self.limbs).tolist()
        new = []
        for limbs, x in zip(old, incs):
            new.extend(self._encode_scalar(self._decode_scalar(limbs) + x))
        mem.write_many(cells, np.array(new, dtype=np.uint64))

    def add_one(self, i: int, inc: int) -> None:
        """Scalar form of :meth:`add` for a single counter."""
        mem = self.memory
        start = self.offset + i * self.limbs
        log = mem.probe_log
        if self.limbs == 1:
            # modular result always fits the word, so the write-width check is skipped
            log.append(mem.op_id, READ, start)
            value = (int(mem.words[start]) + inc) % self._modulus
            log.append(mem.op_id, WRITE, start)
            mem.words[start] = value
            return
        cells = self._limb_cells.get(i)
        if cells is None:
            cells = self._limb_cells[i] = np.arange(start, start + self.limbs, dtype=np.int64)
        # contiguous limbs: slice views are much cheaper than fancy indexing
        end = start + self.limbs
        log.append(mem.op_id, READ, cells)
        view = mem.words[start:end]
        log.append(mem.op_id, WRITE, cells)
        if self.w == 64:
            # 64-bit limbs, least significant first, are exactly the little-endian bytes of the counter
            nbytes = 8 * self.limbs
            value = (int.from_bytes(view.astype("<u8").tobytes(), "little") + inc) % self._modulus
            view[:] = np.frombuffer(value.to_bytes(nbytes, "little"), dtype="<u8")
            return
        view[:] = self._encode_scalar(self._decode_scalar(view.tolist()) + inc)

    def values(self, idx) -> np.ndarray:
        """Signed counter values (int64 for single-word counters, float64 otherwise)."""
        idx = np.asarray(idx, dtype=np.int64)
        if self.limbs == 1:
            raw = self.memory.read_many(self.offset + idx)
            return self._signed(raw)
        raw = self.memory.read_many(self.cells(idx.reshape(-1)))
        return self._combine(raw, idx.shape)

    def all_values(self) -> np.ndarray:
        cells = self.memory.all_cells()[self.offset:self.offset + self.size]
        raw = self.memory.read_many(cells)
        if self.limbs == 1:
            return self._signed(raw)
        return self._combine(raw, (self.count,))

    def exact_value(self, i: int) -> int:
        raw = self.memory.read_many(self.cells(i)).tolist()
        return self._decode_scalar(raw)

    def peek_exact(self, i: int) -> int:
        """Decode counter ``i`` without logging (state reconstruction only)."""
        start = self.offset + i * self.limbs
        return self._decode_scalar(self.memory.words[start:start + self.limbs].tolist())

    def _signed(self, raw: np.ndarray) -> np.ndarray:
        if self.w == 64:
            return raw.view(np.int64)
        v = raw.astype(np.int64)
        return np.where(v >= (1 << (self.w - 1)), v - (1 << self.w), v)

    def _combine(self, raw: np.ndarray, shape) -> np.ndarray:
        rows = raw.reshape(-1, self.limbs).tolist()
        return np.array([float(self._decode_scalar(r)) for r in rows], dtype=np.float64).reshape(shape)


@dataclass(frozen=True)
class UpdateFootprint:
    index: int
    cells: frozenset[int]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class SketchDescriptor:
    name: str
    n: int
    S: int
    t_u: int
    w: int
    delta: float

    def __post_init__(self) -> None:
        if self.S < 1 or self.t_u < 1 or self.w < 1:
            raise ConfigError(f"S, t_u, w must be positive: {self}")
        if self.t_u > self.S:
            raise ConfigError(f"t_u={self.t_u} exceeds S={self.S}")
        if not 0.0 <= self.delta <= 0.5:
            raise ConfigError(f"delta must lie in [0, 1/2], got {self.delta}")


class Sketch:
    """Base class for non-adaptive turnstile sketches.

    Subclasses allocate counters on ``self.memory`` in ``__init__`` and
    implement ``_update`` and ``_footprint_cells``.  Composite sketches build
    their parts on a shared image and call the parts' ``_update`` directly so
    that one stream update is one logged operation.
    """

    name = "sketch"
    supports: frozenset[str] = frozenset()

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None,
                 w: int = 64, M: int | None = None) -> None:
        if n < 1:
            raise ConfigError(f"n must be positive, got {n}")
        self.n = n
        self.seed = seed
        self.memory = memory if memory is not None else MemoryImage(w)
        self.w = self.memory.w
        self.M = n**3 if M is None else int(M)
        self._start = len(self.memory)
        self.max_update_probes = 0

    # -- sizes ---------------------------------------------------------------

    @property
    def size(self) -> int:
        """Words allocated by this sketch (its contribution to S)."""
        return self._end - self._start

    def _seal(self) -> None:
        """Close the allocation window; subclasses call this at the end of ``__init__``."""
        self._end = len(self.memory)

    @property
    def t_u(self) -> int:
        raise NotImplementedError

    @property
    def delta(self) -> float:
        raise NotImplementedError

    def descriptor(self) -> SketchDescriptor:
        return SketchDescriptor(self.name, self.n, self.size, self.t_u, self.w, self.delta)

    # -- updates ---------------------------------------------------------------

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} outside [0, {self.n})")

    def update(self, i: int, delta: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} outside [0, {self.n})")
        if abs(delta) > self.M:
            raise OverflowError(f"|delta|={abs(delta)} exceeds magnitude bound M={self.M}")
        log = self.memory.probe_log
        mark, before = log.mark(), log._count
        self.memory.op_id += 1
        self._update(i, int(delta))
        # distinct cells never exceed raw touches, so the set is only built when it could matter
        if log._count - before > self.max_update_probes:
            touched = len(log.cells_since(mark))
            if touched > self.max_update_probes:
                self.max_update_probes = touched

    def _update(self, i: int, delta: int) -> None:
        raise NotImplementedError

    def footprint(self, i: int) -> UpdateFootprint:
        self._check_index(i)
        return UpdateFootprint(i, frozenset(np.asarray(self._footprint_cells(i)).tolist()))

    def _footprint_cells(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def footprint_table(self, indices: np.ndarray) -> np.ndarray:
        """Footprint cells for many indices at once, one row per index."""
        return np.array([self._footprint_cells(int(i)) for i in indices], dtype=np.int64)

    def _begin_query(self) -> None:
        self.memory.begin_op()

    def load_words(self, words) -> None:
        self.memory.load(words)

    # -- queries (overridden where supported) -------------------------------

    def point_query(self, t: int) -> float:
        raise NotImplementedError(f"{self.name} does not answer point queries")

    def point_query_many(self, ts: np.ndarray) -> np.ndarray:
        return np.array([self.point_query(int(t)) for t in ts])

    def heavy_hitter(self) -> int | None:
        raise NotImplementedError(f"{self.name} does not answer heavy-hitter queries")

    def norm(self, p: int) -> float:
        raise NotImplementedError(f"{self.name} does not estimate l{p}")

    def entropy(self) -> float | None:
        raise NotImplementedError(f"{self.name} does not estimate entropy")


SketchFactory = Callable[[SketchSeed], Sketch]


# -- serialization -------------------------------------------------------------

_MAGIC = b"PLIM"
_HEAD = struct.Struct("<QQIBQ")


@dataclass(frozen=True)
class ImageHeader:
    n: int
    S: int
    t_u: int
    w: int
    master_seed: int
    name: str


def serialize_image(sketch: Sketch) -> bytes:
    """Header (n, S, t_u, w, master_seed, name) then S little-endian w-bit words."""
    mem = sketch.memory
    name = sketch.name.encode()
    head = _HEAD.pack(sketch.n, mem.S, sketch.t_u, mem.w, sketch.seed.master_seed) + struct.pack("<H", len(name)) + name
    return _MAGIC + struct.pack("<I", len(head)) + head + mem.pack_words()


def deserialize_image(data: bytes) -> tuple[ImageHeader, np.ndarray]:
    if data[:4] != _MAGIC:
        raise ValueError("not a memory image")
    (hlen,) = struct.unpack_from("<I", data, 4)
    head = data[8:8 + hlen]
    n, S, t_u, w, seed = _HEAD.unpack_from(head, 0)
    (nlen,) = struct.unpack_from("<H", head, _HEAD.size)
    name = head[_HEAD.size + 2:_HEAD.size + 2 + nlen].decode()
    payload = data[8 + hlen:]
    if len(payload) != (S * w + 7) // 8:
        raise ValueError(f"payload has {len(payload)} bytes, expected {(S * w + 7) // 8}")
    return ImageHeader(n, S, t_u, w, seed, name), unpack_words(payload, S, w)


def payload_bits(sketch: Sketch) -> int:
    return sketch.memory.S * sketch.memory.w


# -- measurement and verification -----------------------------------------------


def measure(sketch: Sketch, chunk: int = 1 << 14) -> SketchDescriptor:
    """Measured S (allocated words) and t_u (largest footprint over all of [n])."""
    t_u = 0
    for start in range(0, sketch.n, chunk):
        table = np.sort(sketch.footprint_table(np.arange(start, min(sketch.n, start + chunk))), axis=1)
        distinct = 1 + np.count_nonzero(np.diff(table, axis=1), axis=1)
        t_u = max(t_u, int(distinct.max()))
    return SketchDescriptor(sketch.name, sketch.n, sketch.size, t_u, sketch.w, sketch.delta)


@dataclass
class NonAdaptivityReport:
    sketch: str
    trials: int
    violations: int = 0
    offenders: list[tuple[int, int]] = field(default_factory=list)
    probe_events: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0


def verify_nonadaptive(factory: SketchFactory, trials: int, seed: int | SketchSeed,
                       max_prior: int = 64, max_delta: int = 1000) -> NonAdaptivityReport:
    """Replay random prior streams and compare each update's probe set to its footprint.

    The footprint is taken from a fresh instance with the same coins, i.e. with
    empty memory.  Probe sets are compared as sets.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    root = seed if isinstance(seed, SketchSeed) else SketchSeed(seed)
    report: NonAdaptivityReport | None = None
    for trial in range(trials):
        coins = root.child("coins", trial)
        rng = root.rng("stream", trial)
        sketch = factory(coins)
        if report is None:
            report = NonAdaptivityReport(sketch.name, trials)
        bound = min(max_delta, sketch.M)
        for _ in range(int(rng.integers(1, max_prior + 1))):
            sketch.update(int(rng.integers(sketch.n)), int(rng.integers(-bound, bound + 1)))
        i = int(rng.integers(sketch.n))
        delta = int(rng.choice([-1, 1]) * rng.integers(1, bound + 1))
        log = sketch.memory.probe_log
        mark = log.mark()
        sketch.update(i, delta)
        probed = log.cells_since(mark)
        report.probe_events += log.count_since(mark)
        if probed != set(factory(coins).footprint(i).cells):
            report.violations += 1
            report.offenders.append((trial, i))
    assert report is not None
    return report


class AdaptiveMock(Sketch):
    """Deliberately adaptive fixture: the cell it updates depends on memory contents.

    Cell 0 holds a running total; an update to ``i`` then touches cell
    ``(total + i) mod S``.  With empty memory that is ``i mod S``.
    """

    name = "adaptive_mock"

    def __init__(self, n: int, seed: SketchSeed, memory: MemoryImage | None = None,
                 w: int = 64, M: int | None = None, S: int = 16) -> None:
        super().__init__(n, seed, memory, w, M)
        self.bank = CounterBank(self.memory, S)
        self._seal()

    @property
    def t_u(self) -> int:
        return 2

    @property
    def delta(self) -> float:
        return 0.0

    def _update(self, i: int, delta: int) -> None:
        total = int(self.bank.values(np.array([0]))[0])
        self.bank.add(np.array([0]), delta)
        target = (total + i) % self.bank.count
        self.bank.add(np.array([target]), delta)

    def _footprint_cells(self, i: int) -> np.ndarray:
        return self.bank.cells(np.array(sorted({0, i % self.bank.count})))
