"""Dataset files, random-walk generation, streaming builds and index files.

DSIX dataset layout (little-endian)::

    offset  size  field
    0       4     magic  b"DSIX"
    4       2     format version (1)
    6       2     flags (bit 0: z-normalized)
    8       8     series count
    16      4     series length
    20      4     reserved, must be 0
    24      ...   count * length float32 values, row-major

The index file (magic ``b"ISXI"``) stores the tree in pre-order together with
the leaf-ordered entry arrays; see :func:`save_index`.
"""

from __future__ import annotations

import itertools
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import InputError, ISAXWord, SummaryParams, default_table, znormalize_rows
from .index import (
    DEFAULT_LEAF_CAPACITY,
    IndexTree,
    ISAXBufferSet,
    Node,
    construct,
    root_subtree_of,
    summarize_into,
)

MAGIC = b"DSIX"
VERSION = 1
HEADER = struct.Struct("<4sHHQII")
HEADER_SIZE = HEADER.size
FLAG_NORMALIZED = 0x1
KNOWN_FLAGS = FLAG_NORMALIZED

GENERATOR_BLOCK = 1024
DEFAULT_CHUNK_SIZE = 65536


class FormatError(ValueError):
    """A dataset or index file does not match its format."""

    def __init__(self, message: str, offset: int, field: str):
        super().__init__(f"{message} (field {field!r} at byte offset {offset})")
        self.offset = offset
        self.field = field


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class BadFlagsError(FormatError):
    pass


class BadShapeError(FormatError):
    pass


class ReservedFieldError(FormatError):
    pass


class SizeMismatchError(FormatError):
    """File is truncated or has trailing bytes."""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"expected {expected} bytes, file has {actual}", min(expected, actual), "data")
        self.expected = expected
        self.actual = actual


class DatasetIOError(OSError):
    """An I/O failure while reading a dataset, tagged with the file offset."""

    def __init__(self, path, offset: int, cause: Exception):
        super().__init__(f"I/O error reading {path} at byte offset {offset}: {cause}")
        self.offset = offset


@dataclass
class DatasetHeader:
    count: int
    length: int
    flags: int = 0
    version: int = VERSION

    @property
    def normalized(self) -> bool:
        return bool(self.flags & FLAG_NORMALIZED)

    @property
    def file_size(self) -> int:
        return HEADER_SIZE + self.count * self.length * 4

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.flags, self.count, self.length, 0)


@dataclass
class Dataset:
    """An in-memory collection: ``values`` is a ``(count, length)`` float32 array."""

    values: np.ndarray
    flags: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise InputError("dataset values must be 2-d")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return len(self.values)

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def normalized(self) -> bool:
        return bool(self.flags & FLAG_NORMALIZED)

    def znormalized(self) -> "Dataset":
        if self.normalized:
            return self
        values, _ = znormalize_rows(self.values)
        return Dataset(values, self.flags | FLAG_NORMALIZED)


def parse_header(raw: bytes, file_size: int | None = None) -> DatasetHeader:
    """Validate and decode a header; each bad field raises its own error type."""
    if len(raw) < HEADER_SIZE:
        raise SizeMismatchError(HEADER_SIZE, len(raw))
    magic, version, flags, count, length, reserved = HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}", 0, "magic")
    if version != VERSION:
        raise BadVersionError(f"unsupported format version {version}", 4, "version")
    if flags & ~KNOWN_FLAGS:
        raise BadFlagsError(f"unknown flag bits 0x{flags & ~KNOWN_FLAGS:x}", 6, "flags")
    if count == 0:
        raise BadShapeError("series count is zero", 8, "count")
    if length == 0:
        raise BadShapeError("series length is zero", 16, "length")
    if reserved != 0:
        raise ReservedFieldError(f"reserved field is {reserved}, expected 0", 20, "reserved")
    header = DatasetHeader(count, length, flags, version)
    if file_size is not None and file_size != header.file_size:
        raise SizeMismatchError(header.file_size, file_size)
    return header


def write_dataset(path, values, normalized: bool = False, flags: int | None = None) -> DatasetHeader:
    """Write a ``(count, length)`` array as a DSIX file."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
        raise InputError("need a non-empty 2-d array of series")
    if flags is None:
        flags = FLAG_NORMALIZED if normalized else 0
    header = DatasetHeader(values.shape[0], values.shape[1], flags)
    with open(path, "wb") as f:
        f.write(header.pack())
        np.ascontiguousarray(values, dtype="<f4").tofile(f)
    return header


def read_header(path) -> DatasetHeader:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    return parse_header(raw, size)


def load_dataset(path) -> Dataset:
    """Read a DSIX file; round-trips :func:`write_dataset` exactly."""
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(HEADER_SIZE)
        values = np.fromfile(f, dtype="<f4", count=header.count * header.length)
    if values.size != header.count * header.length:
        raise SizeMismatchError(header.file_size, HEADER_SIZE + values.size * 4)
    return Dataset(values.reshape(header.count, header.length).astype(np.float32, copy=False),
                   header.flags)


def random_walks(count: int, length: int, seed: int, first: int = 0) -> np.ndarray:
    """Z-normalized random walks for series ``first .. first+count-1`` of stream ``seed``.

    Series are drawn in fixed blocks of :data:`GENERATOR_BLOCK`, each from its
    own ``SeedSequence`` child, so series ``i`` depends only on
    ``(seed, length, i)``.
    """
    if count < 1 or length < 1:
        raise InputError("count and length must be >= 1")
    out = np.empty((count, length), dtype=np.float32)
    stop = first + count
    block = first // GENERATOR_BLOCK
    while block * GENERATOR_BLOCK < stop:
        b_lo = block * GENERATOR_BLOCK
        lo = max(first, b_lo)
        hi = min(stop, b_lo + GENERATOR_BLOCK)
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))
        steps = gen.standard_normal((hi - b_lo, length))[lo - b_lo:]
        walks = np.cumsum(steps, axis=1)
        out[lo - first:hi - first], _ = znormalize_rows(walks)
        block += 1
    return out


def generate_random_walk(count: int, length: int, seed: int, out_path=None) -> Dataset:
    """Generate a normalized random-walk dataset, optionally writing it as DSIX."""
    ds = Dataset(random_walks(count, length, seed), FLAG_NORMALIZED)
    if out_path is not None:
        write_dataset(out_path, ds.values, flags=ds.flags)
    return ds


FILLING = "filling"
PROCESSING = "processing"
IDLE = "idle"


class DoubleBuffer:
    """Two chunk buffers cycling through ``idle -> filling -> processing -> idle``.

    One coordinator fills; summarization workers only read a buffer while it
    is in the processing state.
    """

    def __init__(self, chunk_series: int, length: int):
        if chunk_series < 1:
            raise InputError("chunk size must be >= 1 series")
        self.buffers = [np.empty((chunk_series, length), dtype=np.float32) for _ in range(2)]
        self.states = [IDLE, IDLE]
        self.counts = [0, 0]
        self.first_ids = [0, 0]
        self._cond = threading.Condition()
        self._next = 0

    @property
    def chunk_series(self) -> int:
        return self.buffers[0].shape[0]

    def acquire_for_fill(self) -> int:
        with self._cond:
            k = self._next
            while self.states[k] != IDLE:
                self._cond.wait()
            assert self.states[1 - k] != FILLING, "both buffers filling"
            self.states[k] = FILLING
            self._next = 1 - k
            return k

    def publish(self, k: int, count: int, first_id: int) -> None:
        with self._cond:
            assert self.states[k] == FILLING
            self.counts[k] = count
            self.first_ids[k] = first_id
            self.states[k] = PROCESSING
            self._cond.notify_all()

    def view(self, k: int, lo: int = 0, hi: int | None = None) -> np.ndarray:
        assert self.states[k] == PROCESSING, "worker read a buffer that is not being processed"
        hi = self.counts[k] if hi is None else hi
        return self.buffers[k][lo:hi]

    def release(self, k: int) -> None:
        with self._cond:
            assert self.states[k] == PROCESSING
            self.states[k] = IDLE
            self._cond.notify_all()

    def wait_idle(self) -> None:
        with self._cond:
            while any(s != IDLE for s in self.states):
                self._cond.wait()


@dataclass
class Timeline:
    """Wall-clock intervals of reads and summarization tasks."""

    reads: list[tuple[float, float]] = field(default_factory=list)
    summaries: list[tuple[float, float]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add_summary(self, start: float, end: float) -> None:
        with self._lock:
            self.summaries.append((start, end))

    @property
    def summarize_busy(self) -> float:
        return sum(e - s for s, e in self.summaries)

    def overlap_seconds(self) -> float:
        """Total time during which a read and a summarization task were both in flight."""
        total = 0.0
        for rs, re_ in self.reads:
            spans = sorted((max(rs, s), min(re_, e)) for s, e in self.summaries if s < re_ and e > rs)
            end = rs
            for s, e in spans:
                s = max(s, end)
                if e > s:
                    total += e - s
                    end = e
        return total


def stream_build(path, params: SummaryParams | None = None, workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK_SIZE,
                 leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
                 timeline: Timeline | None = None) -> IndexTree:
    """Build an index straight from a DSIX file through a double buffer.

    The calling thread acts as coordinator and reads the next chunk while a
    pool of ``workers`` threads summarizes the previous one into iSAX buffers.
    Tree construction then runs as in :func:`isaxsearch.index.build`.
    """
    header = read_header(path)
    if params is None:
        params = SummaryParams(n=header.length)
    if header.length != params.n:
        raise InputError(f"file series length {header.length} != params.n {params.n}")
    table = default_table(params.max_card_bits)
    timeline = timeline if timeline is not None else Timeline()
    chunk_size = max(1, min(chunk_size, header.count))
    dbuf = DoubleBuffer(chunk_size, header.length)
    buffers = ISAXBufferSet(params)

    slots = threading.local()
    slot_counter = itertools.count()
    errors: list[BaseException] = []
    row_bytes = header.length * 4

    def summarize_task(k: int, lo: int, hi: int, done) -> None:
        start = time.perf_counter()
        try:
            if not hasattr(slots, "id"):
                slots.id = next(slot_counter)
            summarize_into(buffers, slots.id, dbuf.view(k, lo, hi), dbuf.first_ids[k] + lo, table)
        except BaseException as exc:  # surfaced by the coordinator
            errors.append(exc)
        finally:
            timeline.add_summary(start, time.perf_counter())
            done()

    start = time.perf_counter()
    with open(path, "rb", buffering=0) as f, ThreadPoolExecutor(max_workers=workers) as pool:
        f.seek(HEADER_SIZE)
        for first in range(0, header.count, chunk_size):
            if errors:
                break
            count = min(chunk_size, header.count - first)
            k = dbuf.acquire_for_fill()
            offset = HEADER_SIZE + first * row_bytes
            r0 = time.perf_counter()
            try:
                target = memoryview(dbuf.buffers[k][:count]).cast("B")
                got = 0
                while got < len(target):
                    n = f.readinto(target[got:])
                    if not n:
                        raise SizeMismatchError(header.file_size, offset + got)
                    got += n
            except OSError as exc:
                raise DatasetIOError(path, offset, exc) from exc
            timeline.reads.append((r0, time.perf_counter()))
            dbuf.publish(k, count, first)

            parts = [(int(a), int(b)) for a, b in
                     zip(np.linspace(0, count, workers + 1)[:-1], np.linspace(0, count, workers + 1)[1:])
                     if int(b) > int(a)]
            remaining = [len(parts)]
            lock = threading.Lock()

            def done(k=k, remaining=remaining, lock=lock):
                with lock:
                    remaining[0] -= 1
                    last = remaining[0] == 0
                if last:
                    dbuf.release(k)

            for lo, hi in parts:
                pool.submit(summarize_task, k, lo, hi, done)
        dbuf.wait_idle()
    if errors:
        raise errors[0]
    summarize_seconds = time.perf_counter() - start

    tree = construct(buffers, params, workers, leaf_capacity, table)
    tree.stats.summarize_seconds = summarize_seconds
    return tree


INDEX_MAGIC = b"ISXI"
INDEX_VERSION = 1
INDEX_HEADER = struct.Struct("<4sHHIIIIQQQ")


def save_index(tree: IndexTree, path) -> None:
    """Serialize ``tree``: header, root table, pre-order node table, leaf-ordered entries."""
    params = tree.params
    w = params.w
    nodes: list[Node] = []
    index_of: dict[int, int] = {}
    for node in tree.nodes():
        index_of[id(node)] = len(nodes)
        nodes.append(node)
    m = len(nodes)
    symbols = np.zeros((m, w), dtype="<u2")
    cards = np.zeros((m, w), dtype="u1")
    left = np.full(m, -1, dtype="<i8")
    right = np.full(m, -1, dtype="<i8")
    split = np.full(m, -1, dtype="<i2")
    overflow = np.zeros(m, dtype="u1")
    entry_off = np.zeros(m, dtype="<i8")
    entry_cnt = np.zeros(m, dtype="<i8")
    words_parts, id_parts = [], []
    offset = 0
    for i, node in enumerate(nodes):
        symbols[i] = node.word.symbols
        cards[i] = node.word.card_bits
        if node.children is not None:
            left[i] = index_of[id(node.children[0])]
            right[i] = index_of[id(node.children[1])]
            split[i] = node.split_segment
        else:
            overflow[i] = node.overflow
            entry_off[i] = offset
            entry_cnt[i] = node.size
            words_parts.append(node.words)
            id_parts.append(node.ids)
            offset += node.size
    root_ids = np.asarray(tree.root_ids(), dtype="<i8")
    root_nodes = np.asarray([index_of[id(tree.root_children[r])] for r in tree.root_ids()], dtype="<i8")
    words = np.concatenate(words_parts).astype("<u2") if words_parts else np.zeros((0, w), "<u2")
    ids = np.concatenate(id_parts).astype("<i8") if id_parts else np.zeros(0, "<i8")
    with open(path, "wb") as f:
        f.write(INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, 0, w, params.max_card_bits,
                                  params.n, tree.leaf_capacity, m, len(ids), len(root_ids)))
        for arr in (root_ids, root_nodes, symbols, cards, left, right, split, overflow,
                    entry_off, entry_cnt, words, ids):
            f.write(np.ascontiguousarray(arr).tobytes())


def load_index(path, validate_sample: int = 256, seed: int = 0) -> IndexTree:
    """Load an index written by :func:`save_index`.

    Path containment is checked for every entry of up to ``validate_sample``
    randomly chosen leaves; a violation raises :class:`FormatError`.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < INDEX_HEADER.size:
        raise SizeMismatchError(INDEX_HEADER.size, len(raw))
    magic, version, _, w, maxb, n, cap, m, n_entries, n_roots = INDEX_HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise BadMagicError(f"bad index magic {magic!r}", 0, "magic")
    if version != INDEX_VERSION:
        raise BadVersionError(f"unsupported index version {version}", 4, "version")
    params = SummaryParams(w=w, max_card_bits=maxb, n=n)
    layout = [("root_ids", "<i8", (n_roots,)), ("root_nodes", "<i8", (n_roots,)),
              ("symbols", "<u2", (m, w)), ("cards", "u1", (m, w)), ("left", "<i8", (m,)),
              ("right", "<i8", (m,)), ("split", "<i2", (m,)), ("overflow", "u1", (m,)),
              ("entry_off", "<i8", (m,)), ("entry_cnt", "<i8", (m,)),
              ("words", "<u2", (n_entries, w)), ("ids", "<i8", (n_entries,))]
    arrays = {}
    pos = INDEX_HEADER.size
    for name, dt, shape in layout:
        size = int(np.prod(shape)) * np.dtype(dt).itemsize
        if pos + size > len(raw):
            raise SizeMismatchError(pos + size, len(raw))
        arrays[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += size
    if pos != len(raw):
        raise SizeMismatchError(pos, len(raw))

    tree = IndexTree(params, cap)
    table = tree.table
    words = arrays["words"].astype(np.uint16)
    ids = arrays["ids"].astype(np.int64)
    built: list[Node | None] = [None] * m
    for i in range(m - 1, -1, -1):
        word = ISAXWord(arrays["symbols"][i], arrays["cards"][i])
        if arrays["left"][i] < 0:
            lo = int(arrays["entry_off"][i])
            hi = lo + int(arrays["entry_cnt"][i])
            node = Node(word, table, ids[lo:hi], words[lo:hi])
            node.overflow = bool(arrays["overflow"][i])
            tree.overflow_leaves += node.overflow
        else:
            node = Node(word, table)
            node.children = (built[int(arrays["left"][i])], built[int(arrays["right"][i])])
            node.split_segment = int(arrays["split"][i])
            node.size = node.children[0].size + node.children[1].size
        built[i] = node
    for rid, ni in zip(arrays["root_ids"], arrays["root_nodes"]):
        node = built[int(ni)]
        if root_subtree_of(node.word) != int(rid):
            raise FormatError(f"root child {rid} has a mismatched region", INDEX_HEADER.size, "root_ids")
        tree.root_children[int(rid)] = node
    tree.n_series = n_entries

    _validate_sample(tree, validate_sample, seed)
    return tree


def _validate_sample(tree: IndexTree, sample: int, seed: int) -> None:
    maxb = tree.params.max_card_bits
    rng = np.random.default_rng(seed)
    paths: list[tuple[Node, list[Node]]] = []
    for rid in tree.root_ids():
        stack = [(tree.root_children[rid], [])]
        while stack:
            node, path = stack.pop()
            if node.children is None:
                paths.append((node, path + [node]))
            else:
                stack.extend((c, path + [node]) for c in node.children)
    picks = rng.choice(len(paths), size=min(sample, len(paths)), replace=False) if paths else []
    for p in picks:
        leaf, path = paths[int(p)]
        for anc in path:
            shift = (maxb - anc.word.card_bits).astype(np.uint16)
            if not np.all((leaf.words >> shift) == anc.word.symbols):
                raise FormatError("path-containment invariant violated in index file",
                                  INDEX_HEADER.size, "nodes")
