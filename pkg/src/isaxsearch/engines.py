"""Exact 1-NN query answering over an iSAX index.

Three parallel engines share the same skeleton: an approximate descent of the
tree seeds the best-so-far (BSF) answer, lower bounds prune what cannot beat
it, and real distances (with early abandoning) refine it.

* :func:`exact_search_tree` -- node-level pruning while traversing the tree,
  surviving leaves ordered through a set of concurrent priority queues.
* :func:`exact_search_flatscan` -- a parallel scan of the collection-order
  summary array builds a candidate list, then workers refine it.
* :func:`exact_search_batched` -- whole root subtrees are pruned first, then
  a producer computes bounds block-by-block over the leaf-ordered array and
  hands survivors to consumer workers through a bounded channel.

All comparisons happen in squared-distance space; results report true
distances.  Ties go to the lowest series id.
"""

from __future__ import annotations

import heapq
import itertools
import math
import queue
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import InputError, SummaryParams, compute_paa, default_table, isax_rows
from .index import (
    IndexTree,
    LeafOrderedSummaryArray,
    Node,
    SAXArray,
    node_mindist_sq,
    root_ids_of,
)

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_CHANNEL_CAPACITY = 4
FLATSCAN_CANDIDATE_BLOCK = 2048
# root children bounded per vectorized step of the tree traversal
ROOT_CHUNK = 512


@dataclass
class SearchStats:
    real_distances: int = 0
    lower_bounds: int = 0
    approx_real_distances: int = 0
    n_series: int = 0
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def pruning_ratio(self) -> float:
        """Fraction of the collection that never needed a real distance."""
        if not self.n_series:
            return 0.0
        return 1.0 - (self.real_distances + self.approx_real_distances) / self.n_series

    def as_dict(self) -> dict:
        out = {
            "real_distances": self.real_distances,
            "approx_real_distances": self.approx_real_distances,
            "lower_bounds": self.lower_bounds,
            "pruning_ratio": self.pruning_ratio,
            "wall_seconds": self.wall_seconds,
        }
        for k, v in self.extra.items():
            if isinstance(v, (int, float, str, bool)):
                out[k] = v
        return out


@dataclass
class QueryResult:
    series_id: int
    distance: float
    stats: SearchStats = field(default_factory=SearchStats)


class SharedBSF:
    """Best-so-far ``(squared distance, id)`` with linearizable compare-and-lower.

    Readers see a consistent pair through :attr:`value`; writers serialize on
    a lock.  With ``log=True`` every accepted update is appended to
    :attr:`history`.
    """

    __slots__ = ("_value", "_lock", "history")

    def __init__(self, sq: float = math.inf, series_id: int = -1, log: bool = False):
        self._value = (float(sq), int(series_id))
        self._lock = threading.Lock()
        self.history: list[tuple[float, int]] | None = [self._value] if log else None

    @property
    def value(self) -> tuple[float, int]:
        return self._value

    @property
    def sq(self) -> float:
        return self._value[0]

    def update(self, sq: float, series_id: int) -> bool:
        cur = self._value
        # the stored value only decreases, so a stale read can only cause a retry under the lock
        if sq > cur[0] or (sq == cur[0] and series_id >= cur[1]):
            return False
        with self._lock:
            cur_sq, cur_id = self._value
            if sq < cur_sq or (sq == cur_sq and series_id < cur_id):
                self._value = (sq, series_id)
                if self.history is not None:
                    self.history.append(self._value)
                return True
            return False


def bsf_update(shared: SharedBSF, candidate_distance: float, candidate_id: int) -> bool:
    """Lower ``shared`` to the candidate if strictly better (or equal with a lower id)."""
    return shared.update(candidate_distance, candidate_id)


class PriorityQueueSet:
    """``q`` min-heaps keyed by lower bound, each guarded by its own lock.

    Inserts pick two queues at random and push onto the smaller one.
    """

    def __init__(self, q: int, seed: int | None = None):
        if q < 1:
            raise InputError("need at least one priority queue")
        self.q = q
        self._heaps: list[list] = [[] for _ in range(q)]
        self._locks = [threading.Lock() for _ in range(q)]
        self._abandoned = [False] * q
        self._tiebreak = itertools.count()
        self._seed = seed

    def rng(self, worker: int) -> random.Random:
        return random.Random(None if self._seed is None else (self._seed * 1_000_003 + worker))

    def insert(self, bound: float, item, rng: random.Random) -> int:
        a = rng.randrange(self.q)
        b = rng.randrange(self.q)
        k = a if len(self._heaps[a]) <= len(self._heaps[b]) else b
        entry = (bound, next(self._tiebreak), item)
        with self._locks[k]:
            heapq.heappush(self._heaps[k], entry)
        return k

    def pop(self, k: int):
        """Pop the minimal ``(bound, item)`` of queue ``k``, or ``None`` if empty."""
        with self._locks[k]:
            if not self._heaps[k]:
                return None
            bound, _, item = heapq.heappop(self._heaps[k])
        return bound, item

    def abandon(self, k: int) -> None:
        self._abandoned[k] = True

    def is_abandoned(self, k: int) -> bool:
        return self._abandoned[k]

    def sizes(self) -> list[int]:
        return [len(h) for h in self._heaps]


class _Query:
    """Query-side data prepared once per search."""

    __slots__ = ("q32", "paa", "word", "root_id", "lower", "upper", "scale")

    def __init__(self, query, params: SummaryParams):
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (params.n,):
            raise InputError(f"query must have length {params.n}, got shape {q.shape}")
        table = default_table(params.max_card_bits)
        self.q32 = np.ascontiguousarray(q, dtype=np.float32)
        self.paa = compute_paa(q, params)
        self.word = isax_rows(self.paa[None, :], params.max_card_bits, table)[0]
        self.root_id = int(root_ids_of(self.word[None, :], params.max_card_bits)[0])
        self.lower = table.lower(params.max_card_bits)
        self.upper = table.upper(params.max_card_bits)
        self.scale = float(params.segment_length)

    def bounds_sq(self, words: np.ndarray) -> np.ndarray:
        return _kernels.mindist_sq_block(self.paa, words, self.lower, self.upper, self.scale)


def _as_data(dataset, params: SummaryParams | None = None) -> np.ndarray:
    data = np.asarray(dataset)
    if data.dtype != np.float32 or not data.flags.c_contiguous:
        data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError("dataset must be a non-empty 2-d array")
    if params is not None and data.shape[1] != params.n:
        raise InputError(f"dataset rows have length {data.shape[1]}, index expects {params.n}")
    return data


def _run(workers: int, fn, args) -> list:
    if workers == 1:
        return [fn(a) for a in args]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args))


def _descend(tree: IndexTree, qp: _Query) -> Node:
    params = tree.params
    node = tree.root_children.get(qp.root_id)
    if node is None or node.size == 0:
        candidates = [n for n in tree.root_children.values() if n.size > 0]
        if not candidates:
            raise InputError("cannot search an empty tree")
        node = min(candidates, key=lambda n: (node_mindist_sq(qp.paa, n, params), n.word.symbols.tobytes()))
    maxb = params.max_card_bits
    while node.children is not None:
        seg = node.split_segment
        c = int(node.word.card_bits[seg]) + 1
        bit = (int(qp.word[seg]) >> (maxb - c)) & 1
        child = node.children[bit]
        if child.size == 0:
            child = node.children[1 - bit]
        node = child
    return node


def _approximate(tree: IndexTree, data: np.ndarray, qp: _Query) -> tuple[float, int, int]:
    leaf = _descend(tree, qp)
    sq, sid, started = _kernels.scan_nearest(data, leaf.ids, qp.q32, math.inf, -1)
    return float(sq), int(sid), int(started)


def approximate_search(tree: IndexTree, dataset, query) -> tuple[int, float]:
    """Descend to the leaf matching the query and return its nearest series.

    The result is an upper bound on the exact nearest-neighbor distance.
    """
    data = _as_data(dataset, tree.params)
    qp = _Query(query, tree.params)
    sq, sid, _ = _approximate(tree, data, qp)
    return sid, math.sqrt(sq)


def _refine(data: np.ndarray, qp: _Query, ids: np.ndarray, bounds: np.ndarray,
            bsf: SharedBSF) -> int:
    """Real distances for ``ids`` whose bound still beats the BSF; returns the count started."""
    cur_sq, cur_id = bsf.value
    keep = bounds < cur_sq
    if not keep.all():
        ids = ids[keep]
    if len(ids) == 0:
        return 0
    sq, sid, started = _kernels.scan_nearest(data, ids, qp.q32, cur_sq, cur_id)
    if sid != cur_id or sq != cur_sq:
        bsf.update(float(sq), int(sid))
    return int(started)


def _seed_bsf(tree: IndexTree, data: np.ndarray, qp: _Query, stats: SearchStats,
              seed_with_approximate: bool, record_bsf: bool) -> SharedBSF:
    if not seed_with_approximate:
        return SharedBSF(log=record_bsf)
    sq, sid, started = _approximate(tree, data, qp)
    stats.approx_real_distances = started
    return SharedBSF(sq, sid, log=record_bsf)


def _finish(bsf: SharedBSF, stats: SearchStats, t0: float) -> QueryResult:
    sq, sid = bsf.value
    stats.wall_seconds = time.perf_counter() - t0
    if bsf.history is not None:
        stats.extra["bsf_history"] = list(bsf.history)
    return QueryResult(int(sid), math.sqrt(sq), stats)


def exact_search_tree(tree: IndexTree, dataset, query, workers: int = 1,
                      q_queues: int | None = None, seed: int | None = 0,
                      record_bsf: bool = False, seed_with_approximate: bool = True) -> QueryResult:
    """Exact 1-NN by node-pruned traversal plus priority-queue refinement."""
    t0 = time.perf_counter()
    params = tree.params
    data = _as_data(dataset, params)
    qp = _Query(query, params)
    stats = SearchStats(n_series=tree.n_series)

    bsf = _seed_bsf(tree, data, qp, stats, seed_with_approximate, record_bsf)

    queues = PriorityQueueSet(q_queues or workers, seed)
    _, roots, _, _ = tree.root_arrays()
    next_chunk = itertools.count()

    def traverse(worker: int) -> tuple[int, int]:
        rng = queues.rng(worker)
        node_bounds = inserted = 0
        while True:
            lo = next(next_chunk) * ROOT_CHUNK
            if lo >= len(roots):
                return node_bounds, inserted
            root_bounds = tree.root_bounds_sq(qp.paa, lo, lo + ROOT_CHUNK)
            node_bounds += len(root_bounds)
            for k in np.flatnonzero(root_bounds < bsf.sq):
                stack = [(float(root_bounds[k]), roots[lo + k])]
                while stack:
                    b, node = stack.pop()
                    if node.size == 0 or b >= bsf.sq:
                        continue
                    if node.children is None:
                        queues.insert(b, node, rng)
                        inserted += 1
                        continue
                    for child in node.children:
                        if child.size:
                            stack.append((node_mindist_sq(qp.paa, child, params), child))
                            node_bounds += 1

    phase1 = _run(workers, traverse, range(workers))
    stats.extra["node_bounds"] = sum(p[0] for p in phase1)
    stats.extra["leaves_queued"] = sum(p[1] for p in phase1)
    stats.extra["queue_sizes"] = queues.sizes()

    def consume(worker: int) -> tuple[int, int]:
        rng = queues.rng(workers + worker)
        others = [k for k in range(queues.q) if k != worker % queues.q]
        rng.shuffle(others)
        order = [worker % queues.q] + others
        lbs = reals = 0
        for k in order:
            while not queues.is_abandoned(k):
                popped = queues.pop(k)
                if popped is None:
                    break
                bound, leaf = popped
                if bound >= bsf.sq:
                    # min-heap: everything left in this queue is prunable too
                    queues.abandon(k)
                    break
                bounds = qp.bounds_sq(leaf.words)
                lbs += len(bounds)
                reals += _refine(data, qp, leaf.ids, bounds, bsf)
        return lbs, reals

    phase2 = _run(workers, consume, range(workers))
    stats.lower_bounds = stats.extra["node_bounds"] + sum(p[0] for p in phase2)
    stats.real_distances = sum(p[1] for p in phase2)
    return _finish(bsf, stats, t0)


def _slices(count: int, parts: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, count, parts + 1).astype(np.int64)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(parts)]


def exact_search_flatscan(tree: IndexTree, sax: SAXArray, dataset, query, workers: int = 1,
                          candidate_block: int = FLATSCAN_CANDIDATE_BLOCK,
                          record_bsf: bool = False,
                          seed_with_approximate: bool = True) -> QueryResult:
    """Exact 1-NN by a parallel summary scan into a candidate list, then refinement.

    The tree is only used to seed the BSF.
    """
    t0 = time.perf_counter()
    params = tree.params
    data = _as_data(dataset, params)
    qp = _Query(query, params)
    stats = SearchStats(n_series=len(sax))

    bsf = _seed_bsf(tree, data, qp, stats, seed_with_approximate, record_bsf)

    chunks = _slices(len(sax), workers)

    def scan(k: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = chunks[k]
        bounds = qp.bounds_sq(sax.words[lo:hi])
        keep = np.flatnonzero(bounds < bsf.sq)
        return sax.ids[lo:hi][keep], bounds[keep]

    parts = _run(workers, scan, range(workers))
    cand_ids = np.concatenate([p[0] for p in parts])
    cand_bounds = np.concatenate([p[1] for p in parts])
    stats.lower_bounds = len(sax)
    stats.extra["candidates"] = len(cand_ids)
    stats.extra["candidate_ids"] = cand_ids

    blocks = _slices(len(cand_ids), max(1, -(-len(cand_ids) // candidate_block)))
    next_block = itertools.count()

    def refine(_: int) -> int:
        reals = 0
        while True:
            b = next(next_block)
            if b >= len(blocks):
                return reals
            lo, hi = blocks[b]
            reals += _refine(data, qp, cand_ids[lo:hi], cand_bounds[lo:hi], bsf)

    stats.real_distances = sum(_run(workers, refine, range(workers)))
    return _finish(bsf, stats, t0)


_DONE = object()


def exact_search_batched(arrays: LeafOrderedSummaryArray, tree: IndexTree, dataset, query,
                         workers: int = 1, block_size: int = DEFAULT_BLOCK_SIZE,
                         channel_capacity: int = DEFAULT_CHANNEL_CAPACITY,
                         record_bsf: bool = False,
                         seed_with_approximate: bool = True) -> QueryResult:
    """Exact 1-NN with root-subtree pre-pruning and a streamed batched bound kernel."""
    if block_size < 1:
        raise InputError("block_size must be >= 1")
    t0 = time.perf_counter()
    params = tree.params
    data = _as_data(dataset, params)
    qp = _Query(query, params)
    stats = SearchStats(n_series=len(arrays))

    bsf = _seed_bsf(tree, data, qp, stats, seed_with_approximate, record_bsf)

    root_ids, _, _, _ = tree.root_arrays()
    root_bounds = tree.root_bounds_sq(qp.paa)
    pos = np.searchsorted(root_ids, arrays.root_ids)
    alive = (arrays.lengths > 0) & (root_bounds[pos] < bsf.sq)
    surviving = [(int(r), int(o), int(n)) for r, o, n in
                 zip(arrays.root_ids[alive], arrays.offsets[alive], arrays.lengths[alive])]
    stats.extra["ranges_total"] = int(np.count_nonzero(arrays.lengths))
    stats.extra["ranges_scanned"] = len(surviving)
    stats.extra["scanned_root_ids"] = [r for r, _, _ in surviving]

    channel: queue.Queue = queue.Queue(maxsize=channel_capacity)
    produced = [0]

    def produce() -> None:
        try:
            for _, off, length in surviving:
                for lo in range(off, off + length, block_size):
                    hi = min(lo + block_size, off + length)
                    bounds = qp.bounds_sq(arrays.words[lo:hi])
                    produced[0] += hi - lo
                    keep = np.flatnonzero(bounds < bsf.sq)
                    if len(keep):
                        channel.put((arrays.ids[lo:hi][keep], bounds[keep]))
        finally:
            for _ in range(workers):
                channel.put(_DONE)

    def consume(_: int) -> int:
        reals = 0
        while True:
            item = channel.get()
            if item is _DONE:
                return reals
            ids, bounds = item
            reals += _refine(data, qp, ids, bounds, bsf)

    producer = threading.Thread(target=produce, name="bound-producer", daemon=True)
    producer.start()
    try:
        stats.real_distances = sum(_run(workers, consume, range(workers)))
    finally:
        producer.join()
    stats.lower_bounds = produced[0] + len(arrays.root_ids)
    stats.extra["summaries_bounded"] = produced[0]
    return _finish(bsf, stats, t0)


def brute_force(dataset, query, chunk: int = 65536) -> QueryResult:
    """Exhaustive scan in float64; lowest id wins ties."""
    t0 = time.perf_counter()
    data = np.asarray(dataset)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InputError("brute_force needs a non-empty 2-d dataset")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (data.shape[1],):
        raise InputError(f"query length {q.shape} does not match series length {data.shape[1]}")
    best_sq, best_id = math.inf, -1
    for lo in range(0, len(data), chunk):
        block = data[lo:lo + chunk].astype(np.float64) - q
        d = np.einsum("ij,ij->i", block, block)
        k = int(np.argmin(d))
        if d[k] < best_sq:
            best_sq, best_id = float(d[k]), lo + k
    stats = SearchStats(real_distances=len(data), n_series=len(data),
                        wall_seconds=time.perf_counter() - t0)
    return QueryResult(best_id, math.sqrt(best_sq), stats)
