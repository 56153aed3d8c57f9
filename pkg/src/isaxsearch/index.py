"""The iSAX index tree and its flattened summary arrays.

The root has one child per combination of the segments' leading bits; each
root child is a leaf-oriented binary tree whose internal nodes split one
segment by one extra bit.  Leaves hold ``(word, series id)`` pairs with words
at maximum cardinality; the raw series stay in the dataset array.

Construction runs in two phases separated by a barrier:

1. summarization -- workers take contiguous slices of the dataset, compute
   words and append them to their own per-root-subtree iSAX buffers;
2. tree construction -- root subtrees are dealt to workers (largest first,
   onto the least-loaded worker) and every subtree is built by one worker.
"""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import (
    BreakpointTable,
    InputError,
    ISAXWord,
    SummaryParams,
    default_table,
    summarize,
)

logger = logging.getLogger(__name__)

DEFAULT_LEAF_CAPACITY = 2000


class Node:
    """A region of iSAX space; a leaf when ``children`` is None."""

    __slots__ = ("word", "lower", "upper", "children", "split_segment",
                 "ids", "words", "overflow", "size")

    def __init__(self, word: ISAXWord, table: BreakpointTable, ids=None, words=None):
        self.word = word
        self.lower, self.upper = table.word_bounds(word)
        self.children: tuple[Node, Node] | None = None
        self.split_segment = -1
        self.ids = ids
        self.words = words
        self.overflow = False
        self.size = 0 if ids is None else len(ids)

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def leaves(self) -> Iterator["Node"]:
        stack = [self]
        while stack:
            node = stack.pop()
            if node.children is None:
                yield node
            else:
                stack.append(node.children[1])
                stack.append(node.children[0])

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"split@{self.split_segment}"
        return f"Node({kind}, size={self.size}, cards={self.word.card_bits.tolist()})"


def choose_split_segment(word: ISAXWord, max_card_bits: int) -> int:
    """Lowest-cardinality segment, lowest index on ties; -1 when all are at maximum."""
    cards = word.card_bits
    if np.all(cards >= max_card_bits):
        return -1
    return int(np.argmin(cards))


def split_leaf(leaf: Node, params: SummaryParams, table: BreakpointTable | None = None) -> tuple[Node, Node] | None:
    """Split ``leaf`` by promoting one segment, redistributing its entries.

    Returns the two children, or ``None`` when every segment is already at
    maximum cardinality (the caller keeps the leaf as an overflow leaf).
    The leaf itself becomes internal.
    """
    table = table or default_table(params.max_card_bits)
    seg = choose_split_segment(leaf.word, params.max_card_bits)
    if seg < 0:
        return None
    c = int(leaf.word.card_bits[seg])
    shift = params.max_card_bits - (c + 1)
    bits = (leaf.words[:, seg] >> shift) & 1
    upper_mask = bits.astype(bool)
    left = Node(leaf.word.promote(seg, 0), table,
                leaf.ids[~upper_mask], leaf.words[~upper_mask])
    right = Node(leaf.word.promote(seg, 1), table,
                 leaf.ids[upper_mask], leaf.words[upper_mask])
    leaf.children = (left, right)
    leaf.split_segment = seg
    leaf.ids = None
    leaf.words = None
    return left, right


def build_subtree(root: Node, params: SummaryParams, leaf_capacity: int,
                  table: BreakpointTable) -> int:
    """Split ``root`` until every leaf fits; returns the number of overflow leaves."""
    overflow = 0
    stack = [root]
    while stack:
        node = stack.pop()
        if node.size <= leaf_capacity:
            continue
        kids = split_leaf(node, params, table)
        if kids is None:
            node.overflow = True
            overflow += 1
            continue
        stack.extend(kids)
    return overflow


def root_word(root_id: int, w: int) -> ISAXWord:
    bits = [(root_id >> (w - 1 - i)) & 1 for i in range(w)]
    return ISAXWord.uniform(bits, 1)


def root_subtree_of(word: ISAXWord) -> int:
    """Root-child id: the segments' leading bits packed big-endian."""
    lead = word.symbols >> (word.card_bits.astype(np.uint32) - 1)
    out = 0
    for b in lead:
        out = (out << 1) | int(b)
    return out


def root_ids_of(words: np.ndarray, max_card_bits: int) -> np.ndarray:
    """Vectorized :func:`root_subtree_of` for maximum-cardinality word arrays."""
    w = words.shape[1]
    lead = (words >> (max_card_bits - 1)).astype(np.int64)
    weights = np.left_shift(np.int64(1), np.arange(w - 1, -1, -1, dtype=np.int64))
    return lead @ weights


class ISAXBufferSet:
    """Per ``(root subtree, worker)`` buffers of ``(words, ids)`` chunks.

    A worker only ever appends to its own buffers, so no locking is needed.
    """

    def __init__(self, params: SummaryParams):
        self.params = params
        self._buffers: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = defaultdict(list)

    def add(self, worker: int, words: np.ndarray, ids: np.ndarray) -> None:
        if len(ids) == 0:
            return
        roots = root_ids_of(words, self.params.max_card_bits)
        order = np.argsort(roots, kind="stable")
        roots = roots[order]
        cuts = np.flatnonzero(np.diff(roots)) + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [len(roots)]))
        for s, e in zip(starts, ends):
            sel = order[s:e]
            self._buffers[(int(roots[s]), worker)].append((words[sel], ids[sel]))

    def keys(self):
        return self._buffers.keys()

    def entries(self, subtree: int, worker: int) -> tuple[np.ndarray, np.ndarray]:
        chunks = self._buffers.get((subtree, worker), [])
        if not chunks:
            return (np.empty((0, self.params.w), np.uint16), np.empty(0, np.int64))
        return (np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks]))

    def subtree_counts(self) -> dict[int, int]:
        counts: dict[int, int] = defaultdict(int)
        for (sub, _), chunks in self._buffers.items():
            counts[sub] += sum(len(c[1]) for c in chunks)
        return dict(counts)

    def gather(self, subtree: int) -> tuple[np.ndarray, np.ndarray]:
        """All entries of one subtree across workers, sorted by series id."""
        parts = [self._buffers[k] for k in self._buffers if k[0] == subtree]
        chunks = [c for p in parts for c in p]
        words = np.concatenate([c[0] for c in chunks])
        ids = np.concatenate([c[1] for c in chunks])
        order = np.argsort(ids, kind="stable")
        return words[order], ids[order]

    def by_subtree(self) -> dict[int, list[tuple[np.ndarray, np.ndarray]]]:
        out: dict[int, list] = defaultdict(list)
        for (sub, _), chunks in self._buffers.items():
            out[sub].extend(chunks)
        return out


@dataclass
class BuildStats:
    summarize_seconds: float = 0.0
    construct_seconds: float = 0.0
    workers: int = 1
    subtrees_per_worker: list[int] = field(default_factory=list)
    entries_per_worker: list[int] = field(default_factory=list)


class IndexTree:
    """Root with up to ``2**w`` children, each a leaf-oriented binary subtree."""

    def __init__(self, params: SummaryParams, leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
                 table: BreakpointTable | None = None):
        if leaf_capacity < 1:
            raise InputError("leaf_capacity must be >= 1")
        self.params = params
        self.leaf_capacity = leaf_capacity
        self.table = table or default_table(params.max_card_bits)
        self.root_children: dict[int, Node] = {}
        self.n_series = 0
        self.overflow_leaves = 0
        self.stats = BuildStats()
        self._root_arrays = None

    def __repr__(self):
        return (f"IndexTree(series={self.n_series}, root_children={len(self.root_children)}, "
                f"leaves={sum(1 for _ in self.leaves())}, overflow={self.overflow_leaves})")

    def root_ids(self) -> list[int]:
        return sorted(self.root_children)

    def root_arrays(self) -> tuple[np.ndarray, list[Node], np.ndarray, np.ndarray]:
        """``(root ids, nodes, lower, upper)`` of the root children, ascending by id."""
        if self._root_arrays is None:
            ids = self.root_ids()
            nodes = [self.root_children[r] for r in ids]
            w = self.params.w
            lower = np.array([n.lower for n in nodes]).reshape(len(nodes), w)
            upper = np.array([n.upper for n in nodes]).reshape(len(nodes), w)
            self._root_arrays = (np.asarray(ids, np.int64), nodes, lower, upper)
        return self._root_arrays

    def root_bounds_sq(self, query_paa: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Squared node bounds of root children ``start:stop`` (ascending id order)."""
        _, _, lower, upper = self.root_arrays()
        lo = lower[start:stop]
        hi = upper[start:stop]
        gap = np.maximum(np.maximum(lo - query_paa, query_paa - hi), 0.0)
        return self.params.segment_length * np.einsum("ij,ij->i", gap, gap)

    def leaves(self) -> Iterator[Node]:
        """Leaves in left-to-right order (root children by ascending id)."""
        for rid in self.root_ids():
            yield from self.root_children[rid].leaves()

    def nodes(self) -> Iterator[Node]:
        for rid in self.root_ids():
            stack = [self.root_children[rid]]
            while stack:
                node = stack.pop()
                yield node
                if node.children is not None:
                    stack.append(node.children[1])
                    stack.append(node.children[0])

    def leaf_contents(self) -> set[tuple[bytes, bytes, frozenset]]:
        """Set of ``(region symbols, region cards, id set)`` over all leaves."""
        out = set()
        for leaf in self.leaves():
            out.add((leaf.word.symbols.tobytes(), leaf.word.card_bits.tobytes(),
                     frozenset(leaf.ids.tolist())))
        return out

    def audit(self, words_by_id: np.ndarray | None = None) -> None:
        """Check the structural invariants; raises ``AssertionError`` on violation.

        * every id appears in exactly one leaf;
        * every leaf entry lies in the region of every node on its path;
        * internal nodes hold no entries and children refine the split segment;
        * if ``words_by_id`` is given, stored words match it.
        """
        seen = np.zeros(self.n_series, dtype=np.int64)
        maxb = self.params.max_card_bits
        for rid in self.root_ids():
            root = self.root_children[rid]
            assert root_subtree_of(root.word) == rid, f"root child {rid} has wrong region"
            stack: list[tuple[Node, list[Node]]] = [(root, [])]
            while stack:
                node, path = stack.pop()
                if node.children is None:
                    assert node.ids is not None and node.words is not None
                    seen[node.ids] += 1
                    for anc in path + [node]:
                        shift = (maxb - anc.word.card_bits).astype(np.uint16)
                        assert np.all((node.words >> shift) == anc.word.symbols), \
                            "path containment violated"
                    if words_by_id is not None:
                        assert np.array_equal(words_by_id[node.ids], node.words), \
                            "stored word differs from recomputed word"
                else:
                    assert node.ids is None, "internal node stores entries"
                    left, right = node.children
                    seg = node.split_segment
                    for bit, child in enumerate((left, right)):
                        assert child.word.card_bits[seg] == node.word.card_bits[seg] + 1
                        assert child.word.symbols[seg] == (node.word.symbols[seg] << 1) | bit
                    assert node.size == left.size + right.size
                    stack.append((right, path + [node]))
                    stack.append((left, path + [node]))
        assert np.all(seen == 1), "some series not in exactly one leaf"


def _worker_slices(count: int, workers: int) -> list[tuple[int, int]]:
    bounds = np.linspace(0, count, workers + 1).astype(np.int64)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)]


def summarize_into(buffers: ISAXBufferSet, worker: int, data: np.ndarray, first_id: int,
                   table: BreakpointTable) -> np.ndarray:
    """Summarize ``data`` (ids starting at ``first_id``) into ``worker``'s buffers."""
    words = summarize(data, buffers.params, table)
    ids = np.arange(first_id, first_id + len(data), dtype=np.int64)
    buffers.add(worker, words, ids)
    return words


def assign_subtrees(counts: dict[int, int], workers: int) -> list[list[int]]:
    """Largest subtree first onto the least-loaded worker (ties: lowest worker index)."""
    loads = [0] * workers
    plan: list[list[int]] = [[] for _ in range(workers)]
    for sub, cnt in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        k = min(range(workers), key=lambda i: (loads[i], i))
        plan[k].append(sub)
        loads[k] += cnt
    return plan


def construct(buffers: ISAXBufferSet, params: SummaryParams, workers: int,
              leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
              table: BreakpointTable | None = None) -> IndexTree:
    """Phase 2: build every root subtree from the filled iSAX buffers."""
    tree = IndexTree(params, leaf_capacity, table)
    table = tree.table
    counts = buffers.subtree_counts()
    plan = assign_subtrees(counts, workers)
    grouped = buffers.by_subtree()

    def build_part(subtrees: list[int]) -> tuple[dict[int, Node], int]:
        built = {}
        overflow = 0
        for sub in subtrees:
            chunks = grouped[sub]
            words = np.concatenate([c[0] for c in chunks])
            ids = np.concatenate([c[1] for c in chunks])
            order = np.argsort(ids, kind="stable")
            node = Node(root_word(sub, params.w), table, ids[order], words[order])
            overflow += build_subtree(node, params, leaf_capacity, table)
            built[sub] = node
        return built, overflow

    start = time.perf_counter()
    if workers == 1:
        results = [build_part(plan[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(build_part, plan))
    for built, overflow in results:
        tree.root_children.update(built)
        tree.overflow_leaves += overflow
    tree.n_series = sum(counts.values())
    tree.stats.construct_seconds = time.perf_counter() - start
    tree.stats.workers = workers
    tree.stats.subtrees_per_worker = [len(p) for p in plan]
    tree.stats.entries_per_worker = [sum(counts[s] for s in p) for p in plan]
    if tree.overflow_leaves:
        logger.info("%d overflow leaves (duplicate words at max cardinality)", tree.overflow_leaves)
    return tree


def build(dataset, params: SummaryParams | None = None, workers: int = 1,
          leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
          table: BreakpointTable | None = None) -> IndexTree:
    """Build the index over a ``(count, n)`` array of series.

    Leaf contents are identical for every worker count.
    """
    data = np.asarray(dataset)
    if data.ndim != 2:
        raise InputError("dataset must be a 2-d array of equal-length series")
    if data.shape[0] == 0:
        raise InputError("cannot index an empty dataset")
    if params is None:
        params = SummaryParams(n=data.shape[1])
    if data.shape[1] != params.n:
        raise InputError(f"series length {data.shape[1]} does not match params.n={params.n}")
    if workers < 1:
        raise InputError("workers must be >= 1")
    table = table or default_table(params.max_card_bits)

    buffers = ISAXBufferSet(params)
    start = time.perf_counter()
    slices = _worker_slices(len(data), workers)

    def phase1(k: int) -> None:
        lo, hi = slices[k]
        if hi > lo:
            summarize_into(buffers, k, data[lo:hi], lo, table)

    if workers == 1:
        phase1(0)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(phase1, range(workers)))
    summarize_seconds = time.perf_counter() - start

    tree = construct(buffers, params, workers, leaf_capacity, table)
    tree.stats.summarize_seconds = summarize_seconds
    return tree


def node_mindist_sq(query_paa: np.ndarray, node: Node, params: SummaryParams) -> float:
    q = query_paa
    gap = np.maximum(np.maximum(node.lower - q, q - node.upper), 0.0)
    return float(params.segment_length * np.dot(gap, gap))


def node_mindist(query_paa, node: Node, params: SummaryParams) -> float:
    """Lower bound from the query to anything stored under ``node``."""
    q = np.asarray(query_paa, dtype=np.float64)
    if q.shape != (params.w,):
        raise InputError(f"query PAA must have {params.w} segments")
    return float(np.sqrt(node_mindist_sq(q, node, params)))


@dataclass
class SAXArray:
    """Maximum-cardinality words in collection order; ``ids[i] == i``."""

    words: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class LeafOrderedSummaryArray:
    """Words in leaf order, with one contiguous range per root subtree."""

    words: np.ndarray
    ids: np.ndarray
    root_ids: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return len(self.ids)

    def range_of(self, root_id: int) -> tuple[int, int]:
        k = int(np.searchsorted(self.root_ids, root_id))
        if k >= len(self.root_ids) or self.root_ids[k] != root_id:
            raise KeyError(root_id)
        return int(self.offsets[k]), int(self.lengths[k])


def flatten(tree: IndexTree) -> tuple[SAXArray, LeafOrderedSummaryArray]:
    """Both flattened summary arrays of a built tree."""
    w = tree.params.w
    words_parts, id_parts = [], []
    root_ids, offsets, lengths = [], [], []
    offset = 0
    for rid in tree.root_ids():
        start = offset
        for leaf in tree.root_children[rid].leaves():
            words_parts.append(leaf.words)
            id_parts.append(leaf.ids)
            offset += leaf.size
        root_ids.append(rid)
        offsets.append(start)
        lengths.append(offset - start)
    if words_parts:
        lo_words = np.ascontiguousarray(np.concatenate(words_parts))
        lo_ids = np.concatenate(id_parts)
    else:
        lo_words = np.empty((0, w), np.uint16)
        lo_ids = np.empty(0, np.int64)
    leaf_ordered = LeafOrderedSummaryArray(
        lo_words, lo_ids, np.asarray(root_ids, np.int64),
        np.asarray(offsets, np.int64), np.asarray(lengths, np.int64))

    sax_words = np.empty_like(lo_words)
    sax_words[lo_ids] = lo_words
    sax = SAXArray(sax_words, np.arange(len(lo_ids), dtype=np.int64))
    return sax, leaf_ordered
