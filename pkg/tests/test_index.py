import numpy as np
import pytest

from isaxsearch.core import InputError, ISAXWord, SummaryParams, compute_paa, default_table, mindist, summarize
from isaxsearch.index import (
    ISAXBufferSet,
    Node,
    assign_subtrees,
    build,
    choose_split_segment,
    flatten,
    node_mindist,
    root_ids_of,
    root_subtree_of,
    root_word,
    split_leaf,
)
from isaxsearch.io import random_walks


def test_root_subtree_examples():
    assert root_subtree_of(ISAXWord.uniform([0, 1], 2)) == 0
    assert root_subtree_of(ISAXWord.uniform([2, 1], 2)) == 2
    assert root_subtree_of(ISAXWord([1, 0], [1, 1])) == 2
    assert root_subtree_of(ISAXWord([5, 3], [3, 2])) == 3


def test_root_ids_reach_all_subtrees():
    rng = np.random.default_rng(0)
    words = rng.integers(0, 256, size=(5000, 4)).astype(np.uint16)
    ids = root_ids_of(words, 8)
    assert set(ids.tolist()) == set(range(16))
    for word, rid in zip(words[:200], ids[:200]):
        assert root_subtree_of(ISAXWord.uniform(word, 8)) == rid


def test_single_leaf_tree():
    p = SummaryParams(w=4, max_card_bits=8, n=32)
    base = np.linspace(-1.0, 1.0, 32)
    data = base + 1e-3 * np.random.default_rng(1).standard_normal((10, 32))
    tree = build(data, p, leaf_capacity=10)
    leaves = list(tree.leaves())
    assert len(tree.root_children) == 1
    assert len(leaves) == 1
    assert sorted(leaves[0].ids.tolist()) == list(range(10))


@pytest.mark.parametrize("workers", [2, 8])
def test_leaf_contents_independent_of_workers(small_data, small_params, workers):
    ref = build(small_data, small_params, workers=1, leaf_capacity=50).leaf_contents()
    assert build(small_data, small_params, workers=workers, leaf_capacity=50).leaf_contents() == ref


def test_full_audit(small_tree, small_data, small_params):
    small_tree.audit(words_by_id=summarize(small_data, small_params))
    assert small_tree.n_series == len(small_data)


def test_build_errors(small_params):
    with pytest.raises(InputError):
        build(np.empty((0, 64)), small_params)
    with pytest.raises(InputError):
        build(np.zeros((4, 32)), small_params)
    with pytest.raises(InputError):
        build(np.zeros(64), small_params)


def _leaf(words, params, root=0):
    table = default_table(params.max_card_bits)
    words = np.asarray(words, dtype=np.uint16)
    return Node(root_word(root, params.w), table, np.arange(len(words), dtype=np.int64), words)


def test_split_identical_entries_overflow():
    p = SummaryParams(w=2, max_card_bits=3, n=8)
    data = np.tile(np.array([1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]), (7, 1))
    tree = build(data, p, leaf_capacity=3)
    leaves = [lf for lf in tree.leaves() if lf.size]
    assert len(leaves) == 1 and leaves[0].overflow and leaves[0].size == 7
    assert tree.overflow_leaves == 1
    assert leaves[0].word.card_bits.tolist() == [3, 3]


def test_split_two_clusters_on_segment0_second_bit():
    p = SummaryParams(w=2, max_card_bits=4, n=8)
    # both clusters share leading bits; segment 0's second bit differs
    words = [[0b1000, 0b1000]] * 3 + [[0b1100, 0b1000]] * 3
    leaf = _leaf(words, p, root=0b11)
    assert choose_split_segment(leaf.word, 4) == 0
    left, right = split_leaf(leaf, p)
    assert left.size == 3 and right.size == 3
    assert left.word.card_bits.tolist() == [2, 1]
    assert left.word.symbols.tolist() == [0b10, 1]
    assert right.word.symbols.tolist() == [0b11, 1]


def test_split_partition_property():
    p = SummaryParams(w=4, max_card_bits=8, n=32)
    rng = np.random.default_rng(3)
    words = rng.integers(0, 128, size=(40, 4)).astype(np.uint16)
    leaf = _leaf(words, p)
    parent_word = leaf.word
    left, right = split_leaf(leaf, p)
    assert parent_word.contains(left.word) and parent_word.contains(right.word)
    assert set(left.ids) | set(right.ids) == set(range(40))
    assert not set(left.ids) & set(right.ids)
    assert leaf.ids is None


def test_split_segment_policy():
    w = ISAXWord([1, 3, 1, 0], [1, 2, 1, 1])
    assert choose_split_segment(w, 8) == 0
    w = ISAXWord([3, 3, 1, 0], [2, 2, 2, 1])
    assert choose_split_segment(w, 8) == 3
    assert choose_split_segment(ISAXWord.uniform([0, 0], 8), 8) == -1


def test_buffer_locality(small_data, small_params):
    bufs = ISAXBufferSet(small_params)
    words = summarize(small_data, small_params)
    half = len(words) // 2
    bufs.add(0, words[:half], np.arange(half))
    bufs.add(1, words[half:], np.arange(half, len(words)))
    total = 0
    for sub, worker in bufs.keys():
        w, ids = bufs.entries(sub, worker)
        assert np.all(root_ids_of(w, small_params.max_card_bits) == sub)
        assert np.all((ids < half) if worker == 0 else (ids >= half))
        total += len(ids)
    assert total == len(words)
    g_words, g_ids = bufs.gather(next(iter(bufs.keys()))[0])
    assert np.all(np.diff(g_ids) > 0)


def test_assign_subtrees_greedy():
    plan = assign_subtrees({0: 10, 1: 9, 2: 2, 3: 2, 4: 1}, 2)
    loads = [sum({0: 10, 1: 9, 2: 2, 3: 2, 4: 1}[s] for s in part) for part in plan]
    assert sorted(loads) == [12, 12]


class TestNodeMindist:
    def test_query_root_child_is_zero(self, small_tree, small_data, small_params):
        q = small_data[17].astype(np.float64)
        paa = compute_paa(q, small_params)
        word = summarize(small_data[17:18], small_params)
        node = small_tree.root_children[int(root_ids_of(word, small_params.max_card_bits)[0])]
        assert node_mindist(paa, node, small_params) == 0.0

    def test_bounds_descendants_and_monotone(self, small_tree, small_params):
        rng = np.random.default_rng(4)
        maxb = small_params.max_card_bits
        for _ in range(5):
            q = random_walks(1, 64, seed=int(rng.integers(1 << 30)))[0]
            paa = compute_paa(q, small_params)
            stack = [(n, 0.0) for n in small_tree.root_children.values()]
            while stack:
                node, parent_bound = stack.pop()
                b = node_mindist(paa, node, small_params)
                assert b >= parent_bound - 1e-12
                if node.children is None:
                    for wd in node.words[:20]:
                        assert b <= mindist(paa, ISAXWord.uniform(wd, maxb), small_params) + 1e-12
                else:
                    stack.extend((c, b) for c in node.children)


class TestFlatten:
    def test_single_leaf_permutation(self):
        p = SummaryParams(w=4, max_card_bits=8, n=32)
        data = np.linspace(-1, 1, 32) + 1e-3 * np.random.default_rng(1).standard_normal((10, 32))
        sax, lo = flatten(build(data, p, leaf_capacity=10))
        assert sorted(map(bytes, sax.words)) == sorted(map(bytes, lo.words))
        assert sorted(lo.ids.tolist()) == sax.ids.tolist()

    def test_ranges_tile(self, small_arrays, small_data):
        sax, lo = small_arrays
        assert lo.lengths.sum() == len(small_data) == len(sax)
        assert lo.offsets[0] == 0
        assert np.all(lo.offsets[1:] == np.cumsum(lo.lengths)[:-1])

    def test_recomputation_audit(self, small_arrays, small_data, small_params):
        sax, lo = small_arrays
        fresh = summarize(small_data, small_params)
        assert np.array_equal(fresh[lo.ids], lo.words)
        assert np.array_equal(fresh, sax.words)
        roots = root_ids_of(lo.words, small_params.max_card_bits)
        for rid, off, n in zip(lo.root_ids, lo.offsets, lo.lengths):
            assert np.all(roots[off:off + n] == rid)
            assert lo.range_of(int(rid)) == (off, n)
