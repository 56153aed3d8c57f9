import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isaxsearch.core import (
    BreakpointTable,
    InputError,
    ISAXWord,
    SummaryParams,
    batched_mindist,
    breakpoints,
    compute_isax,
    compute_paa,
    euclidean,
    isax_rows,
    mindist,
    paa_rows,
    squared_euclidean,
    znormalize,
    znormalize_rows,
)
from isaxsearch.io import random_walks


def acklam_ppf(p):
    """Inverse standard-normal CDF by Acklam's rational approximation (|err| < 1.2e-9)."""
    a = [-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00]
    b = [-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01]
    c = [-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00]
    d = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
         3.754408661907416e00]
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p > 1 - lo:
        return -acklam_ppf(1 - p)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)


# published standard-normal quantiles (4 decimals)
PUBLISHED = {0.25: -0.6745, 0.125: -1.1503, 0.375: -0.3186, 0.0625: -1.5341}


class TestZNormalize:
    def test_simple(self):
        out = znormalize([0, 2, 0, 2])
        np.testing.assert_allclose(out.values, [-1, 1, -1, 1])
        assert not out.degenerate

    def test_constant(self):
        out = znormalize([5, 5, 5, 5])
        assert out.degenerate
        assert np.array_equal(out.values, np.zeros(4))

    def test_moments(self):
        x = np.random.default_rng(0).normal(3.0, 7.0, 256)
        out = znormalize(x).values
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9

    def test_rows_match_scalar(self):
        x = np.random.default_rng(1).normal(size=(20, 32))
        x[3] = 4.0
        rows, degenerate = znormalize_rows(x, dtype=np.float64)
        assert degenerate.tolist() == [i == 3 for i in range(20)]
        for i in range(20):
            np.testing.assert_allclose(rows[i], znormalize(x[i]).values, atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(InputError):
            znormalize([1.0, np.nan])


class TestPAA:
    def test_examples(self):
        assert compute_paa([1, 1, 3, 3], SummaryParams(w=2, n=4)).tolist() == [1, 3]
        assert compute_paa(np.zeros(8), SummaryParams(w=4, n=8)).tolist() == [0] * 4
        assert compute_paa([1, 2, 3, 4, 5, 6], SummaryParams(w=3, n=6)).tolist() == [1.5, 3.5, 5.5]

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            compute_paa([1, 2, 3], SummaryParams(w=2, n=4))

    def test_non_divisible_params(self):
        with pytest.raises(InputError):
            SummaryParams(w=3, n=8)

    def test_rows_kernel_matches(self):
        p = SummaryParams(w=8, n=64)
        x = np.random.default_rng(2).normal(size=(50, 64)).astype(np.float32)
        got = paa_rows(x, p)
        for i in range(50):
            np.testing.assert_allclose(got[i], compute_paa(x[i], p), rtol=1e-12)


class TestBreakpoints:
    def test_card1(self):
        assert breakpoints(1).tolist() == [0.0]

    def test_card2(self):
        np.testing.assert_allclose(breakpoints(2), [-0.6745, 0.0, 0.6745], atol=1e-4)

    @pytest.mark.parametrize("c", range(1, 11))
    def test_against_rational_oracle(self, c):
        k = 1 << c
        oracle = [acklam_ppf(i / k) for i in range(1, k)]
        np.testing.assert_allclose(breakpoints(c), oracle, atol=1e-8)

    def test_published_table(self):
        t4 = breakpoints(4)
        for p, v in PUBLISHED.items():
            assert abs(t4[int(p * 16) - 1] - v) < 1e-4

    def test_card3_symmetric_and_refines(self):
        t3 = breakpoints(3)
        assert len(t3) == 7
        assert np.all(np.diff(t3) > 0)
        np.testing.assert_allclose(t3, -t3[::-1], atol=1e-12)
        assert set(breakpoints(2).tolist()) <= set(t3.tolist())

    @pytest.mark.parametrize("c", range(1, 16))
    def test_refinement(self, c):
        assert np.array_equal(breakpoints(c + 1)[1::2], breakpoints(c))

    def test_out_of_range(self):
        with pytest.raises(InputError):
            breakpoints(0)
        with pytest.raises(InputError):
            breakpoints(9, max_card_bits=8)


class TestISAX:
    table = BreakpointTable(8)

    def test_examples(self):
        assert compute_isax([0.1], 2, self.table).symbols.tolist() == [2]
        for c in range(1, 9):
            assert compute_isax([-10.0], c, self.table).symbols.tolist() == [0]
        assert compute_isax([0.0], 1, self.table).symbols.tolist() == [1]

    def test_boundary_goes_up(self):
        t = self.table.thresholds(3)
        word = compute_isax(t, 3, self.table)
        assert word.symbols.tolist() == list(range(1, 8))

    def test_shift_equals_direct(self):
        paa = np.random.default_rng(4).normal(size=(500, 16))
        top = isax_rows(paa, 8, self.table)
        for c in range(1, 8):
            assert np.array_equal(top >> (8 - c), isax_rows(paa, c, self.table))

    def test_region_contains_mean(self):
        paa = np.random.default_rng(5).normal(size=64)
        word = compute_isax(paa, 5, self.table)
        lo, hi = self.table.word_bounds(word)
        assert np.all((lo <= paa) & (paa < hi))

    def test_word_validation(self):
        with pytest.raises(InputError):
            ISAXWord([4], [2])


class TestEuclidean:
    def test_examples(self):
        assert euclidean([0, 0], [3, 4]) == 5.0
        x = np.random.default_rng(0).normal(size=16)
        assert euclidean(x, x) == 0.0

    def test_naive_two_pass(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=256), rng.normal(size=256)
        diffs = [ai - bi for ai, bi in zip(a.tolist(), b.tolist())]
        naive = math.sqrt(sum(d * d for d in diffs))
        assert abs(euclidean(a, b) - naive) <= 1e-6 * naive
        assert abs(squared_euclidean(a, b) - naive ** 2) <= 1e-6 * naive ** 2

    def test_mismatch(self):
        with pytest.raises(InputError):
            euclidean([1, 2], [1, 2, 3])


def _random_words(rng, count, w, maxb):
    cards = rng.integers(1, maxb + 1, size=(count, w))
    symbols = rng.integers(0, 1 << 16, size=(count, w)) % (1 << cards)
    return [ISAXWord(s, c) for s, c in zip(symbols, cards)]


class TestMindist:
    params = SummaryParams()
    table = BreakpointTable(8)

    def test_inside_region_is_zero(self):
        paa = np.random.default_rng(7).normal(size=16)
        word = compute_isax(paa, 8, self.table)
        assert mindist(paa, word, self.params) == 0.0

    def test_own_word_is_zero(self):
        q = random_walks(1, 256, seed=8)[0]
        paa = compute_paa(q, self.params)
        assert mindist(paa, compute_isax(paa, 6, self.table), self.params) == 0.0

    def test_hand_computed(self):
        p = SummaryParams(w=2, max_card_bits=2, n=8)
        word = ISAXWord.uniform([3, 0], 2)
        t = breakpoints(2)
        q = np.array([0.0, 1.0])
        expected = math.sqrt(4 * ((t[2] - 0.0) ** 2 + (1.0 - t[0]) ** 2))
        assert mindist(q, word, p) == pytest.approx(expected, rel=1e-12)

    def test_soundness_random_pairs(self):
        rng = np.random.default_rng(9)
        data = random_walks(2000, 256, seed=9).astype(np.float64)
        qi = rng.integers(0, 2000, 100_000)
        si = rng.integers(0, 2000, 100_000)
        paa = paa_rows(data, self.params)
        words = isax_rows(paa, 8, self.table)
        diff = data[qi] - data[si]
        true = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        bounds = np.array([mindist(paa[a], ISAXWord.uniform(words[b], 8), self.params)
                           for a, b in zip(qi[:20_000], si[:20_000])])
        assert np.all(bounds <= true[:20_000] + 1e-9)
        # remaining pairs through the batched kernel, itself checked against the scalar loop below
        for a in np.unique(qi[20_000:])[:400]:
            sel = si[20_000:][qi[20_000:] == a]
            b = batched_mindist(paa[a], words[sel], self.params)
            d = np.sqrt(((data[sel] - data[a]) ** 2).sum(axis=1))
            assert np.all(b <= d + 1e-9)

    def test_promotion_monotone(self):
        rng = np.random.default_rng(10)
        words = _random_words(rng, 10_000, 16, 8)
        queries = rng.normal(size=(10_000, 16))
        for word, q in zip(words, queries):
            seg = int(rng.integers(16))
            if word.card_bits[seg] == 8:
                continue
            base = mindist(q, word, self.params)
            for bit in (0, 1):
                assert mindist(q, word.promote(seg, bit), self.params) >= base - 1e-12

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 32, elements=st.floats(-50, 50)),
           arrays(np.float64, 32, elements=st.floats(-50, 50)),
           st.integers(1, 8))
    def test_soundness_property(self, q, s, card):
        p = SummaryParams(w=4, max_card_bits=8, n=32)
        word = compute_isax(compute_paa(s, p), card, self.table)
        assert mindist(compute_paa(q, p), word, p) <= euclidean(q, s) + 1e-9


class TestBatchedMindist:
    params = SummaryParams()
    table = BreakpointTable(8)

    def test_empty(self):
        assert batched_mindist(np.zeros(16), np.empty((0, 16), np.uint16), self.params).shape == (0,)
        assert batched_mindist(np.zeros(16), [], self.params).shape == (0,)

    def test_singleton(self):
        q = np.random.default_rng(0).normal(size=16)
        word = ISAXWord.uniform(np.arange(16) * 7 % 256, 8)
        got = batched_mindist(q, [word], self.params)
        assert got.tolist() == pytest.approx([mindist(q, word, self.params)], abs=1e-12)

    @pytest.mark.parametrize("card", [1, 3, 8])
    def test_matches_scalar_loop(self, card):
        rng = np.random.default_rng(card)
        q = rng.normal(size=16)
        symbols = rng.integers(0, 1 << card, size=(10_000, 16)).astype(np.uint16)
        got = batched_mindist(q, symbols, self.params, card_bits=card)
        ref = np.array([mindist(q, ISAXWord.uniform(s, card), self.params) for s in symbols])
        assert np.max(np.abs(got - ref)) < 1e-9

    def test_mixed_cardinalities_rejected(self):
        words = [ISAXWord.uniform(np.zeros(16), 2), ISAXWord.uniform(np.zeros(16), 3)]
        with pytest.raises(InputError):
            batched_mindist(np.zeros(16), words, self.params)
