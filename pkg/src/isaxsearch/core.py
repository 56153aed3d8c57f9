"""Numeric foundations: normalization, PAA, iSAX symbols and distances.

Conventions
-----------
* A summary of a whole collection is a ``(count, w)`` ``uint16`` array of
  symbols, all at one cardinality (``card_bits`` bits per symbol).
* A single word with per-segment cardinalities is an :class:`ISAXWord`.
* Symbol ``k`` at ``c`` bits covers the half-open region
  ``[t[k-1], t[k])`` of the ``c``-bit breakpoints ``t``, open at both ends.
  Because the breakpoint lists are nested, the ``c``-bit symbol of a value is
  its maximum-cardinality symbol shifted right by ``max_card_bits - c``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri

from . import _kernels

MAX_SUPPORTED_CARD_BITS = 16


class InputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


@dataclass(frozen=True)
class SummaryParams:
    """Summary configuration: segment count, symbol bits and series length."""

    w: int = 16
    max_card_bits: int = 8
    n: int = 256

    def __post_init__(self):
        if self.w < 1:
            raise InputError(f"w must be >= 1, got {self.w}")
        if not 1 <= self.max_card_bits <= MAX_SUPPORTED_CARD_BITS:
            raise InputError(
                f"max_card_bits must be in [1, {MAX_SUPPORTED_CARD_BITS}], got {self.max_card_bits}"
            )
        if self.n < self.w or self.n % self.w:
            raise InputError(f"series length {self.n} must be a multiple of w={self.w}")

    @property
    def segment_length(self) -> int:
        return self.n // self.w

    @property
    def n_root_children(self) -> int:
        return 1 << self.w


class NormalizedSeries(NamedTuple):
    values: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class ISAXWord:
    """Per-segment symbols, each with its own cardinality in bits."""

    symbols: np.ndarray
    card_bits: np.ndarray

    def __post_init__(self):
        symbols = np.asarray(self.symbols, dtype=np.uint32)
        cards = np.asarray(self.card_bits, dtype=np.uint8)
        if symbols.shape != cards.shape or symbols.ndim != 1:
            raise InputError("symbols and card_bits must be 1-d arrays of equal length")
        if np.any(cards < 1) or np.any(symbols >= (np.uint32(1) << cards.astype(np.uint32))):
            raise InputError("every symbol must fit in its segment's cardinality")
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "card_bits", cards)

    @classmethod
    def uniform(cls, symbols, card_bits: int) -> "ISAXWord":
        symbols = np.asarray(symbols)
        return cls(symbols, np.full(symbols.shape, card_bits, dtype=np.uint8))

    @property
    def w(self) -> int:
        return len(self.symbols)

    def __eq__(self, other):
        if not isinstance(other, ISAXWord):
            return NotImplemented
        return np.array_equal(self.symbols, other.symbols) and np.array_equal(
            self.card_bits, other.card_bits
        )

    def __hash__(self):
        return hash((self.symbols.tobytes(), self.card_bits.tobytes()))

    def promote(self, segment: int, bit: int) -> "ISAXWord":
        """Refine one segment by one bit; ``bit`` selects the lower (0) or upper (1) half."""
        symbols = self.symbols.copy()
        cards = self.card_bits.copy()
        symbols[segment] = (symbols[segment] << 1) | (bit & 1)
        cards[segment] += 1
        return ISAXWord(symbols, cards)

    def contains(self, other: "ISAXWord") -> bool:
        """True when ``other``'s region lies inside this word's region."""
        if np.any(other.card_bits < self.card_bits):
            return False
        shifted = other.symbols >> (other.card_bits - self.card_bits).astype(np.uint32)
        return bool(np.array_equal(shifted, self.symbols))


def znormalize(series) -> NormalizedSeries:
    """Shift to zero mean and scale to unit population standard deviation.

    A constant series comes back as zeros with ``degenerate=True``.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot normalize an empty series")
    if not np.all(np.isfinite(x)):
        raise InputError("series contains non-finite values")
    mu = x.mean()
    centered = x - mu
    sd = np.sqrt(np.mean(centered * centered))
    if sd == 0.0 or sd < 1e-12 * max(1.0, abs(mu)):
        return NormalizedSeries(np.zeros_like(x), True)
    return NormalizedSeries(centered / sd, False)


def znormalize_rows(data: np.ndarray, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`znormalize`; returns ``(values, degenerate_mask)``."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("expected a 2-d array of series")
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    sd = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    degenerate = (sd[:, 0] == 0.0) | (sd[:, 0] < 1e-12 * np.maximum(1.0, np.abs(mu[:, 0])))
    sd[degenerate] = 1.0
    out = centered / sd
    out[degenerate] = 0.0
    return out.astype(dtype, copy=False), degenerate


def compute_paa(series, params: SummaryParams) -> np.ndarray:
    """Mean of each of the ``w`` equal-length segments."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.n:
        raise InputError(f"expected a series of length {params.n}, got shape {x.shape}")
    return x.reshape(params.w, params.segment_length).mean(axis=1)


def paa_rows(data: np.ndarray, params: SummaryParams) -> np.ndarray:
    """PAA of every row of a ``(count, n)`` array."""
    if data.ndim != 2 or data.shape[1] != params.n:
        raise InputError(f"expected rows of length {params.n}, got shape {data.shape}")
    return _kernels.paa_rows(np.ascontiguousarray(data), params.w)


@lru_cache(maxsize=None)
def _breakpoints_cached(card_bits: int) -> np.ndarray:
    k = 1 << card_bits
    t = ndtri(np.arange(1, k, dtype=np.float64) / k)
    t.flags.writeable = False
    return t


def breakpoints(card_bits: int, max_card_bits: int = MAX_SUPPORTED_CARD_BITS) -> np.ndarray:
    """The ``2**card_bits - 1`` standard-normal quantiles at ``i / 2**card_bits``."""
    if not 1 <= card_bits <= max_card_bits:
        raise InputError(f"card_bits must be in [1, {max_card_bits}], got {card_bits}")
    return _breakpoints_cached(int(card_bits))


class BreakpointTable:
    """Breakpoints for every cardinality up to ``max_card_bits``.

    ``lower(c)[s]`` and ``upper(c)[s]`` give symbol ``s``'s region bounds, with
    ``-inf``/``inf`` at the open ends.
    """

    def __init__(self, max_card_bits: int = 8):
        if not 1 <= max_card_bits <= MAX_SUPPORTED_CARD_BITS:
            raise InputError(f"max_card_bits out of range: {max_card_bits}")
        self.max_card_bits = max_card_bits
        self._lower = {}
        self._upper = {}
        for c in range(1, max_card_bits + 1):
            t = breakpoints(c, max_card_bits)
            self._lower[c] = np.concatenate(([-np.inf], t))
            self._upper[c] = np.concatenate((t, [np.inf]))

    def thresholds(self, card_bits: int) -> np.ndarray:
        return breakpoints(card_bits, self.max_card_bits)

    def lower(self, card_bits: int) -> np.ndarray:
        return self._lower[card_bits]

    def upper(self, card_bits: int) -> np.ndarray:
        return self._upper[card_bits]

    def region(self, symbol: int, card_bits: int) -> tuple[float, float]:
        return float(self._lower[card_bits][symbol]), float(self._upper[card_bits][symbol])

    def word_bounds(self, word: ISAXWord) -> tuple[np.ndarray, np.ndarray]:
        """Per-segment ``(lower, upper)`` arrays of a word's region."""
        lo = np.empty(word.w)
        hi = np.empty(word.w)
        for i, (s, c) in enumerate(zip(word.symbols, word.card_bits)):
            lo[i] = self._lower[int(c)][s]
            hi[i] = self._upper[int(c)][s]
        return lo, hi


@lru_cache(maxsize=None)
def default_table(max_card_bits: int) -> BreakpointTable:
    return BreakpointTable(max_card_bits)


def compute_isax(paa, card_bits: int, table: BreakpointTable) -> ISAXWord:
    """Quantize PAA means to ``card_bits``-bit symbols."""
    if card_bits > table.max_card_bits:
        raise InputError(f"card_bits {card_bits} exceeds table maximum {table.max_card_bits}")
    paa = np.asarray(paa, dtype=np.float64)
    symbols = np.searchsorted(table.thresholds(card_bits), paa, side="right")
    return ISAXWord.uniform(symbols, card_bits)


def isax_rows(paa: np.ndarray, card_bits: int, table: BreakpointTable) -> np.ndarray:
    """Symbols for a ``(count, w)`` PAA array, as ``uint16``."""
    t = table.thresholds(card_bits)
    return np.searchsorted(t, paa, side="right").astype(np.uint16)


def summarize(data: np.ndarray, params: SummaryParams, table: BreakpointTable | None = None) -> np.ndarray:
    """Maximum-cardinality symbols of every row."""
    table = table or default_table(params.max_card_bits)
    return isax_rows(paa_rows(data, params), params.max_card_bits, table)


def _check_equal_length(a, b):
    if a.shape != b.shape:
        raise InputError(f"length mismatch: {a.shape} vs {b.shape}")


def squared_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_equal_length(a, b)
    d = a - b
    return float(np.dot(d, d))


def euclidean(a, b) -> float:
    return float(np.sqrt(squared_euclidean(a, b)))


def mindist(query_paa, word: ISAXWord, params: SummaryParams, table: BreakpointTable | None = None) -> float:
    """Lower bound on the distance from the query to any series summarized by ``word``."""
    table = table or default_table(params.max_card_bits)
    q = np.asarray(query_paa, dtype=np.float64)
    if q.shape != (params.w,) or word.w != params.w:
        raise InputError("query PAA and word must both have w segments")
    acc = 0.0
    for i in range(params.w):
        lo, hi = table.region(int(word.symbols[i]), int(word.card_bits[i]))
        if q[i] < lo:
            acc += (lo - q[i]) ** 2
        elif q[i] > hi:
            acc += (q[i] - hi) ** 2
    return float(np.sqrt(params.segment_length * acc))


def batched_mindist_sq(query_paa, words: np.ndarray, card_bits: int, params: SummaryParams,
                       table: BreakpointTable | None = None) -> np.ndarray:
    """Squared :func:`batched_mindist`, used by the engines to avoid square roots."""
    table = table or default_table(params.max_card_bits)
    q = np.ascontiguousarray(query_paa, dtype=np.float64)
    words = np.ascontiguousarray(words, dtype=np.uint16)
    if words.size == 0:
        return np.empty(0, dtype=np.float64)
    if words.ndim != 2 or words.shape[1] != params.w:
        raise InputError(f"expected words of shape (count, {params.w}), got {words.shape}")
    return _kernels.mindist_sq_block(
        q, words, table.lower(card_bits), table.upper(card_bits), float(params.segment_length)
    )


def batched_mindist(query_paa, words, params: SummaryParams, card_bits: int | None = None,
                    table: BreakpointTable | None = None) -> np.ndarray:
    """Lower bounds for a contiguous array of words sharing one cardinality.

    ``words`` is either a ``(count, w)`` symbol array (with ``card_bits``
    given, defaulting to ``params.max_card_bits``) or a sequence of
    :class:`ISAXWord`; mixed cardinalities are rejected.
    """
    if isinstance(words, Sequence) and not isinstance(words, np.ndarray):
        if len(words) == 0:
            return np.empty(0, dtype=np.float64)
        cards = np.stack([wd.card_bits for wd in words])
        if np.any(cards != cards.flat[0]):
            raise InputError("batched_mindist requires all words at the same cardinality")
        card_from_words = int(cards.flat[0])
        if card_bits is not None and card_bits != card_from_words:
            raise InputError("card_bits disagrees with the words' cardinality")
        card_bits = card_from_words
        words = np.stack([wd.symbols for wd in words]).astype(np.uint16)
    elif card_bits is None:
        card_bits = params.max_card_bits
    return np.sqrt(batched_mindist_sq(query_paa, words, card_bits, params, table))
