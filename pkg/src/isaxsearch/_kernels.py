"""Compiled hot loops shared by the index and the query engines.

All kernels are ``nogil`` so that thread pools get real parallelism.  Each one
processes rows independently with a fixed accumulation order, which keeps the
value computed for a given series identical no matter how rows are batched.
"""

import numpy as np
from numba import njit

# elements summed in float32 before folding into the float64 total
ACC_BLOCK = 16


@njit(nogil=True, cache=True)
def mindist_sq_block(q_paa, words, lower, upper, scale):
    """Squared lower bounds of ``words`` (all at one cardinality) to a query PAA."""
    n_rows, w = words.shape
    out = np.empty(n_rows, dtype=np.float64)
    for r in range(n_rows):
        acc = 0.0
        for i in range(w):
            s = words[r, i]
            q = q_paa[i]
            lo = lower[s]
            hi = upper[s]
            if q < lo:
                d = lo - q
                acc += d * d
            elif q > hi:
                d = q - hi
                acc += d * d
        out[r] = scale * acc
    return out


@njit(nogil=True, cache=True)
def scan_nearest(data, rows, query, best_sq, best_id):
    """Scan ``data[rows]`` for the nearest series to ``query``.

    Starts from the threshold ``(best_sq, best_id)`` and abandons a series as
    soon as its running sum exceeds the current best.  Ties on distance go to
    the lower id.  Returns ``(best_sq, best_id, n_started)``.
    """
    n = query.shape[0]
    started = 0
    for k in range(rows.shape[0]):
        row = rows[k]
        started += 1
        total = 0.0
        abandoned = False
        j = 0
        while j < n:
            end = min(j + ACC_BLOCK, n)
            part = np.float32(0.0)
            for t in range(j, end):
                d = data[row, t] - query[t]
                part += d * d
            total += np.float64(part)
            if total > best_sq:
                abandoned = True
                break
            j = end
        if abandoned:
            continue
        if total < best_sq or (total == best_sq and row < best_id):
            best_sq = total
            best_id = row
    return best_sq, best_id, started


@njit(nogil=True, cache=True)
def sq_dist_rows(data, rows, query):
    """Squared distances of ``data[rows]`` to ``query`` with the engine's accumulation order."""
    n = query.shape[0]
    out = np.empty(rows.shape[0], dtype=np.float64)
    for k in range(rows.shape[0]):
        row = rows[k]
        total = 0.0
        j = 0
        while j < n:
            end = min(j + ACC_BLOCK, n)
            part = np.float32(0.0)
            for t in range(j, end):
                d = data[row, t] - query[t]
                part += d * d
            total += np.float64(part)
            j = end
        out[k] = total
    return out


@njit(nogil=True, cache=True)
def paa_rows(data, w):
    """Segment means of every row, accumulated in float64."""
    n_rows, n = data.shape
    seg = n // w
    out = np.empty((n_rows, w), dtype=np.float64)
    for r in range(n_rows):
        for i in range(w):
            acc = 0.0
            base = i * seg
            for t in range(seg):
                acc += data[r, base + t]
            out[r, i] = acc / seg
    return out
