"""Why pruning is safe: the symbolic lower bound never exceeds the true distance.

Refining a word (more bits in one segment) can only tighten the bound.
"""
import numpy as np

from isaxsearch import SummaryParams
from isaxsearch.core import compute_isax, compute_paa, default_table, euclidean, mindist
from isaxsearch.io import random_walks

params = SummaryParams(w=8, max_card_bits=8, n=128)
table = default_table(params.max_card_bits)
series, query = random_walks(2, 128, seed=5)
q_paa = compute_paa(query, params)
print(f"true distance {euclidean(series, query):.4f}")

for bits in range(1, params.max_card_bits + 1):
    word = compute_isax(compute_paa(series, params), bits, table)
    print(f"{2 ** bits:4d} symbols per segment -> lower bound {mindist(q_paa, word, params, table):.4f}")
