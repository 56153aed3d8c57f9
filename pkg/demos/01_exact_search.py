"""Build an index over random walks and answer a query three ways.

Every engine must land on the same nearest neighbor as the brute-force
scan; what differs is how many real distances each one computes.
"""
import numpy as np

from isaxsearch import SummaryParams, build, flatten
from isaxsearch.engines import (approximate_search, brute_force, exact_search_batched,
                                exact_search_flatscan, exact_search_tree)
from isaxsearch.io import random_walks

data = random_walks(50_000, 256, seed=1)
tree = build(data, SummaryParams(), workers=2)
sax, leaf_ordered = flatten(tree)
print(f"indexed {tree.n_series} series into {sum(1 for _ in tree.leaves())} leaves")

# a stored series plus a little noise: the index should find its source fast
rng = np.random.default_rng(0)
query = data[1234] + 0.05 * rng.standard_normal(256)

seed_id, seed_dist = approximate_search(tree, data, query)
print(f"approximate answer: id {seed_id} at {seed_dist:.4f}")

truth = brute_force(data, query)
for name, res in [
    ("tree", exact_search_tree(tree, data, query, workers=2)),
    ("flatscan", exact_search_flatscan(tree, sax, data, query, workers=2)),
    ("batched", exact_search_batched(leaf_ordered, tree, data, query, workers=2)),
]:
    s = res.stats
    print(f"{name:9s} id {res.series_id} dist {res.distance:.4f} "
          f"real distances {s.real_distances + s.approx_real_distances:6d} "
          f"pruned {s.pruning_ratio:.1%}")
print(f"oracle    id {truth.series_id} dist {truth.distance:.4f}")
