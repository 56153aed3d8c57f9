"""Exact similarity search over parallel iSAX indexes for fixed-length data series."""

__version__ = "0.1.0"

from .core import (
    BreakpointTable,
    InputError,
    ISAXWord,
    SummaryParams,
    batched_mindist,
    breakpoints,
    compute_isax,
    compute_paa,
    euclidean,
    mindist,
    squared_euclidean,
    znormalize,
)
from .engines import (
    QueryResult,
    SharedBSF,
    approximate_search,
    brute_force,
    bsf_update,
    exact_search_batched,
    exact_search_flatscan,
    exact_search_tree,
)
from .index import IndexTree, build, flatten, node_mindist, root_subtree_of, split_leaf
from .io import Dataset, generate_random_walk, load_dataset, stream_build, write_dataset

__all__ = [
    "BreakpointTable", "InputError", "ISAXWord", "SummaryParams", "batched_mindist", "breakpoints",
    "compute_isax", "compute_paa", "euclidean", "mindist", "squared_euclidean", "znormalize",
    "QueryResult", "SharedBSF", "approximate_search", "brute_force", "bsf_update",
    "exact_search_batched", "exact_search_flatscan", "exact_search_tree",
    "IndexTree", "build", "flatten", "node_mindist", "root_subtree_of", "split_leaf",
    "Dataset", "generate_random_walk", "load_dataset", "stream_build", "write_dataset",
]
