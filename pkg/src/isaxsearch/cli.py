"""Command-line driver: generate, build, query, oracle, bench, sim.

Exit status: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, distsim, engines
from . import io as dsio
from .core import InputError, SummaryParams
from .index import DEFAULT_LEAF_CAPACITY, build, flatten

ENGINES = ("tree", "flatscan", "batched")

logger = logging.getLogger("isaxsearch")


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# where results go and how chatty we are do not change the results
_NOT_CONFIG = ("func", "out", "verbose")


def _config_header(args: argparse.Namespace) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in _NOT_CONFIG}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return {"version": __version__, "seed": getattr(args, "seed", None),
            "config_hash": hashlib.sha256(blob).hexdigest()[:16], "config": cfg}


@contextmanager
def _output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _params(args, length: int) -> SummaryParams:
    return SummaryParams(w=args.w, max_card_bits=args.card_bits, n=length)


def _load(args) -> dsio.Dataset:
    ds = dsio.load_dataset(args.dataset)
    return ds if args.no_normalize else ds.znormalized()


def _queries(args, length: int) -> np.ndarray:
    if args.queries:
        qs = dsio.load_dataset(args.queries)
        if qs.length != length:
            raise InputError(f"query length {qs.length} != dataset series length {length}")
        return (qs if args.no_normalize else qs.znormalized()).values
    return dsio.random_walks(args.n_queries, length, args.seed + 1)


def _tree_for(args, ds: dsio.Dataset, params: SummaryParams):
    index_path = getattr(args, "index", None)
    if index_path:
        tree = dsio.load_index(index_path)
        if tree.params != params or tree.n_series != len(ds):
            raise InputError("index file does not match dataset/parameters")
        return tree
    return build(ds.values, params, workers=args.workers, leaf_capacity=args.leaf_capacity)


def _run_engine(name: str, tree, arrays, data, query, workers: int) -> engines.QueryResult:
    sax, leaf_ordered = arrays
    if name == "tree":
        return engines.exact_search_tree(tree, data, query, workers=workers)
    if name == "flatscan":
        return engines.exact_search_flatscan(tree, sax, data, query, workers=workers)
    if name == "batched":
        return engines.exact_search_batched(leaf_ordered, tree, data, query, workers=workers)
    raise UsageError(f"--engine: unknown engine {name!r}")


def cmd_generate(args) -> int:
    ds = dsio.generate_random_walk(args.count, args.length, args.seed, args.out)
    with _output(None) as fh:
        fh.write(json.dumps({"header": _config_header(args), "path": str(args.out),
                             "count": len(ds), "length": ds.length}) + "\n")
    return 0


def cmd_build(args) -> int:
    header = dsio.read_header(args.dataset)
    params = _params(args, header.length)
    t0 = time.perf_counter()
    if args.chunk_size:
        if not header.normalized and not args.no_normalize:
            raise InputError("streaming build needs a normalized dataset file (or --no-normalize)")
        tree = dsio.stream_build(args.dataset, params, args.workers, args.chunk_size, args.leaf_capacity)
    else:
        tree = build(_load(args).values, params, args.workers, args.leaf_capacity)
    elapsed = time.perf_counter() - t0
    if args.audit:
        try:
            tree.audit()
        except AssertionError as exc:
            raise InvariantViolation(f"index audit failed: {exc}") from exc
    if args.out:
        dsio.save_index(tree, args.out)
    report = {"header": _config_header(args), "build_seconds": elapsed,
              "summarize_seconds": tree.stats.summarize_seconds,
              "construct_seconds": tree.stats.construct_seconds,
              "series": tree.n_series, "root_children": len(tree.root_children),
              "leaves": sum(1 for _ in tree.leaves()), "overflow_leaves": tree.overflow_leaves}
    print(json.dumps(report))
    return 0


def _check_exact(result: engines.QueryResult, data: np.ndarray, query: np.ndarray) -> None:
    d = float(np.sqrt(np.sum((data[result.series_id].astype(np.float64) - query) ** 2)))
    if not np.isclose(d, result.distance, rtol=1e-5, atol=1e-9):
        raise InvariantViolation(
            f"result distance {result.distance} differs from recomputed {d} for id {result.series_id}")


def cmd_query(args) -> int:
    if args.engine not in ENGINES:
        raise UsageError(f"--engine: unknown engine {args.engine!r} (choose from {', '.join(ENGINES)})")
    ds = _load(args)
    params = _params(args, ds.length)
    tree = _tree_for(args, ds, params)
    arrays = flatten(tree)
    with _output(args.out) as fh:
        fh.write(json.dumps({"header": _config_header(args)}) + "\n")
        for qi, q in enumerate(_queries(args, ds.length)):
            res = _run_engine(args.engine, tree, arrays, ds.values, q, args.workers)
            _check_exact(res, ds.values, q)
            fh.write(json.dumps({"query": qi, "engine": args.engine, "id": res.series_id,
                                 "distance": res.distance, "stats": res.stats.as_dict()}) + "\n")
    return 0


def cmd_oracle(args) -> int:
    ds = _load(args)
    with _output(args.out) as fh:
        fh.write(json.dumps({"header": _config_header(args)}) + "\n")
        for qi, q in enumerate(_queries(args, ds.length)):
            res = engines.brute_force(ds.values, q)
            fh.write(json.dumps({"query": qi, "engine": "oracle", "id": res.series_id,
                                 "distance": res.distance}) + "\n")
    return 0


def cmd_bench(args) -> int:
    names = ENGINES if args.engines == "all" else tuple(s.strip() for s in args.engines.split(","))
    for name in names:
        if name not in ENGINES:
            raise UsageError(f"--engines: unknown engine {name!r}")
    ds = _load(args)
    params = _params(args, ds.length)
    tree = _tree_for(args, ds, params)
    arrays = flatten(tree)
    header = _config_header(args)
    with _output(args.out) as fh:
        for k in ("version", "seed", "config_hash"):
            fh.write(f"# {k}={header[k]}\n")
        writer = csv.writer(fh)
        writer.writerow(["engine", "query", "id", "distance", "latency_ms", "real_distances",
                         "lower_bounds", "pruning_ratio"])
        for qi, q in enumerate(_queries(args, ds.length)):
            dists = set()
            for name in names:
                res = _run_engine(name, tree, arrays, ds.values, q, args.workers)
                dists.add(round(res.distance, 9))
                s = res.stats
                writer.writerow([name, qi, res.series_id, f"{res.distance:.9f}",
                                 f"{s.wall_seconds * 1000:.3f}", s.real_distances,
                                 s.lower_bounds, f"{s.pruning_ratio:.6f}"])
            if len(dists) > 1:
                raise InvariantViolation(f"engines disagree on query {qi}: {sorted(dists)}")
    return 0


def cmd_sim(args) -> int:
    cfg = distsim.SimConfig()
    if args.config:
        cfg = distsim.parse_scenario(Path(args.config).read_text())
    for key in ("nodes", "partitions", "replication", "policy", "mode", "seed", "sigma", "beta",
                "queries", "steal_latency"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, value)
    if args.steal is not None:
        cfg.steal = args.steal
    if args.lazy_replicas:
        cfg.lazy_replicas = True
    if cfg.policy not in distsim.POLICIES:
        raise UsageError(f"--policy: unknown policy {cfg.policy!r}")

    if cfg.mode == "measured":
        if not args.dataset:
            raise UsageError("--dataset is required for --mode measured")
        ds = _load(args)
        pmap = distsim.partition(len(ds), cfg.partitions, cfg.nodes, cfg.replication, cfg.seed)
        queries = dsio.random_walks(cfg.queries, ds.length, cfg.seed + 1)
        params = _params(args, ds.length)
        jobs, _ = distsim.measured_batch(ds.values, pmap, queries, params,
                                         leaf_capacity=args.leaf_capacity, seed=cfg.seed)
    else:
        pmap = distsim.partition(cfg.series, cfg.partitions, cfg.nodes, cfg.replication, cfg.seed)
        jobs = distsim.synthetic_batch(pmap, cfg.queries, cfg.seed)
    queues = distsim.schedule(jobs, pmap, cfg.policy)
    metrics = distsim.run_simulation(pmap, queues, cfg.mode, cfg.steal, cfg.seed, cfg.sigma, cfg.beta,
                                     cfg.lazy_replicas, cfg.steal_latency)
    try:
        distsim.check_locality(pmap, metrics.records)
    except AssertionError as exc:
        raise InvariantViolation(str(exc)) from exc
    if len(metrics.records) != len(jobs):
        raise InvariantViolation("every job must execute exactly once")
    header = _config_header(args)
    header["seed"] = cfg.seed
    header["scenario_hash"] = cfg.config_hash()
    with _output(args.out) as fh:
        if args.format == "jsonl":
            fh.write(json.dumps({"header": header, "metrics": metrics.summary()}) + "\n")
            distsim.write_records_jsonl(metrics.records, fh)
        else:
            summary = metrics.summary()
            meta = {k: header[k] for k in ("version", "seed", "config_hash", "scenario_hash")}
            meta.update({k: v for k, v in summary.items() if k != "busy"})
            distsim.write_records_csv(metrics.records, fh, meta)
    return 0


def _add_common(p, dataset_required=True):
    p.add_argument("--dataset", type=Path, required=dataset_required, help="DSIX dataset file")
    p.add_argument("--w", type=int, default=16, help="segments per summary")
    p.add_argument("--card-bits", type=int, default=8, help="bits per symbol at max cardinality")
    p.add_argument("--leaf-capacity", type=int, default=DEFAULT_LEAF_CAPACITY)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true", help="use values as stored")


def _add_queries(p):
    p.add_argument("--queries", type=Path, help="DSIX file of queries (default: random walks)")
    p.add_argument("--n-queries", type=int, default=10, help="random queries when --queries is absent")
    p.add_argument("--index", type=Path, help="prebuilt index file from `build`")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isaxsearch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a random-walk DSIX dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build", help="build and serialize an index")
    _add_common(p)
    p.add_argument("--out", type=Path, help="index output file")
    p.add_argument("--chunk-size", type=int, default=0, help="stream the file through a double buffer")
    p.add_argument("--audit", action="store_true", help="check every tree invariant after building")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="answer queries with one engine (JSON lines)")
    _add_common(p)
    _add_queries(p)
    p.add_argument("--engine", default="tree", help="tree | flatscan | batched")
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=["jsonl"], default="jsonl")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("oracle", help="brute-force answers (JSON lines)")
    _add_common(p)
    _add_queries(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="per-query latency and pruning CSV for each engine")
    _add_common(p)
    _add_queries(p)
    p.add_argument("--engines", default="all", help="'all' or comma-separated engine names")
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=["csv"], default="csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sim", help="multi-node scheduling / work-stealing simulation")
    _add_common(p, dataset_required=False)
    p.add_argument("--config", type=Path, help="key=value scenario file")
    p.add_argument("--nodes", type=int)
    p.add_argument("--partitions", type=int)
    p.add_argument("--replication", type=int)
    p.add_argument("--policy")
    p.add_argument("--mode", choices=list(distsim.MODES))
    p.add_argument("--steal", dest="steal", action="store_true", default=None)
    p.add_argument("--no-steal", dest="steal", action="store_false")
    p.add_argument("--sigma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--steal-latency", type=float)
    p.add_argument("--lazy-replicas", action="store_true")
    p.add_argument("--queries", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    # None lets a scenario file's seed stand unless --seed is given
    p.set_defaults(func=cmd_sim, seed=None)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InputError, dsio.FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (InvariantViolation, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
