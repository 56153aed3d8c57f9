"""Discrete-event simulation of multi-node query scheduling with work stealing.

The dataset is cut into ``P`` contiguous partitions; each has a primary node
and ``r`` replica nodes.  Query jobs carry a predicted cost (from a linear
model over the initial best-so-far distance and partition size), are
scheduled onto nodes holding their partition, and are executed one at a time
per node.  An idle node may steal a pending job from the most loaded node,
but only a job whose partition it already holds, so raw series never move.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import InputError

logger = logging.getLogger(__name__)

POLICIES = ("round_robin", "greedy_lpt")
MODES = ("synthetic", "measured")


@dataclass
class PartitionMap:
    n_series: int
    n_partitions: int
    n_nodes: int
    replication: int
    bounds: np.ndarray  # partition p covers ids [bounds[p], bounds[p+1])
    primary: list[int]
    replicas: list[list[int]]

    def holders(self, partition: int) -> list[int]:
        return [self.primary[partition]] + list(self.replicas[partition])

    def holds(self, node: int, partition: int) -> bool:
        return node == self.primary[partition] or node in self.replicas[partition]

    def partitions_of(self, node: int) -> list[int]:
        return [p for p in range(self.n_partitions) if self.holds(node, p)]

    def partition_of_series(self, series_id: int) -> int:
        return int(np.searchsorted(self.bounds, series_id, side="right") - 1)

    def size(self, partition: int) -> int:
        return int(self.bounds[partition + 1] - self.bounds[partition])


def partition(n_series: int, n_partitions: int, n_nodes: int, replication: int,
              seed: int = 0) -> PartitionMap:
    """Contiguous partitions, round-robin primaries, balanced replica placement."""
    if n_nodes < 1 or n_partitions < n_nodes:
        raise InputError(f"need P >= N >= 1, got P={n_partitions}, N={n_nodes}")
    if not 0 <= replication <= n_nodes - 1:
        raise InputError(f"replication degree must be in [0, {n_nodes - 1}], got {replication}")
    if n_series < n_partitions:
        raise InputError("fewer series than partitions")
    bounds = np.linspace(0, n_series, n_partitions + 1).astype(np.int64)
    primary = [p % n_nodes for p in range(n_partitions)]
    held = [0] * n_nodes
    for p in primary:
        held[p] += 1
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n_nodes)
    replicas: list[list[int]] = []
    for p in range(n_partitions):
        chosen: list[int] = []
        for _ in range(replication):
            options = [v for v in range(n_nodes) if v != primary[p] and v not in chosen]
            v = min(options, key=lambda v: (held[v], tiebreak[v]))
            chosen.append(v)
            held[v] += 1
        replicas.append(sorted(chosen))
    return PartitionMap(n_series, n_partitions, n_nodes, replication, bounds, primary, replicas)


@dataclass
class QueryJob:
    query_id: int
    partition: int
    initial_bsf: float
    predicted_cost: float
    partition_size: int = 0
    measured_cost: float | None = None
    query: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.predicted_cost > 0:
            raise InputError(f"job {self.query_id}: predicted cost must be > 0")


@dataclass
class CostModel:
    """``cost ~ intercept + bsf_coef * initial_bsf + size_coef * partition_size``."""

    intercept: float
    bsf_coef: float = 0.0
    size_coef: float = 0.0
    fallback: bool = False
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    MIN_COST = 1e-6

    def predict(self, initial_bsf: float, partition_size: float = 0.0) -> float:
        value = self.intercept + self.bsf_coef * initial_bsf + self.size_coef * partition_size
        return max(float(value), self.MIN_COST)


def calibrate(warmup: Sequence[QueryJob]) -> CostModel:
    """Least-squares fit of measured cost on initial BSF and partition size.

    Features that do not vary over the warmup sample are dropped (coefficient
    0).  With fewer than 10 measurements or fewer than two distinct BSF
    values the model falls back to the mean cost and sets ``fallback``.
    """
    costs = np.array([j.measured_cost for j in warmup if j.measured_cost is not None], dtype=float)
    if len(costs) == 0:
        raise InputError("calibration needs measured jobs")
    jobs = [j for j in warmup if j.measured_cost is not None]
    bsf = np.array([j.initial_bsf for j in jobs], dtype=float)
    size = np.array([j.partition_size for j in jobs], dtype=float)

    def mean_model() -> CostModel:
        warnings.warn("degenerate warmup sample; using mean-cost model", RuntimeWarning, stacklevel=3)
        mean = float(costs.mean())
        return CostModel(mean, fallback=True, residuals=costs - mean)

    if len(costs) < 10 or len(np.unique(bsf)) < 2:
        return mean_model()
    columns = [np.ones_like(bsf), bsf]
    use_size = np.ptp(size) > 0
    if use_size:
        columns.append(size)
    design = np.column_stack(columns)
    coef, _, rank, _ = np.linalg.lstsq(design, costs, rcond=None)
    if rank < design.shape[1]:
        return mean_model()
    residuals = costs - design @ coef
    return CostModel(float(coef[0]), float(coef[1]), float(coef[2]) if use_size else 0.0,
                     residuals=residuals)


def schedule(batch: Sequence[QueryJob], pmap: PartitionMap, policy: str = "greedy_lpt") -> list[list[QueryJob]]:
    """Assign every job to a holder of its partition; returns one queue per node."""
    if policy not in POLICIES:
        raise InputError(f"unknown policy {policy!r}; choose from {POLICIES}")
    queues: list[list[QueryJob]] = [[] for _ in range(pmap.n_nodes)]
    if policy == "round_robin":
        pointer = 0
        for job in batch:
            holders = set(pmap.holders(job.partition))
            for step in range(pmap.n_nodes):
                v = (pointer + step) % pmap.n_nodes
                if v in holders:
                    queues[v].append(job)
                    pointer = v + 1
                    break
    else:
        loads = [0.0] * pmap.n_nodes
        for job in sorted(batch, key=lambda j: (-j.predicted_cost, j.query_id)):
            v = min(pmap.holders(job.partition), key=lambda v: (loads[v], v))
            queues[v].append(job)
            loads[v] += job.predicted_cost
    return queues


@dataclass
class JobRecord:
    query_id: int
    node: int
    partition: int
    start: float
    end: float
    stolen: bool
    origin: int
    rebuild: float = 0.0


@dataclass
class SimMetrics:
    busy: list[float]
    makespan: float
    steal_count: int
    stolen_work_fraction: float
    rebuild_time: float
    imbalance: float
    records: list[JobRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("records")
        return out


@dataclass
class SimConfig:
    nodes: int = 4
    partitions: int = 8
    replication: int = 1
    policy: str = "greedy_lpt"
    mode: str = "synthetic"
    steal: bool = True
    seed: int = 0
    sigma: float = 0.0
    beta: float = 0.0
    lazy_replicas: bool = False
    steal_latency: float = 0.0
    queries: int = 100
    series: int = 100_000

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value: str, target):
    if isinstance(target, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"not a boolean: {value!r}")
    return type(target)(value)


def parse_scenario(text: str) -> SimConfig:
    """Parse ``key=value`` lines (``#`` comments allowed) into a :class:`SimConfig`."""
    cfg = SimConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not hasattr(cfg, key):
            raise InputError(f"line {lineno}: unknown scenario key {key!r}")
        try:
            setattr(cfg, key, _coerce(value, getattr(cfg, key)))
        except ValueError as exc:
            raise InputError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    if cfg.policy not in POLICIES:
        raise InputError(f"unknown policy {cfg.policy!r}")
    if cfg.mode not in MODES:
        raise InputError(f"unknown mode {cfg.mode!r}")
    return cfg


def _durations(jobs: Iterable[QueryJob], mode: str, sigma: float, seed: int) -> dict[int, float]:
    out = {}
    for job in jobs:
        if mode == "measured":
            if job.measured_cost is None:
                raise InputError(f"job {job.query_id} has no measured cost")
            out[job.query_id] = float(job.measured_cost)
        elif sigma == 0.0:
            out[job.query_id] = job.predicted_cost
        else:
            rng = np.random.default_rng([seed, job.query_id])
            out[job.query_id] = job.predicted_cost * float(rng.lognormal(0.0, sigma))
    return out


def run_simulation(pmap: PartitionMap, schedules: Sequence[Sequence[QueryJob]], mode: str = "synthetic",
                   steal: bool = False, seed: int = 0, sigma: float = 0.0, beta: float = 0.0,
                   lazy_replicas: bool = False, steal_latency: float = 0.0) -> SimMetrics:
    """Execute the per-node schedules as a discrete-event simulation.

    Each node runs one job at a time in schedule order.  With ``steal`` an
    idle node takes, from the node with the largest pending predicted load
    among those it can help, the largest pending job whose partition it
    holds -- provided it would finish that job before the victim would reach
    the end of its queue.  With ``lazy_replicas`` the first job a node runs
    on a replica partition pays ``beta * partition_size`` to rebuild that
    replica's index.
    """
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}")
    if len(schedules) != pmap.n_nodes:
        raise InputError("need one schedule per node")
    all_jobs = [j for q in schedules for j in q]
    if len({j.query_id for j in all_jobs}) != len(all_jobs):
        raise InputError("query ids must be unique within a batch")
    for v, q in enumerate(schedules):
        for job in q:
            if not pmap.holds(v, job.partition):
                raise InputError(f"job {job.query_id} scheduled on node {v}, which lacks partition {job.partition}")
    dur = _durations(all_jobs, mode, sigma, seed)

    pending = [list(q) for q in schedules]
    pending_cost = [sum(j.predicted_cost for j in q) for q in schedules]
    busy_until = [0.0] * pmap.n_nodes
    built = [set(pmap.partitions_of(v)) if not lazy_replicas else {p for p in range(pmap.n_partitions)
                                                                    if pmap.primary[p] == v}
             for v in range(pmap.n_nodes)]
    busy = [0.0] * pmap.n_nodes
    records: list[JobRecord] = []
    origin = {j.query_id: v for v, q in enumerate(schedules) for j in q}
    steals = 0
    stolen_work = 0.0
    rebuild_total = 0.0
    events: list[tuple[float, int]] = [(0.0, v) for v in range(pmap.n_nodes)]
    heapq.heapify(events)

    def start(v: int, job: QueryJob, now: float, stolen: bool) -> None:
        nonlocal rebuild_total, stolen_work
        rebuild = 0.0
        if job.partition not in built[v]:
            rebuild = beta * pmap.size(job.partition)
            built[v].add(job.partition)
            rebuild_total += rebuild
        overhead = steal_latency if stolen else 0.0
        end = now + overhead + rebuild + dur[job.query_id]
        records.append(JobRecord(job.query_id, v, job.partition, now, end, stolen,
                                 origin[job.query_id], rebuild))
        busy[v] += end - now
        if stolen:
            stolen_work += dur[job.query_id]
        busy_until[v] = end
        heapq.heappush(events, (end, v))

    def try_steal(v: int, now: float) -> QueryJob | None:
        victims = [u for u in range(pmap.n_nodes)
                   if u != v and any(pmap.holds(v, j.partition) for j in pending[u])]
        for u in sorted(victims, key=lambda u: (-pending_cost[u], u)):
            victim_finish = max(busy_until[u], now) + pending_cost[u]
            eligible = sorted((j for j in pending[u] if pmap.holds(v, j.partition)),
                              key=lambda j: (-j.predicted_cost, j.query_id))
            for job in eligible:
                rebuild = 0.0 if job.partition in built[v] else beta * pmap.size(job.partition)
                if now + steal_latency + rebuild + job.predicted_cost < victim_finish:
                    pending[u].remove(job)
                    pending_cost[u] -= job.predicted_cost
                    return job
        return None

    while events:
        now, v = heapq.heappop(events)
        if busy_until[v] > now:
            continue
        if pending[v]:
            job = pending[v].pop(0)
            pending_cost[v] -= job.predicted_cost
            start(v, job, now, False)
        elif steal:
            job = try_steal(v, now)
            if job is not None:
                steals += 1
                start(v, job, now, True)

    makespan = max((r.end for r in records), default=0.0)
    mean_busy = float(np.mean(busy)) if busy else 0.0
    total_work = sum(dur.values())
    return SimMetrics(
        busy=busy,
        makespan=makespan,
        steal_count=steals,
        stolen_work_fraction=stolen_work / total_work if total_work else 0.0,
        rebuild_time=rebuild_total,
        imbalance=max(busy) / mean_busy if mean_busy > 0 else 1.0,
        records=records,
    )


def check_locality(pmap: PartitionMap, records: Iterable[JobRecord]) -> None:
    """Raise ``AssertionError`` if any job ran on a node lacking its partition."""
    for r in records:
        assert pmap.holds(r.node, r.partition), \
            f"job {r.query_id} executed on node {r.node} without partition {r.partition}"


def synthetic_batch(pmap: PartitionMap, n_queries: int, seed: int, skew: float = 10.0,
                    model: CostModel | None = None) -> list[QueryJob]:
    """Random jobs over uniformly chosen partitions with costs spanning ``skew``:1.

    Initial BSF values are drawn uniformly; without a model the predicted
    cost is ``1 + (skew - 1) * u`` for a uniform ``u``.
    """
    rng = np.random.default_rng(seed)
    jobs = []
    for qid in range(n_queries):
        p = int(rng.integers(pmap.n_partitions))
        bsf = float(rng.uniform(0.5, 20.0))
        if model is None:
            cost = 1.0 + (skew - 1.0) * float(rng.uniform())
        else:
            cost = model.predict(bsf, pmap.size(p))
        jobs.append(QueryJob(qid, p, bsf, cost, pmap.size(p)))
    return jobs


def measured_batch(data: np.ndarray, pmap: PartitionMap, queries: np.ndarray, params,
                   leaf_capacity: int = 2000, seed: int = 0, warmup: int = 10,
                   workers: int = 1) -> tuple[list[QueryJob], CostModel]:
    """Jobs whose costs come from real engine runs on per-partition indexes.

    Each partition gets its own index over its id range.  A query's initial
    BSF is the approximate answer on its partition's index; its measured cost
    is the wall time (ms) of the exact tree search there.  The first
    ``warmup`` jobs calibrate the cost model that sets every predicted cost.
    """
    from .engines import approximate_search, exact_search_tree
    from .index import build

    rng = np.random.default_rng(seed)
    trees = {}
    for p in range(pmap.n_partitions):
        lo, hi = int(pmap.bounds[p]), int(pmap.bounds[p + 1])
        trees[p] = (build(data[lo:hi], params, workers=workers, leaf_capacity=leaf_capacity),
                    np.ascontiguousarray(data[lo:hi]))
    jobs = []
    for qid, q in enumerate(queries):
        p = int(rng.integers(pmap.n_partitions))
        tree, part = trees[p]
        _, bsf = approximate_search(tree, part, q)
        jobs.append(QueryJob(qid, p, bsf, 1.0, pmap.size(p), query=q))
    measure_jobs(jobs, lambda j: exact_search_tree(trees[j.partition][0], trees[j.partition][1],
                                                   j.query, workers=workers))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = calibrate(jobs[:max(warmup, 1)])
    for job in jobs:
        job.predicted_cost = model.predict(job.initial_bsf, job.partition_size)
    return jobs, model


def measure_jobs(jobs: Sequence[QueryJob], run: Callable[[QueryJob], object],
                 clock: Callable[[], float] | None = None) -> None:
    """Run every job through ``run`` and store its wall time in milliseconds."""
    import time

    clock = clock or time.perf_counter
    for job in jobs:
        t0 = clock()
        run(job)
        job.measured_cost = (clock() - t0) * 1000.0


def write_records_jsonl(records: Iterable[JobRecord], fh, header: dict | None = None) -> None:
    if header is not None:
        fh.write(json.dumps({"header": header}) + "\n")
    for r in records:
        fh.write(json.dumps({"query_id": r.query_id, "node": r.node, "partition": r.partition,
                             "start": r.start, "end": r.end, "stolen": r.stolen,
                             "origin": r.origin, "rebuild": r.rebuild}) + "\n")


def write_records_csv(records: Iterable[JobRecord], fh, header: dict | None = None) -> None:
    if header is not None:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
    writer = csv.writer(fh)
    writer.writerow(["query_id", "node", "partition", "start", "end", "stolen", "origin", "rebuild"])
    for r in records:
        writer.writerow([r.query_id, r.node, r.partition, f"{r.start:.6f}", f"{r.end:.6f}",
                         int(r.stolen), r.origin, f"{r.rebuild:.6f}"])
