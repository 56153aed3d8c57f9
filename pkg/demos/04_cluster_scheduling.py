"""Schedule a skewed query batch across nodes and let idle nodes steal.

Partitions are replicated once, so a node can only take work for the
partitions it already holds.  No series ever moves between nodes.
"""
from isaxsearch.distsim import partition, run_simulation, schedule, synthetic_batch

pmap = partition(1_000_000, n_partitions=16, n_nodes=4, replication=1, seed=7)
batch = synthetic_batch(pmap, 120, seed=7, skew=10.0)

for policy in ("round_robin", "greedy_lpt"):
    queues = schedule(batch, pmap, policy)
    for steal in (False, True):
        m = run_simulation(pmap, queues, steal=steal, seed=7, sigma=0.2)
        print(f"{policy:11s} steal={steal!s:5s} makespan {m.makespan:7.1f} "
              f"steals {m.steal_count:3d} imbalance {m.imbalance:.3f}")

# lazily built replicas pay a rebuild the first time a stolen partition is touched
m = run_simulation(pmap, schedule(batch, pmap, "greedy_lpt"), steal=True, seed=7,
                   sigma=0.2, lazy_replicas=True, beta=1e-4)
print(f"lazy replicas: {m.steal_count} steals, {m.rebuild_time:.1f} time units rebuilding")
