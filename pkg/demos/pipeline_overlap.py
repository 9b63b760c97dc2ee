"""How much does overlapping sampling, feature fetch and device staging buy?

Every sampling or feature RPC is delayed by 2 ms and the device stage by 1 ms,
then the same batch stream is drawn with one batch in flight and with the
default (25, 5, 1) stage capacities.  The batches are identical; only the rate differs.
"""
import time

from heteroforge.cluster import LocalCluster
from heteroforge.net import Verb
from heteroforge.pipeline import SERIAL, CapacityConfig
from heteroforge.sampler import schedule
from heteroforge.synthetic import random_hetero

sg = random_hetero({"a": 300, "b": 200}, [("a", "ab", "b"), ("b", "ba", "a")], 1500, feat_dim=16, seed=1)
delays = {Verb.SAMPLE_NEIGHBORS: 0.002, Verb.PULL_DATA: 0.002}

with LocalCluster.from_graph(sg, 2, fanouts=(15, 10, 5), delays=delays) as cl:
    node = cl.nodes[0]
    prints = {}
    for caps in (SERIAL, CapacityConfig(25, 5, 1)):
        with node.pipeline(schedule(node.train_ids(0), 16, 5), caps, device_latency=0.001) as p:
            t0 = time.perf_counter()
            batches = [p.next_minibatch(timeout=60) for _ in range(100)]
            dt = time.perf_counter() - t0
        prints[caps] = [mb.fingerprint() for mb in batches]
        print(f"capacities {caps.as_tuple()}: {100 / dt:6.1f} batches/s")
    a, b = prints.values()
    print("identical batch streams:", a == b)
