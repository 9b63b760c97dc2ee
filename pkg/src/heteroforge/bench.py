"""Ablation measurements: partitioning method, trainer sub-partitioning, pipeline capacities.

Every function returns plain dict rows so results can be written as CSV.
"""
from __future__ import annotations

import csv
import time

import numpy as np

from .cluster import LocalCluster, make_book, steps_per_epoch, train_counts
from .graph import MASK_TRAIN
from .net import Verb
from .pipeline import SERIAL, CapacityConfig
from .sampler import AdjacencyView, compact, sample_blocks, schedule

FIELDS = ["ablation", "config", "batches", "seconds", "batches_per_s", "epoch_time", "mean_unique_vertices",
          "remote_bytes", "local_bytes"]


def _row(ablation, config, **kw):
    row = dict.fromkeys(FIELDS, "")
    row.update(ablation=ablation, config=config, **kw)
    return row


def remote_bytes(sg, k: int, method: str, fanouts=(10, 5), batch_size: int = 32, batches: int = 20,
                 seed: int = 0) -> dict:
    """Feature bytes pulled locally and remotely by trainer 0 of every machine."""
    with LocalCluster.from_graph(sg, k, 1, fanouts, seed=seed, method=method) as cl:
        t0 = time.perf_counter()
        for node in cl.nodes:
            node.kvstore.reset_counters()
            ex = node.serial(schedule(node.train_ids(0), batch_size, seed))
            for _ in range(batches):
                ex.next_minibatch()
        dt = time.perf_counter() - t0
        local = sum(n.kvstore.bytes_local for n in cl.nodes)
        remote = sum(n.kvstore.bytes_remote for n in cl.nodes)
    n = batches * k
    return _row("partition", method, batches=n, seconds=round(dt, 4), batches_per_s=round(n / dt, 2),
                remote_bytes=remote, local_bytes=local)


def unique_vertices(sg, k: int, trainers: int, two_level: bool, fanouts=(10, 5), batch_size: int = 32,
                    batches: int = 200, seed: int = 0, book=None) -> dict:
    """Mean compacted vertex count per mini-batch when trainers draw seeds from their sub-partition.

    Sampling content does not depend on placement, so this runs on one machine.
    """
    g = sg.graph
    if book is None:
        book = make_book(g, k, trainers, seed=seed, two_level=two_level)
    view = AdjacencyView.of_graph(g)
    train = g.masks == MASK_TRAIN
    streams = []
    for m in range(k):
        for t in range(trainers):
            ids = np.flatnonzero(train & (book.part_of == m) & (book.second_level == t))
            if len(ids):
                streams.append(schedule(ids, batch_size, seed, stream=m * trainers + t))
    counts = []
    t0 = time.perf_counter()
    while len(counts) < batches:
        for s in streams:
            tb = next(s)
            blocks = sample_blocks(view, tb.seeds, fanouts, tb.key)
            counts.append(compact(blocks, tb.seeds, g.edge_type_offsets).num_nodes)
            if len(counts) == batches:
                break
    dt = time.perf_counter() - t0
    return _row("trainer_split", "2-level" if two_level else "1-level", batches=batches, seconds=round(dt, 4),
                batches_per_s=round(batches / dt, 2), mean_unique_vertices=float(np.mean(counts)))


def pipeline_throughput(sg, k: int, capacities: CapacityConfig, fanouts=(15, 10, 5), batch_size: int = 16,
                        batches: int = 150, warmup: int = 10, rpc_latency: float = 0.002,
                        device_latency: float = 0.001, seed: int = 0, cluster: LocalCluster | None = None) -> dict:
    """Mini-batches per second delivered to trainer 0 of machine 0 with injected latencies."""
    own = cluster is None
    if own:
        delays = {Verb.SAMPLE_NEIGHBORS: rpc_latency, Verb.PULL_DATA: rpc_latency} if rpc_latency else None
        cluster = LocalCluster.from_graph(sg, k, 1, fanouts, seed=seed, delays=delays)
    try:
        node = cluster.nodes[0]
        counts = train_counts(sg.graph, cluster.book)
        with node.pipeline(schedule(node.train_ids(0), batch_size, seed), capacities,
                           device_latency=device_latency) as p:
            for _ in range(warmup):
                p.next_minibatch(timeout=60)
            t0 = time.perf_counter()
            for _ in range(batches):
                p.next_minibatch(timeout=60)
            dt = time.perf_counter() - t0
    finally:
        if own:
            cluster.close()
    rate = batches / dt
    spe = steps_per_epoch(counts, batch_size)
    name = "serial" if capacities == SERIAL else "async"
    return _row("pipeline", f"{name} {','.join(map(str, capacities.as_tuple()))}", batches=batches,
                seconds=round(dt, 4), batches_per_s=round(rate, 2), epoch_time=round(spe / rate, 4))


def run_ablations(sg, k: int = 4, trainers: int = 2, seed: int = 0, batches: int = 200,
                  rpc_latency: float = 0.002, device_latency: float = 0.001, pipeline_machines: int = 2) -> list[dict]:
    rows = [remote_bytes(sg, k, m, seed=seed) for m in ("random", "mincut")]
    rows += [unique_vertices(sg, k, trainers, two, batches=batches, seed=seed) for two in (False, True)]
    delays = {Verb.SAMPLE_NEIGHBORS: rpc_latency, Verb.PULL_DATA: rpc_latency} if rpc_latency else None
    with LocalCluster.from_graph(sg, pipeline_machines, 1, (15, 10, 5), seed=seed, delays=delays) as cl:
        for caps in (SERIAL, CapacityConfig()):
            rows.append(pipeline_throughput(sg, pipeline_machines, caps, device_latency=device_latency, seed=seed,
                                            cluster=cl))
    return rows


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, FIELDS)
        w.writeheader()
        w.writerows(rows)
