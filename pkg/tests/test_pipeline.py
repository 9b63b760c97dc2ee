import csv
import threading
import time

import numpy as np
import pytest

from heteroforge.cluster import LocalCluster
from heteroforge.errors import ConfigurationError, PipelineError, StateError
from heteroforge.graph import gather_rows
from heteroforge.net import ProcessGroup, Verb
from heteroforge.pipeline import SERIAL, CapacityConfig, PriorityWorkerPool, Stage
from heteroforge.sampler import schedule
from heteroforge.synthetic import random_hetero


@pytest.fixture(scope="module")
def sg():
    return random_hetero({"a": 120, "b": 80}, [("a", "ab", "b"), ("b", "ba", "a")], 600, feat_dim=4, seed=3)


@pytest.fixture(scope="module")
def cluster(sg):
    with LocalCluster.from_graph(sg, 2, trainers=1, fanouts=(4, 3), seed=0) as cl:
        yield cl


def targets(node, batch=8, seed=11, epochs=None, **kw):
    return schedule(node.train_ids(0), batch, seed, epochs=epochs, **kw)


# -- worker pool ---------------------------------------------------------------------------


def _blocked_pool():
    pool = PriorityWorkerPool(1, trace=True)
    gate = threading.Event()
    pool.submit(0, -1, gate.wait)
    while pool.pending():
        time.sleep(0.001)
    return pool, gate


def test_pool_later_stage_first_then_fifo():
    pool, gate = _blocked_pool()
    order, done = [], threading.Event()
    jobs = [(Stage.SCHEDULE, 0), (Stage.COMPACT, 5), (Stage.NEIGHBOR_SAMPLE, 2), (Stage.COMPACT, 1),
            (Stage.NEIGHBOR_SAMPLE, 1)]
    for stage, seq in jobs:
        pool.submit(stage, seq, order.append, (int(stage), seq))
    pool.submit(-1, 0, done.set)
    gate.set()
    assert done.wait(5)
    pool.shutdown()
    assert order == [(4, 1), (4, 5), (1, 1), (1, 2), (0, 0)]


def test_pool_trace_never_prefers_earlier_stage():
    pool, gate = _blocked_pool()
    rng = np.random.default_rng(0)
    left = threading.Semaphore(0)
    for i in range(300):
        pool.submit(int(rng.integers(0, 7)), i, left.release)
    gate.set()
    for _ in range(300):
        assert left.acquire(timeout=5)
    pool.shutdown()
    for stage, _, waiting in pool.trace[1:]:
        assert waiting is None or stage >= waiting


def test_pool_rejects_after_shutdown():
    pool = PriorityWorkerPool(1)
    pool.shutdown()
    with pytest.raises(StateError):
        pool.submit(0, 0, print)


# -- capacity config ----------------------------------------------------------------------------


def test_capacity_parse_and_validation():
    assert CapacityConfig.parse("25,5,1") == CapacityConfig()
    assert CapacityConfig.parse("1,1,1") == SERIAL
    for bad in ("1,1", "a,b,c", "0,1,1"):
        with pytest.raises(ConfigurationError):
            CapacityConfig.parse(bad)


# -- lifecycle and ordering ---------------------------------------------------------------------


def test_start_stop_without_consuming(cluster):
    node = cluster.nodes[0]
    p = node.pipeline(targets(node)).start()
    p.stop()
    assert p.delivered == 0


def test_double_start_and_unstarted_use(cluster):
    node = cluster.nodes[0]
    p = node.pipeline(targets(node))
    with pytest.raises(StateError):
        p.next_minibatch()
    p.start()
    try:
        with pytest.raises(StateError):
            p.start()
    finally:
        p.stop()


def test_delivers_in_seq_order_from_zero(cluster):
    node = cluster.nodes[0]
    with node.pipeline(targets(node), trace=True) as p:
        seqs = [p.next_minibatch(timeout=30).seq_no for _ in range(100)]
        assert seqs == list(range(100))
        assert p.max_occupancy[2] <= 1
        assert all(m <= c for m, c in zip(p.max_occupancy, p.caps.as_tuple()))


def test_finite_stream_ends_with_none(cluster):
    node = cluster.nodes[0]
    n = len(node.train_ids(0))
    with node.pipeline(targets(node, epochs=2)) as p:
        got = list(p)
        assert p.next_minibatch(timeout=1) is None
    assert len(got) == 2 * -(-n // 8)


def test_features_equal_direct_gather(cluster, sg):
    node = cluster.nodes[0]
    with node.pipeline(targets(node)) as p:
        for _ in range(10):
            mb = p.next_minibatch(timeout=30)
            assert np.array_equal(mb.features, gather_rows(sg.graph, sg.features, mb.local2global))
            assert np.array_equal(mb.labels, sg.graph.labels[mb.seeds])


@pytest.mark.parametrize("caps", [SERIAL, CapacityConfig(), CapacityConfig(3, 2, 1)])
def test_content_matches_serial_executor(cluster, caps):
    node = cluster.nodes[1]
    ref = node.serial(targets(node, seed=5))
    want = [ref.next_minibatch().fingerprint() for _ in range(40)]
    with node.pipeline(targets(node, seed=5), caps) as p:
        got = [p.next_minibatch(timeout=30).fingerprint() for _ in range(40)]
    assert got == want


def test_epochs_overlap_without_drain(cluster):
    node = cluster.nodes[0]
    with node.pipeline(targets(node, steps_per_epoch=6), trace=True) as p:
        mbs = [p.next_minibatch(timeout=30) for _ in range(30)]
    assert [m.seq_no for m in mbs] == list(range(30))
    assert [m.epoch for m in mbs] == [i // 6 for i in range(30)]
    # the next epoch's first batch is scheduled before the previous epoch's last is compacted
    for e in range(4):
        last, first = 6 * e + 5, 6 * (e + 1)
        assert p.metrics[(first, int(Stage.SCHEDULE))][0] < p.metrics[(last, int(Stage.COMPACT))][2]


# -- failures -----------------------------------------------------------------------------------


def test_failure_is_confined_to_its_seq(cluster):
    node = cluster.nodes[0]

    def transform(t):
        if t.seq_no == 3:
            raise RuntimeError("boom")
        return t

    with node.pipeline(targets(node), transform=transform) as p:
        for i in range(3):
            assert p.next_minibatch(timeout=30).seq_no == i
        with pytest.raises(PipelineError) as info:
            p.next_minibatch(timeout=30)
        assert info.value.seq_no == 3
        assert [p.next_minibatch(timeout=30).seq_no for _ in range(5)] == [4, 5, 6, 7, 8]


def test_peer_loss_surfaces_with_seq(sg):
    cl = LocalCluster.from_graph(sg, 2, trainers=1, fanouts=(4, 3), seed=0, method="random")
    try:
        for n in cl.nodes:
            n.client.timeout = 2.0
        node = cl.nodes[0]
        with node.pipeline(targets(node)) as p:
            p.next_minibatch(timeout=30)
            cl.nodes[1].server.stop()
            with pytest.raises(PipelineError) as info:
                for _ in range(40):
                    p.next_minibatch(timeout=30)
            assert info.value.seq_no >= 1
    finally:
        cl.close()


# -- non-interference and throughput --------------------------------------------------------


def test_stalled_trainer_lets_sampling_fill_to_capacity(cluster):
    node = cluster.nodes[0]
    caps = CapacityConfig(6, 3, 1)
    group_done = threading.Event()

    def late_rank():
        g = ProcessGroup(cluster.nodes[1].client, 0, 1, 2, name="stall")
        time.sleep(1.0)
        g.barrier()
        group_done.set()

    with node.pipeline(targets(node), caps, trace=True) as p:
        helper = threading.Thread(target=late_rank)
        helper.start()
        # the training thread sits in a collective for about a second
        ProcessGroup(node.client, 0, 0, 2, name="stall").barrier()
        helper.join()
        assert group_done.is_set()
        assert p.delivered == 0
        assert tuple(p._inflight) == caps.as_tuple()
        assert [p.next_minibatch(timeout=30).seq_no for _ in range(20)] == list(range(20))
        assert p.max_occupancy == list(caps.as_tuple())


def _throughput(node, caps, n=60):
    with node.pipeline(targets(node), caps) as p:
        for _ in range(5):
            p.next_minibatch(timeout=30)
        t = time.perf_counter()
        for _ in range(n):
            p.next_minibatch(timeout=30)
        return n / (time.perf_counter() - t)


def test_more_cpu_capacity_hides_pull_latency(sg):
    with LocalCluster.from_graph(sg, 2, trainers=1, fanouts=(4, 3), seed=0, delays={Verb.PULL_DATA: 0.005}) as cl:
        node = cl.nodes[0]
        slow = _throughput(node, CapacityConfig(25, 1, 1))
        fast = _throughput(node, CapacityConfig(25, 5, 1))
    assert fast > 1.5 * slow


def test_metrics_csv(cluster, tmp_path):
    node = cluster.nodes[0]
    path = tmp_path / "metrics.csv"
    p = node.pipeline(targets(node), metrics_path=str(path)).start()
    for _ in range(5):
        p.next_minibatch(timeout=30)
    p.stop()
    rows = list(csv.DictReader(path.open()))
    assert set(rows[0]) == {"seq_no", "stage", "enqueue", "start", "end", "bytes"}
    done = {(int(r["seq_no"]), r["stage"]) for r in rows if r["end"]}
    for seq in range(5):
        for st in ("SCHEDULE", "NEIGHBOR_SAMPLE", "CPU_FEATURE_COPY", "DEVICE_FEATURE_COPY", "COMPACT"):
            assert (seq, st) in done
    copy = [r for r in rows if r["stage"] == "CPU_FEATURE_COPY" and r["end"]]
    assert all(int(r["bytes"]) > 0 for r in copy)
