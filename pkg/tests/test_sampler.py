from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heteroforge.errors import ConfigurationError, IncompleteBatchError, StructuralError
from heteroforge.graph import HeteroSchema, homogenize
from heteroforge.net import NodeServer, RpcClient
from heteroforge.partition import build_constraints, materialize_partitions, partition_multiconstraint, second_level_partition
from heteroforge.sampler import (
    FULL,
    AdjacencyView,
    DistributedSampler,
    LinkTaskBuilder,
    SampledBlock,
    SampledEdges,
    TargetBatch,
    compact,
    compute_frontier_bundled,
    frontier,
    make_link_task,
    sample_blocks,
    sample_one_hop,
    sample_one_hop_local,
    schedule,
    split_local_remote,
    stitch,
)
from heteroforge.synthetic import random_hetero


def star(deg, n_types=1):
    """Vertex 0 with `deg` in-neighbors per edge type."""
    n = deg + 1
    ets = [("v", f"r{i}", "v") for i in range(n_types)]
    schema = HeteroSchema.from_counts({"v": n}, ets)
    return homogenize(schema, {f"r{i}": [(j, 0) for j in range(1, n)] for i in range(n_types)})


def test_schedule_sizes_and_determinism():
    batches = list(schedule(np.arange(10), 4, epoch_seed=7, epochs=1))
    assert [len(b.seeds) for b in batches] == [4, 4, 2]
    assert [b.seq_no for b in batches] == [0, 1, 2]
    again = list(schedule(np.arange(10), 4, epoch_seed=7, epochs=1))
    assert all(np.array_equal(a.seeds, b.seeds) for a, b in zip(batches, again))
    assert sorted(np.concatenate([b.seeds for b in batches]).tolist()) == list(range(10))
    with pytest.raises(ConfigurationError):
        next(schedule([], 4, 0))


def test_schedule_continues_across_epochs():
    it = schedule(np.arange(6), 4, epoch_seed=1, steps_per_epoch=1)
    got = [next(it) for _ in range(3)]
    assert [(b.epoch, b.step, b.seq_no) for b in got] == [(0, 0, 0), (1, 0, 1), (2, 0, 2)]


def test_schedule_first_position_uniform():
    it = schedule(np.arange(5), 1, epoch_seed=3, epochs=10_000)
    counts = Counter(int(b.seeds[0]) for b in it if b.step == 0)
    sigma = np.sqrt(10_000 * 0.2 * 0.8)
    for v in range(5):
        assert abs(counts[v] - 2000) <= 3 * sigma


def test_one_hop_small_degree_and_empty():
    g = star(3)
    view = AdjacencyView.of_graph(g)
    e = sample_one_hop(view, [0], 5, (0, 0), 0)
    assert sorted(e.src.tolist()) == [1, 2, 3] and np.all(e.dst == 0)
    assert len(sample_one_hop(view, [1], 5, (0, 0), 0)) == 0


def test_one_hop_inclusion_frequency():
    g = star(10)
    view = AdjacencyView.of_graph(g)
    counts = np.zeros(11)
    trials = 100_000
    for seq in range(trials):
        e = sample_one_hop(view, [0], 4, (12345, seq), 0)
        assert len(e) == 4
        counts[e.src] += 1
    freq = counts[1:] / trials
    assert np.all(np.abs(freq - 0.4) <= 0.01), freq


def test_per_edge_type_fanout():
    g = star(6, n_types=3)
    e = sample_one_hop(AdjacencyView.of_graph(g), [0], 2, (0, 1), 0)
    types = g.edge_types_of(e.eid)
    assert len(e) == 6 and Counter(types.tolist()) == {0: 2, 1: 2, 2: 2}
    e = sample_one_hop(AdjacencyView.of_graph(g), [0], FULL, (0, 1), 0)
    assert len(e) == 18


@pytest.fixture(scope="module")
def hetero():
    sg = random_hetero({"a": 300, "b": 200}, [("a", "x", "b"), ("b", "y", "a"), ("a", "z", "a")], 1500, seed=1)
    first = partition_multiconstraint(sg.graph, 3, build_constraints(sg.graph), seed=1)
    book = second_level_partition(sg.graph, first, 1)
    parts = [p for p, _ in materialize_partitions(sg.graph, book)]
    return sg.graph, book, parts


def test_fanout_bound(hetero):
    g, _, _ = hetero
    seeds = np.arange(0, 500, 3)
    e = sample_one_hop(AdjacencyView.of_graph(g), seeds, 2, (5, 5), 0)
    types = g.edge_types_of(e.eid)
    c = Counter(zip(e.dst.tolist(), types.tolist()))
    for (v, t), n in c.items():
        indeg_t = sum(1 for _, eid in g.in_neighbors(v) if g.edge_types_of(eid) == t)
        assert n == min(2, indeg_t)
    assert set(e.dst.tolist()) <= set(seeds.tolist())
    assert np.all(g.dst[e.eid] == e.dst) and np.all(g.src[e.eid] == e.src)


def test_split_and_stitch_match_oracle(hetero):
    g, book, parts = hetero
    rng = np.random.default_rng(0)
    seeds = rng.permutation(g.num_vertices)[:120]
    subsets = split_local_remote(seeds, book.part_of)
    for p, s in subsets.items():
        assert np.all(book.part_of[s] == p)
    results = {p: sample_one_hop_local(parts[p], s, 3, (9, 4), 1) for p, s in subsets.items()}
    stitched = stitch(seeds, subsets, results)
    oracle = sample_one_hop(AdjacencyView.of_graph(g), seeds, 3, (9, 4), 1)
    assert stitched.equals(oracle)
    p0 = next(iter(subsets))
    assert stitch(subsets[p0], {p0: subsets[p0]}, {p0: results[p0]}).equals(results[p0])
    with pytest.raises(IncompleteBatchError):
        stitch(seeds, subsets, {p0: results[p0]})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 49), max_size=30, unique=True), st.lists(st.integers(0, 3), min_size=50, max_size=50))
def test_partition_of_union(seeds, owners):
    seeds = np.array(seeds, dtype=np.int64)
    subsets = split_local_remote(seeds, np.array(owners))
    union = np.concatenate(list(subsets.values())) if subsets else np.zeros(0, np.int64)
    assert sorted(union.tolist()) == sorted(seeds.tolist())
    for p, s in subsets.items():
        assert all(owners[v] == p for v in s)
        assert s.tolist() == [v for v in seeds.tolist() if owners[v] == p]


def test_distributed_blocks_bitwise_equal_to_single_machine(hetero):
    g, book, parts = hetero
    servers = [NodeServer().start() for _ in parts]
    peers = {m: s.address for m, s in enumerate(servers)}
    samplers = [DistributedSampler(m, parts[m], book.part_of, RpcClient(peers), fanouts=(4, 3, 2)) for m in range(3)]
    for s, srv in zip(samplers, servers):
        s.attach(srv)
    try:
        view = AdjacencyView.of_graph(g)
        rng = np.random.default_rng(2)
        for seq in range(10):
            seeds = rng.choice(g.num_vertices, 20, replace=False)
            oracle = sample_blocks(view, seeds, (4, 3, 2), (77, seq))
            got = samplers[seq % 3].sample_blocks(seeds, (77, seq))
            for a, b in zip(oracle, got):
                assert np.array_equal(a.dst_nodes, b.dst_nodes) and a.edges.equals(b.edges)
    finally:
        for s in samplers:
            s.client.close()
        for srv in servers:
            srv.stop()


def test_inclusion_total_variation_partitioned(hetero):
    g, book, parts = hetero
    view = AdjacencyView.of_graph(g)
    indeg = np.diff(g.indptr)
    v = int(np.argmax(indeg))
    owner = book.part_of[v]
    trials = 2000
    a = Counter()
    b = Counter()
    for seq in range(trials):
        a.update(sample_one_hop(view, [v], 2, (1, seq), 0).eid.tolist())
        b.update(sample_one_hop_local(parts[owner], [v], 2, (1, seq), 0).eid.tolist())
    keys = set(a) | set(b)
    tv = 0.5 * sum(abs(a[k] - b[k]) for k in keys) / trials
    assert tv < 0.02


def test_frontier_examples():
    assert frontier([3, 1, 3, 2], [1]).tolist() == [1, 2, 3]
    assert frontier([], [4, 2]).tolist() == [2, 4]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 30), max_size=15), st.lists(st.integers(0, 30), max_size=5)),
                max_size=6))
def test_bundled_equals_unbundled(batches):
    bundled = compute_frontier_bundled(batches)
    assert len(bundled) == len(batches)
    for (src, dst), got in zip(batches, bundled):
        assert np.array_equal(got, frontier(src, dst))


def test_compact_single_edge():
    blocks = [SampledBlock(0, np.array([5]), SampledEdges(np.array([9]), np.array([5]), np.array([0])))]
    mb = compact(blocks, np.array([5]), np.array([0, 1]))
    assert mb.local2global.tolist() == [5, 9]
    assert mb.block_dst[0].tolist() == [0] and mb.block_src[0].tolist() == [1]
    assert mb.sizes == [1, 2]


def test_compact_bijective_and_isomorphic(hetero):
    g, _, _ = hetero
    view = AdjacencyView.of_graph(g)
    rng = np.random.default_rng(4)
    for seq in range(20):
        seeds = rng.choice(g.num_vertices, 15, replace=False)
        blocks = sample_blocks(view, seeds, (3, 3, 2), (2, seq))
        mb = compact(blocks, seeds, g.edge_type_offsets, seq)
        l2g = mb.local2global
        assert len(np.unique(l2g)) == len(l2g)
        assert np.array_equal(l2g[: len(seeds)], seeds)
        assert np.array_equal(np.sort(l2g), mb.input_nodes)
        for h, b in enumerate(blocks):
            # dst set of hop h is the prefix [0, sizes[h])
            assert np.all(mb.block_dst[h] < mb.sizes[h])
            assert set(l2g[: mb.sizes[h]].tolist()) == set(b.dst_nodes.tolist())
            before = Counter(zip(b.edges.src.tolist(), b.edges.dst.tolist(), b.edges.eid.tolist()))
            after = Counter(zip(l2g[mb.block_src[h]].tolist(), l2g[mb.block_dst[h]].tolist(), mb.block_eid[h].tolist()))
            assert before == after
        # every vertex is a seed or a sampled source somewhere
        used = set(seeds.tolist()).union(*[set(l2g[s].tolist()) for s in mb.block_src])
        assert used == set(l2g.tolist())


def test_compact_rejects_inconsistent_layers():
    e = SampledEdges(np.array([2]), np.array([1]), np.array([0]))
    blocks = [SampledBlock(0, np.array([1]), e), SampledBlock(1, np.array([7]), SampledEdges.empty())]
    with pytest.raises(StructuralError):
        compact(blocks, np.array([1]), np.array([0, 1]))


def test_make_link_task():
    base = TargetBatch("vertex", 0, 0, 0, (0, 0), np.array([0]))
    rng = np.random.default_rng(0)
    t = make_link_task(base, [1], [10], ([10], [20]), 1, rng)
    assert t.pos_pairs.shape == (1, 2) and t.neg_pairs.shape == (1, 2)
    assert 2 <= len(t.seeds) <= 3
    with pytest.raises(ConfigurationError):
        make_link_task(base, [1], [10], ([10], [20]), 0, rng)
    t = make_link_task(base, np.zeros(20_000, np.int64), np.full(20_000, 12), (10, 20), 1, rng)
    negs = t.neg_pairs[:, 1]
    assert negs.min() >= 10 and negs.max() < 20
    counts = np.bincount(negs - 10, minlength=10)
    sigma = np.sqrt(20_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 2000) <= 3 * sigma)


def test_link_builder_respects_type_ranges(hetero):
    g, _, _ = hetero
    build = LinkTaskBuilder(g, num_negatives=3)
    eids = np.arange(0, g.num_edges, 17)
    t = build(TargetBatch("vertex", 4, 0, 4, (1, 4), eids))
    dst_types = g.vertex_types_of(t.neg_pairs[:, 1])
    assert np.array_equal(dst_types, np.repeat(g.vertex_types_of(g.dst[eids]), 3))
    assert np.array_equal(t.seeds, np.unique(np.concatenate([t.pos_pairs.ravel(), t.neg_pairs.ravel()])))
