import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heteroforge.errors import ConfigurationError, OwnershipError, RangeError, TransportError
from heteroforge.graph import gather_rows
from heteroforge.kvstore import IdSpace, KVShard, KVStore, graph_spaces
from heteroforge.net import NodeServer, RpcClient
from heteroforge.partition import build_constraints, materialize_partitions, partition_multiconstraint, second_level_partition
from heteroforge.synthetic import random_hetero


class Harness:
    """k node servers, each with a KVStore holding its shards."""

    def __init__(self, sg, k, seed=0, max_rpc_bytes=None):
        g = sg.graph
        first = partition_multiconstraint(g, k, build_constraints(g), seed=seed)
        self.book = second_level_partition(g, first, 1)
        parts = materialize_partitions(g, self.book, sg.features)
        widths = {n: f.row_width for n, f in sg.features.items()}
        self.servers = [NodeServer(name=f"node{m}").start() for m in range(k)]
        peers = {m: s.address for m, s in enumerate(self.servers)}
        self.stores = []
        for m in range(k):
            kw = {} if max_rpc_bytes is None else {"max_rpc_bytes": max_rpc_bytes}
            store = KVStore(m, RpcClient(peers, timeout=5), **kw)
            shards = parts[m][1]
            for space in graph_spaces(g, self.book, widths):
                sh = shards[space.name]
                store.register_space(space, KVShard(space.name, sh.owned_ids, sh.values.copy()))
            store.set_vertex_layout(g.schema.vertex_types, g.vertex_type_offsets)
            store.attach(self.servers[m])
            self.stores.append(store)

    def close(self):
        for s in self.stores:
            s.client.close()
        for s in self.servers:
            s.stop()


@pytest.fixture(scope="module")
def graph():
    return random_hetero({"user": 120, "item": 80}, [("user", "buys", "item"), ("item", "sold", "user")], 400,
                         feat_dim=5, seed=3)


@pytest.fixture
def harness(graph):
    h = Harness(graph, 3)
    yield h
    h.close()


def test_register_spaces(graph):
    g = graph.graph
    from heteroforge.partition import PartitionAssignment, PartitionBook

    first = PartitionAssignment(np.zeros(g.num_vertices, np.int64), 1, np.zeros((1, 1)))
    book = PartitionBook(first, np.zeros(g.num_vertices, np.int64), 1, g.vertex_type_offsets, g.edge_type_offsets)
    spaces = graph_spaces(g, book, {"user": 5, "item": 5, "buys": 2})
    store = KVStore()
    for s in spaces:
        store.register_space(s)
    assert sorted(store.spaces) == ["buys", "item", "user"]
    with pytest.raises(ConfigurationError):
        store.register_space(spaces[0])
    full = graph_spaces(g, book, {"user": 1, "item": 1, "buys": 1, "sold": 1})
    assert len(full) == len(g.schema.vertex_types) + len(g.schema.edge_types)


def test_mixed_pull_matches_oracle_gather(harness, graph):
    g = graph.graph
    rng = np.random.default_rng(0)
    ids = rng.integers(0, g.num_vertices, 300)
    for store in harness.stores:
        got = store.pull_vertices(np.sort(ids))
        assert np.array_equal(got, gather_rows(g, graph.features, np.sort(ids)))
        for name, fm in graph.features.items():
            local_ids = rng.integers(0, fm.num_rows, 50)
            assert np.array_equal(store.pull(name, local_ids), fm.values[local_ids])
    assert harness.stores[0].bytes_remote > 0 and harness.stores[0].bytes_local > 0


def test_unsorted_mixed_type_pull(harness, graph):
    g = graph.graph
    ids = np.array([150, 3, 199, 3, 0, 121])
    assert np.array_equal(harness.stores[1].pull_vertices(ids), gather_rows(g, graph.features, ids))


def test_duplicates_and_chunking(graph):
    h = Harness(graph, 2, max_rpc_bytes=40)  # two 5-wide rows per RPC
    try:
        fm = graph.features["user"]
        ids = np.array([7, 7] + list(range(120)))
        assert np.array_equal(h.stores[0].pull("user", ids), fm.values[ids])
        a, b = ids[:50], ids[50:]
        assert np.array_equal(h.stores[1].pull("user", ids), np.concatenate([h.stores[1].pull("user", a),
                                                                             h.stores[1].pull("user", b)]))
    finally:
        h.close()


def test_push_remote_visible_from_third_node(harness):
    space = harness.stores[0].spaces["item"]
    remote_ids = np.flatnonzero(space.owner == 1)[:5]
    rows = np.arange(25, dtype=np.float32).reshape(5, 5) + 0.5
    harness.stores[0].push("item", remote_ids, rows)
    assert np.array_equal(harness.stores[2].pull("item", remote_ids), rows)
    assert np.array_equal(harness.stores[1].local_gather("item", remote_ids), rows)
    harness.stores[0].push("item", [], np.zeros((0, 5), np.float32))


def test_range_and_ownership_errors(harness):
    store = harness.stores[0]
    with pytest.raises(RangeError):
        store.pull("user", [120])
    other = np.flatnonzero(store.spaces["user"].owner != 0)[:1]
    with pytest.raises(OwnershipError):
        store.local_gather("user", other)
    mine = np.flatnonzero(store.spaces["user"].owner == 0)[:4]
    assert np.array_equal(store.local_gather("user", mine), store.pull("user", mine))


def test_local_gather_interval_example():
    shard = KVShard("v", np.arange(10), np.arange(20, dtype=np.float32).reshape(10, 2))
    assert shard.local_gather([3, 5]).tolist() == [[6, 7], [10, 11]]
    with pytest.raises(OwnershipError):
        shard.local_gather([10])


def test_unreachable_owner_names_partition():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    store = KVStore(0, RpcClient({1: ("127.0.0.1", port)}, timeout=1))
    store.register_space(IdSpace("v", 4, 1, [0, 0, 1, 1]), KVShard("v", [0, 1], np.zeros((2, 1), np.float32)))
    with pytest.raises(TransportError) as info:
        store.pull("v", [0, 3])
    assert info.value.peer == 1
    store.client.close()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 119), max_size=40), st.lists(st.integers(0, 119), max_size=40))
def test_gather_linearity(a, b):
    h = _shared_harness()
    store = h.stores[2]
    both = store.pull("user", a + b)
    assert np.array_equal(both, np.concatenate([store.pull("user", a), store.pull("user", b)]))
    owners = store.spaces["user"].owner
    # routing soundness: every ID lives in exactly one shard, the one its owner holds
    for m, st_ in enumerate(h.stores):
        assert np.array_equal(st_.shards["user"].owned_ids, np.flatnonzero(owners == m))


_SHARED = {}
_LOCK = threading.Lock()


def _shared_harness():
    with _LOCK:
        if "h" not in _SHARED:
            sg = random_hetero({"user": 120, "item": 80}, [("user", "buys", "item"), ("item", "sold", "user")], 400,
                               feat_dim=5, seed=3)
            _SHARED["h"] = Harness(sg, 3)
        return _SHARED["h"]


def teardown_module(module):
    if "h" in _SHARED:
        _SHARED.pop("h").close()
