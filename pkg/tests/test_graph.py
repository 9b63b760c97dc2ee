import json
from collections import Counter

import numpy as np
import pytest

from heteroforge.errors import GraphIOError, RangeError, StructuralError
from heteroforge.formats import load_graph, read_arrays, save_graph, write_arrays, write_feature_file
from heteroforge.graph import FeatureMatrix, HeteroSchema, homogenize


@pytest.fixture
def user_item():
    schema = HeteroSchema.from_counts({"user": 3, "item": 2}, [("user", "buys", "item")])
    return homogenize(schema, {"buys": [(0, 0), (2, 1)]})


def random_typed_graph(seed, n=50, m=200):
    rng = np.random.default_rng(seed)
    counts = {"a": 20, "b": 18, "c": n - 38}
    ets = [("a", "r1", "b"), ("b", "r2", "a"), ("c", "r3", "c"), ("a", "r4", "c")]
    lists = {}
    per = rng.multinomial(m, [0.25] * 4)
    for (s, r, d), cnt in zip(ets, per):
        lists[r] = np.stack([rng.integers(0, counts[s], cnt), rng.integers(0, counts[d], cnt)], 1)
    return HeteroSchema.from_counts(counts, ets), lists


def test_homogenize_user_item(user_item):
    g = user_item
    assert g.num_vertices == 5 and g.num_edges == 2
    assert (g.src[0], g.dst[0]) == (0, 3)
    assert g.in_neighbors(3) == [(0, 0)]
    assert g.in_neighbors(4) == [(2, 1)]


def test_empty_edge_lists():
    schema = HeteroSchema.from_counts({"user": 3, "item": 2}, [("user", "buys", "item")])
    g = homogenize(schema, {"buys": []})
    assert g.num_vertices == 5 and g.num_edges == 0
    assert np.all(g.indptr == 0)


def test_typed_id_out_of_range_names_edge_type():
    schema = HeteroSchema.from_counts({"user": 3, "item": 2}, [("user", "buys", "item")])
    with pytest.raises(StructuralError, match="buys.*edge index 1"):
        homogenize(schema, {"buys": [(0, 0), (0, 2)]})


def test_to_global_to_typed(user_item):
    g = user_item
    assert g.to_global("item", 0) == 3
    assert g.to_typed(4) == (1, 1)
    for v in range(5):
        assert g.to_global(*g.to_typed(v)) == v
    with pytest.raises(RangeError):
        g.to_global("user", 3)
    with pytest.raises(RangeError):
        g.to_typed(5)


def test_type_contiguity():
    schema, lists = random_typed_graph(1)
    g = homogenize(schema, lists)
    covered = []
    for t, n in enumerate(schema.num_vertices):
        ids = g.to_global(t, np.arange(n))
        assert np.array_equal(ids, np.arange(ids[0], ids[0] + n))
        covered.extend(ids.tolist())
    assert sorted(covered) == list(range(g.num_vertices))


def test_round_trip_exhaustive():
    schema, lists = random_typed_graph(7)
    g = homogenize(schema, lists)
    assert g.num_edges == 200
    seen = Counter()
    for v in range(g.num_vertices):
        for s, eid in g.in_neighbors(v):
            e = int(g.edge_types_of(eid))
            st, si = g.to_typed(s)
            dt, di = g.to_typed(v)
            rel = schema.edge_types[e]
            assert schema.vertex_types[st] == rel[0] and schema.vertex_types[dt] == rel[2]
            seen[(rel[1], si, di)] += 1
    expected = Counter((r, int(a), int(b)) for r, pairs in lists.items() for a, b in pairs)
    assert seen == expected


def test_csr_well_formed():
    schema, lists = random_typed_graph(3)
    g = homogenize(schema, lists)
    assert np.all(np.diff(g.indptr) >= 0) and g.indptr[-1] == g.num_edges
    assert sorted(g.edge_ids.tolist()) == list(range(g.num_edges))
    assert sum(len(g.in_neighbors(v)) for v in range(g.num_vertices)) == g.num_edges
    # sorted by destination, then by edge ID
    for v in range(g.num_vertices):
        eids = g.edge_ids[g.indptr[v] : g.indptr[v + 1]]
        assert np.all(np.diff(eids) > 0)
        assert np.all(g.dst[eids] == v)
    # each edge's ID lies inside its type's range
    for e, (_, rel, _) in enumerate(schema.edge_types):
        lo, hi = g.edge_type_offsets[e], g.edge_type_offsets[e + 1]
        assert hi - lo == len(lists[rel])


def test_isolated_vertex_and_span():
    schema = HeteroSchema.from_counts({"v": 4}, [("v", "e", "v")])
    g = homogenize(schema, {"e": [(0, 1), (2, 1), (3, 1), (1, 2)]})
    assert g.in_neighbors(0) == []
    assert g.indptr[1] == 0 and g.indptr[2] == 3
    assert [s for s, _ in g.in_neighbors(1)] == [0, 2, 3]
    with pytest.raises(RangeError):
        g.in_neighbors(4)


def test_duplicate_edges_kept():
    schema = HeteroSchema.from_counts({"v": 2}, [("v", "e", "v")])
    g = homogenize(schema, {"e": [(0, 1), (0, 1)]})
    assert g.in_neighbors(1) == [(0, 0), (0, 1)]


def test_schema_validation():
    with pytest.raises(StructuralError):
        HeteroSchema.from_counts({"a": 1}, [("a", "r", "b")])
    with pytest.raises(StructuralError):
        HeteroSchema(("a", "a"), (1, 1))


def test_minimal_dataset_loads(tmp_path):
    schema = HeteroSchema.from_counts({"v": 2}, [("v", "e", "v")])
    g = homogenize(schema, {"e": [(0, 1)]})
    save_graph(tmp_path, g)
    schema2, g2, feats = load_graph(tmp_path)
    assert schema2 == schema and feats == {}
    assert g2.num_vertices == 2 and g2.in_neighbors(1) == [(0, 0)]


def test_feature_row_mismatch(tmp_path):
    schema = HeteroSchema.from_counts({"v": 2}, [("v", "e", "v")])
    g = homogenize(schema, {"e": [(0, 1)]})
    save_graph(tmp_path, g, {"v": FeatureMatrix("v", np.ones((2, 3), np.float32))})
    write_feature_file(tmp_path / "feat_v.bin", np.ones((3, 3), np.float32))
    with pytest.raises(StructuralError):
        load_graph(tmp_path)


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(GraphIOError):
        load_graph(tmp_path / "nope")
    schema = HeteroSchema.from_counts({"v": 2}, [("v", "e", "v")])
    save_graph(tmp_path, homogenize(schema, {"e": [(0, 1)]}))
    (tmp_path / "edges_e.bin").write_bytes(b"\x00" * 5)
    with pytest.raises(GraphIOError, match="edges_e.bin"):
        load_graph(tmp_path)
    (tmp_path / "edges_e.bin").unlink()
    with pytest.raises(GraphIOError, match="edges_e.bin"):
        load_graph(tmp_path)
    (tmp_path / "schema.json").write_text("{not json")
    with pytest.raises(GraphIOError, match="schema.json"):
        load_graph(tmp_path)


def test_features_must_be_f32():
    with pytest.raises(StructuralError):
        FeatureMatrix("v", np.ones((2, 2)))


def test_save_load_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    schema = HeteroSchema.from_counts({"p": 600, "q": 400}, [("p", "x", "q"), ("q", "y", "p"), ("p", "z", "p")])
    lists = {
        "x": np.stack([rng.integers(0, 600, 3000), rng.integers(0, 400, 3000)], 1),
        "y": np.stack([rng.integers(0, 400, 2000), rng.integers(0, 600, 2000)], 1),
        "z": np.stack([rng.integers(0, 600, 1000), rng.integers(0, 600, 1000)], 1),
    }
    masks = rng.integers(0, 4, 1000).astype(np.uint8)
    g = homogenize(schema, lists, masks=masks, labels=rng.integers(0, 5, 1000))
    feats = {"p": FeatureMatrix("p", rng.random((600, 4), dtype=np.float32)),
             "q": FeatureMatrix("q", rng.random((400, 4), dtype=np.float32))}
    save_graph(tmp_path / "a", g, feats)
    _, g1, f1 = load_graph(tmp_path / "a")
    save_graph(tmp_path / "b", g1, f1)
    _, g2, f2 = load_graph(tmp_path / "b")
    for name in ("indptr", "indices", "edge_ids", "masks", "labels"):
        assert getattr(g, name).tobytes() == getattr(g1, name).tobytes() == getattr(g2, name).tobytes()
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    assert json.loads((tmp_path / "a" / "schema.json").read_text())["vertex_types"][0]["feat_dim"] == 4
    assert np.array_equal(f2["q"].values, feats["q"].values)


def test_array_container_round_trip(tmp_path):
    arrays = {"a": np.arange(5, dtype=np.int64), "b": np.ones((2, 3), np.float32), "c": np.array([1, 2], np.uint8)}
    write_arrays(tmp_path / "x.bin", arrays)
    back = read_arrays(tmp_path / "x.bin")
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    (tmp_path / "y.bin").write_bytes(b"HFA1" + b"\x01\x00\x00\x00\x01\x00")
    with pytest.raises(GraphIOError):
        read_arrays(tmp_path / "y.bin")
