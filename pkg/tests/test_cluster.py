import numpy as np
import pytest

from heteroforge.cluster import (
    ClusterConfig,
    LocalCluster,
    free_ports,
    launch_local_processes,
    make_book,
    node_data_from_graph,
    read_node_data,
    run_local_training,
    run_trainer,
    steps_per_epoch,
    train_counts,
    write_partition_dir,
)
from heteroforge.errors import ConfigurationError, HeteroForgeError
from heteroforge.graph import MASK_TRAIN
from heteroforge.net import LocalGroup
from heteroforge.pipeline import SERIAL, CapacityConfig
from heteroforge.synthetic import planted_partition
from heteroforge.trainer import TrainConfig


@pytest.fixture(scope="module")
def sg():
    return planted_partition(160, 2, 0.1, 0.01, seed=4, feat_dim=4)


def test_cluster_config_parsing():
    cfg = ClusterConfig.parse("# members\n1 127.0.0.1 9001\n0 127.0.0.1 9000  # first\n")
    assert [m.rank for m in cfg.members] == [0, 1]
    assert cfg.addresses == {0: ("127.0.0.1", 9000), 1: ("127.0.0.1", 9001)}
    for bad in ("0 h 1\n0 h 2", "0 h 1\n2 h 2", "0 h 1\n1 h 1", "", "0 h", "x h 1"):
        with pytest.raises(ConfigurationError):
            ClusterConfig.parse(bad)
    with pytest.raises(ConfigurationError):
        ClusterConfig.load("/nonexistent/cluster.txt")


def test_steps_per_epoch_drops_ragged_steps():
    assert steps_per_epoch(np.array([[25, 31], [40, 27]]), 10) == 2
    with pytest.raises(ConfigurationError):
        steps_per_epoch(np.array([[5, 30]]), 10)


def test_books_cover_every_vertex(sg):
    g = sg.graph
    for method in ("mincut", "random"):
        book = make_book(g, 2, 2, method=method)
        assert set(book.part_of.tolist()) == {0, 1}
        assert set(book.second_level.tolist()) == {0, 1}
        assert book.first_level.cut > 0
        counts = train_counts(g, book)
        assert counts.sum() == np.count_nonzero(g.masks == MASK_TRAIN)
    assert make_book(g, 2, 1).first_level.cut < make_book(g, 2, 1, method="random").first_level.cut
    with pytest.raises(ConfigurationError):
        make_book(g, 2, method="spectral")


def test_partition_dir_round_trip(sg, tmp_path):
    g = sg.graph
    book = make_book(g, 2, 2)
    write_partition_dir(tmp_path, g, sg.features, book)
    direct = node_data_from_graph(g, sg.features, book)
    for m in range(2):
        got = read_node_data(tmp_path, m)
        want = direct[m]
        assert np.array_equal(got.part.local2global, want.part.local2global)
        assert np.array_equal(got.edge_owner, want.edge_owner)
        assert np.array_equal(got.train_counts, want.train_counts)
        assert got.num_classes == want.num_classes == 2
        for name in want.shards:
            assert np.array_equal(got.shards[name].values, want.shards[name].values)
    with pytest.raises(ConfigurationError):
        read_node_data(tmp_path, 2)


def test_local_training_is_capacity_invariant(sg):
    cfg = TrainConfig(layers=2, hidden=8, fanouts=(4, 4), batch_size=10, lr=0.3, epochs=2, seed=1)
    runs = []
    for caps in (SERIAL, CapacityConfig()):
        with LocalCluster.from_graph(sg, 2, trainers=2, fanouts=cfg.fanouts, seed=0) as cl:
            runs.append(run_local_training(cl, cfg, caps))
    serial, pipelined = runs
    assert len(serial) == 4
    for a, b in zip(serial, pipelined):
        assert a["losses"] == b["losses"]
    flats = [r["model"].flatten() for r in pipelined]
    assert all(np.array_equal(flats[0], f) for f in flats[1:])
    assert len(serial[0]["losses"]) == 2 * serial[0]["steps_per_epoch"]


def test_trainer_count_mismatch(sg):
    cfg = TrainConfig(layers=2, hidden=8, fanouts=(4, 4), batch_size=10)
    with LocalCluster.from_graph(sg, 1, trainers=1, fanouts=cfg.fanouts) as cl:
        node = cl.nodes[0]
        node.data.train_counts = np.zeros((1, 3), np.int64)
        with pytest.raises(ConfigurationError):
            run_trainer(node, 0, 0, LocalGroup(), cfg, SERIAL)


def test_process_harness_names_the_failing_rank(sg, tmp_path):
    g = sg.graph
    write_partition_dir(tmp_path, g, sg.features, make_book(g, 2, 1))
    (tmp_path / "part1" / "graph.bin").write_bytes(b"junk")
    cfg = TrainConfig(layers=2, hidden=8, fanouts=(4, 4), batch_size=10, lr=0.3, epochs=1)
    p0, p1 = free_ports(2)
    config = ClusterConfig.parse(f"0 127.0.0.1 {p0}\n1 127.0.0.1 {p1}")
    with pytest.raises(HeteroForgeError, match="rank 1"):
        launch_local_processes(tmp_path, config, cfg.fanouts, cfg, timeout=60)
