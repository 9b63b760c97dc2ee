"""Cluster plumbing: per-node runtime, partition directories, in-process and multi-process harnesses."""
from __future__ import annotations

import json
import logging
import multiprocessing as mp
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, GraphIOError, HeteroForgeError
from .formats import read_arrays, write_arrays
from .graph import MASK_TRAIN, HeteroSchema
from .kvstore import KVShard, KVStore, id_spaces
from .net import Coordinator, LocalGroup, NodeServer, ProcessGroup, RpcClient
from .partition import (
    PartitionAssignment,
    PartitionBook,
    build_constraints,
    constraint_names,
    edge_cut,
    load_book,
    load_partition,
    materialize_partitions,
    partition_multiconstraint,
    random_second_level,
    save_book,
    save_partition,
    second_level_partition,
)
from .pipeline import CapacityConfig, Pipeline, PipelineConfig, SERIAL, SerialExecutor
from .sampler import DEFAULT_FANOUTS, DistributedSampler, schedule
from .trainer import SageModel, TrainConfig, TrainLog, train

log = logging.getLogger(__name__)


# -- cluster config file ----------------------------------------------------------------------


@dataclass(frozen=True)
class Member:
    rank: int
    host: str
    port: int


@dataclass
class ClusterConfig:
    members: list
    trainers_per_machine: int = 1
    dataset: str | None = None
    partition_dir: str | None = None
    capacities: CapacityConfig = field(default_factory=CapacityConfig)
    seed: int = 0

    def __post_init__(self):
        ranks = [m.rank for m in self.members]
        if ranks != list(range(len(ranks))):
            raise ConfigurationError(f"member ranks must be contiguous from 0 in order, got {ranks}")
        addrs = [(m.host, m.port) for m in self.members]
        if len(set(addrs)) != len(addrs):
            raise ConfigurationError("duplicate (host, port) in cluster config")
        if not self.members:
            raise ConfigurationError("cluster config has no members")

    @classmethod
    def parse(cls, text: str, **kw) -> "ClusterConfig":
        members = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ConfigurationError(f"cluster config line {lineno}: expected 'rank host port'")
            try:
                members.append(Member(int(parts[0]), parts[1], int(parts[2])))
            except ValueError:
                raise ConfigurationError(f"cluster config line {lineno}: rank and port must be integers") from None
        members.sort(key=lambda m: m.rank)
        return cls(members, **kw)

    @classmethod
    def load(cls, path, **kw) -> "ClusterConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read cluster config {path}: {exc.strerror or exc}") from exc
        return cls.parse(text, **kw)

    @classmethod
    def localhost(cls, n: int, base_port: int, **kw) -> "ClusterConfig":
        return cls([Member(r, "127.0.0.1", base_port + r) for r in range(n)], **kw)

    @property
    def addresses(self) -> dict:
        return {m.rank: (m.host, m.port) for m in self.members}


def free_ports(n: int) -> list[int]:
    """n currently unused localhost TCP ports (for single-host clusters)."""
    socks = [socket.socket() for _ in range(n)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


# -- partitioning helpers --------------------------------------------------------------------


def random_book(g, k: int, trainers: int = 1, seed: int = 0) -> PartitionBook:
    """Uniformly random machine assignment (the ablation baseline for min-cut)."""
    rng = np.random.default_rng(seed)
    part_of = rng.permutation(np.arange(g.num_vertices) % k).astype(np.int64)
    w = build_constraints(g)
    sums = np.stack([w[part_of == p].sum(axis=0) for p in range(k)])
    first = PartitionAssignment(part_of, k, sums, constraint_names(g), cut=edge_cut(g, part_of))
    book = PartitionBook(first, np.zeros(g.num_vertices, np.int64), trainers, g.vertex_type_offsets, g.edge_type_offsets)
    return random_second_level(book, seed) if trainers > 1 else book


def make_book(g, k: int, trainers: int = 1, eps: float = 0.05, seed: int = 0, method: str = "mincut",
              two_level: bool = True) -> PartitionBook:
    if method == "random":
        return random_book(g, k, trainers, seed)
    if method != "mincut":
        raise ConfigurationError(f"unknown partition method {method!r}")
    first = partition_multiconstraint(g, k, build_constraints(g), eps=eps, seed=seed, names=constraint_names(g))
    log.info("min-cut partition of %d vertices into %d parts: cut %d, eps used %g", g.num_vertices, k, first.cut,
             first.eps_used)
    book = second_level_partition(g, first, trainers, eps=eps, seed=seed)
    return book if two_level or trainers == 1 else random_second_level(book, seed)


def train_counts(g, book: PartitionBook) -> np.ndarray:
    """(machines, trainers) number of training vertices per trainer."""
    train = np.flatnonzero(g.masks == MASK_TRAIN)
    out = np.zeros((book.num_parts, book.num_trainers), np.int64)
    np.add.at(out, (book.part_of[train], book.second_level[train]), 1)
    return out


def write_partition_dir(directory, g, features, book: PartitionBook) -> list:
    """book.json, one part<k>/ per machine, schema.json and routing.bin (edge owners, counts)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_book(d, book)
    parts = materialize_partitions(g, book, features)
    for k, (part, shards) in enumerate(parts):
        save_partition(d, k, part, shards)
    widths = {n: f.row_width for n, f in features.items()}
    num_classes = int(g.labels.max()) + 1 if g.labels is not None and len(g.labels) else 0
    meta = {
        "vertex_types": list(g.schema.vertex_types),
        "num_vertices": [int(c) for c in g.schema.num_vertices],
        "edge_types": [list(e) for e in g.schema.edge_types],
        "widths": widths,
        "num_classes": num_classes,
    }
    (d / "schema.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    write_arrays(d / "routing.bin", {"edge_owner": book.part_of[g.dst], "train_counts": train_counts(g, book)})
    return parts


@dataclass
class NodeData:
    machine: int
    book: PartitionBook
    part: object
    shards: dict
    schema: object
    widths: dict
    edge_owner: np.ndarray
    train_counts: np.ndarray
    num_classes: int


def read_node_data(directory, machine: int) -> NodeData:
    d = Path(directory)
    book = load_book(d)
    if not 0 <= machine < book.num_parts:
        raise ConfigurationError(f"partition directory has {book.num_parts} parts, no part {machine}")
    try:
        meta = json.loads((d / "schema.json").read_text(encoding="utf-8"))
        schema = HeteroSchema(tuple(meta["vertex_types"]), tuple(meta["num_vertices"]),
                              tuple(tuple(e) for e in meta["edge_types"]))
    except OSError as exc:
        raise GraphIOError(f"cannot read {d / 'schema.json'}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphIOError(f"{d / 'schema.json'}: corrupt ({exc})") from exc
    routing = read_arrays(d / "routing.bin")
    part, shards = load_partition(d, machine)
    return NodeData(machine, book, part, shards, schema, meta["widths"], routing["edge_owner"],
                    routing["train_counts"], int(meta["num_classes"]))


def node_data_from_graph(g, features, book, parts=None) -> list[NodeData]:
    parts = parts or materialize_partitions(g, book, features)
    widths = {n: f.row_width for n, f in features.items()}
    counts = train_counts(g, book)
    ncls = int(g.labels.max()) + 1 if g.labels is not None and len(g.labels) else 0
    eowner = book.part_of[g.dst]
    return [NodeData(m, book, p, s, g.schema, widths, eowner, counts, ncls) for m, (p, s) in enumerate(parts)]


# -- one node's runtime --------------------------------------------------------------------


class Node:
    """Server plus the stores and samplers one machine exposes and uses."""

    def __init__(self, data: NodeData, fanouts=DEFAULT_FANOUTS, host="127.0.0.1", port=0, delays=None,
                 coordinator: bool | None = None):
        self.data = data
        self.machine = data.machine
        self.book = data.book
        self.part = data.part
        self.fanouts = tuple(fanouts)
        self.server = NodeServer(host, port, name=f"node{data.machine}", delays=delays)
        self.client = None
        self.kvstore = KVStore(data.machine, None)
        b = data.book
        for space in id_spaces(data.schema, b.vertex_type_offsets, b.edge_type_offsets, b.part_of, data.edge_owner,
                               data.widths):
            sh = data.shards[space.name]
            self.kvstore.register_space(space, KVShard(space.name, sh.owned_ids, sh.values))
        self.kvstore.set_vertex_layout(data.schema.vertex_types, b.vertex_type_offsets)
        self.kvstore.attach(self.server)
        self.sampler = DistributedSampler(data.machine, data.part, b.part_of, None, self.fanouts)
        self.sampler.attach(self.server)
        self.coordinator = Coordinator(self.server) if (coordinator if coordinator is not None else data.machine == 0) else None
        self.server.start()

    @property
    def address(self):
        return self.server.address

    def connect(self, peers: dict, timeout: float = 30.0):
        self.client = RpcClient(peers, timeout=timeout)
        self.kvstore.client = self.client
        self.sampler.client = self.client
        return self

    def label_fn(self, ids):
        loc = self.part.global_to_local(ids)
        if np.any(loc >= self.part.num_core):
            raise ConfigurationError("labels requested for vertices this machine does not own")
        return self.part.core_labels[loc]

    def train_ids(self, trainer: int) -> np.ndarray:
        core = self.part.core
        sel = (self.part.core_masks == MASK_TRAIN) & (self.book.second_level[core] == trainer)
        return core[sel]

    def pipeline(self, targets, capacities: CapacityConfig | None = None, device_latency=0.0, transform=None,
                 workers=None, trace=False, metrics_path=None) -> Pipeline:
        cfg = PipelineConfig(capacities or CapacityConfig(), workers=workers, device_latency=device_latency,
                             metrics_path=metrics_path)
        return Pipeline(targets, self.sampler, self.kvstore, self.book.edge_type_offsets, cfg, transform=transform,
                        label_fn=self.label_fn, trace=trace)

    def serial(self, targets, transform=None, device_latency=0.0) -> SerialExecutor:
        return SerialExecutor(targets, self.sampler, self.kvstore, self.book.edge_type_offsets, transform,
                              self.label_fn, device_latency)

    def close(self):
        if self.client is not None:
            self.client.close()
        self.server.stop()


class LocalCluster:
    """All machines of a partitioned graph as in-process nodes talking over localhost sockets."""

    def __init__(self, node_data: list[NodeData], fanouts=DEFAULT_FANOUTS, delays=None, timeout: float = 30.0):
        self.nodes = [Node(d, fanouts, delays=delays) for d in node_data]
        peers = {n.machine: n.address for n in self.nodes}
        for n in self.nodes:
            n.connect(peers, timeout)
        self.book = node_data[0].book
        self.data = node_data

    @classmethod
    def from_graph(cls, sg, k: int, trainers: int = 1, fanouts=DEFAULT_FANOUTS, seed: int = 0, method="mincut",
                   two_level=True, delays=None, book=None, eps: float = 0.05):
        g = sg.graph
        book = book or make_book(g, k, trainers, eps=eps, seed=seed, method=method, two_level=two_level)
        return cls(node_data_from_graph(g, sg.features, book), fanouts, delays)

    def group(self, rank: int, world: int, machine: int | None = None):
        if world == 1:
            return LocalGroup()
        node = self.nodes[machine if machine is not None else rank // self.book.num_trainers]
        return ProcessGroup(node.client, 0, rank, world)

    def close(self):
        for n in self.nodes:
            n.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- training driver ---------------------------------------------------------------------------


def steps_per_epoch(counts: np.ndarray, batch_size: int) -> int:
    """Global steps per epoch: ragged final steps are dropped on every trainer."""
    steps = int(np.min(counts)) // batch_size
    if steps < 1:
        raise ConfigurationError(f"smallest trainer has {int(np.min(counts))} training vertices, below batch size {batch_size}")
    return steps


def model_for(data: NodeData, cfg: TrainConfig) -> SageModel:
    width = data.widths[data.schema.vertex_types[0]]
    dims = [width] + [cfg.hidden] * (cfg.layers - 1) + [max(data.num_classes, 1)]
    return SageModel(dims, seed=cfg.seed)


def run_trainer(node: Node, trainer: int, rank: int, group, cfg: TrainConfig, capacities: CapacityConfig,
                log_path=None, metrics_path=None, checkpoint=None) -> dict:
    counts = node.data.train_counts
    if counts.shape[1] != node.book.num_trainers:
        raise ConfigurationError("trainer count does not match the partition book")
    spe = steps_per_epoch(counts, cfg.batch_size)
    targets = schedule(node.train_ids(trainer), cfg.batch_size, cfg.seed, epochs=cfg.epochs, steps_per_epoch=spe,
                       stream=rank)
    model = model_for(node.data, cfg)
    tlog = TrainLog(log_path)
    pipe = node.pipeline(targets, capacities, metrics_path=metrics_path).start()
    try:
        losses = train(model, pipe, group, cfg.lr, spe * cfg.epochs, spe, cfg.task, tlog)
    finally:
        pipe.stop()
        tlog.close()
    if checkpoint:
        model.save(checkpoint, step=len(losses))
    return {"rank": rank, "losses": losses, "model": model, "steps_per_epoch": spe}


def run_local_training(cluster: LocalCluster, cfg: TrainConfig, capacities: CapacityConfig = SERIAL,
                       log_dir=None) -> list[dict]:
    """Every trainer of every machine as a thread of this process; returns per-rank results."""
    T = cluster.book.num_trainers
    world = len(cluster.nodes) * T
    results, errors = [None] * world, []

    def body(rank):
        m, t = divmod(rank, T)
        try:
            lp = None if log_dir is None else Path(log_dir) / f"train_rank{rank}.csv"
            results[rank] = run_trainer(cluster.nodes[m], t, rank, cluster.group(rank, world, m), cfg, capacities, lp)
        except Exception as exc:  # noqa: BLE001
            log.error("trainer rank %d failed: %s", rank, exc)
            errors.append((rank, exc))

    threads = [threading.Thread(target=body, args=(r,), name=f"trainer-{r}") for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        rank, exc = min(errors, key=lambda e: e[0])
        raise HeteroForgeError(f"trainer rank {rank} failed: {exc}") from exc
    return results


# -- multi-process harness ---------------------------------------------------------------------


def serve_node(part_dir, config: ClusterConfig, rank: int, fanouts, trainers: int | None = None,
               cfg: TrainConfig | None = None, log_dir=None, timeout: float = 30.0) -> dict:
    """Run one member: serve its partition and, if `cfg` is given, its trainers; then shut down in step."""
    data = read_node_data(part_dir, rank)
    if data.book.num_parts != len(config.members):
        raise ConfigurationError(f"partition has {data.book.num_parts} parts, cluster config has {len(config.members)} members")
    if trainers is not None and trainers != data.book.num_trainers:
        raise ConfigurationError(f"{trainers} trainers per machine requested, partition book has {data.book.num_trainers}")
    me = config.members[rank]
    node = Node(data, fanouts, host=me.host, port=me.port)
    node.connect(config.addresses, timeout)
    out = {"rank": rank}
    try:
        if cfg is None:
            node.server.wait_stopped()  # a SHUTDOWN request stops the server
            return out
        T = data.book.num_trainers
        world = len(config.members) * T
        results, errors = [None] * T, []

        def body(t):
            r = rank * T + t
            try:
                group = LocalGroup() if world == 1 else ProcessGroup(node.client, 0, r, world, timeout=timeout * 4)
                lp = None if log_dir is None else Path(log_dir) / f"train_rank{r}.csv"
                results[t] = run_trainer(node, t, r, group, cfg, config.capacities, lp)
            except Exception as exc:  # noqa: BLE001
                errors.append((r, exc))

        threads = [threading.Thread(target=body, args=(t,)) for t in range(T)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            r, exc = errors[0]
            raise HeteroForgeError(f"trainer rank {r} failed: {exc}") from exc
        out["losses"] = [r["losses"] for r in results]
        # keep serving until every member finished training
        if world > 1:
            ProcessGroup(node.client, 0, rank, len(config.members), name="shutdown", timeout=timeout * 4).barrier()
            if node.coordinator is not None:
                # the barrier replies must reach every member before this server goes away
                node.client.close()
                node.server.wait_disconnected(timeout)
        return out
    finally:
        node.close()


def _member_main(part_dir, config, rank, fanouts, cfg, log_dir, queue, log_level):
    logging.basicConfig(level=log_level, format=f"[rank {rank}] %(levelname)s %(name)s: %(message)s")
    try:
        res = serve_node(part_dir, config, rank, fanouts, cfg=cfg, log_dir=log_dir)
        queue.put((rank, None, res.get("losses")))
    except BaseException as exc:  # noqa: BLE001
        logging.getLogger(__name__).error("member %d failed: %s", rank, exc)
        queue.put((rank, f"{type(exc).__name__}: {exc}", None))


def launch_local_processes(part_dir, config: ClusterConfig, fanouts, cfg: TrainConfig, log_dir=None,
                           timeout: float = 600.0, log_level=logging.WARNING) -> dict:
    """Spawn one process per member on this host and supervise them."""
    ctx = mp.get_context("spawn")
    q = ctx.Queue()
    procs = [ctx.Process(target=_member_main, args=(str(part_dir), config, m.rank, tuple(fanouts), cfg, log_dir, q,
                                                    log_level), name=f"member-{m.rank}") for m in config.members]
    for p in procs:
        p.start()
    results, failures = {}, {}
    deadline = time.monotonic() + timeout
    try:
        while len(results) + len(failures) < len(procs):
            left = deadline - time.monotonic()
            if left <= 0:
                raise HeteroForgeError("cluster run timed out")
            try:
                rank, err, losses = q.get(timeout=min(left, 1.0))
            except Exception:  # queue.Empty
                dead = [p for p in procs if not p.is_alive() and p.exitcode not in (0, None)]
                for p in dead:
                    r = int(p.name.split("-")[1])
                    if r not in results and r not in failures:
                        failures[r] = f"process exited with code {p.exitcode}"
                continue
            if err is None:
                results[rank] = losses
            else:
                failures[rank] = err
                break
    finally:
        for p in procs:
            p.join(timeout=5 if not failures else 0.5)
            if p.is_alive():
                p.terminate()
                p.join()
    if failures:
        rank = min(failures)
        raise HeteroForgeError(f"member rank {rank} failed: {failures[rank]}")
    return results
