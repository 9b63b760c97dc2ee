"""Command-line entry point: gen, partition, serve, train, bench, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .cluster import (
    ClusterConfig,
    Member,
    free_ports,
    launch_local_processes,
    make_book,
    read_node_data,
    serve_node,
    write_partition_dir,
)
from .errors import ConfigurationError, GraphIOError, HeteroForgeError
from .formats import load_graph, read_schema, save_graph
from .graph import MASK_TEST, MASK_TRAIN, MASK_VAL
from .partition import load_book
from .pipeline import SERIAL, CapacityConfig
from .sampler import FULL
from .synthetic import SyntheticGraph, fig3_hetero, planted_partition, random_hetero, two_cliques
from .trainer import TrainConfig

log = logging.getLogger("heteroforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fanouts(text: str) -> tuple:
    out = []
    for x in text.split(","):
        x = x.strip().lower()
        out.append(FULL if x in ("full", "-1") else int(x))
    return tuple(out)


def _capacities(text: str) -> CapacityConfig:
    try:
        return CapacityConfig.parse(text)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- dataset loading ---------------------------------------------------------------------------


def _load_dataset(path) -> SyntheticGraph:
    if not Path(path).is_dir():
        raise ConfigurationError(f"dataset directory not found: {path}")
    _, g, feats = load_graph(path)
    if not feats:
        raise ConfigurationError(f"dataset {path} has no vertex features")
    return SyntheticGraph(g, feats)


# -- commands ----------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    kind = args.kind
    if kind == "planted":
        sg = planted_partition(args.vertices, args.clusters, args.p_in, args.p_out, seed=args.seed,
                               feat_dim=args.feat_dim, split=(args.train_frac, (1 - args.train_frac) / 2,
                                                              (1 - args.train_frac) / 2))
    elif kind == "two-cliques":
        sg = two_cliques(args.clique_size, feat_dim=args.feat_dim, seed=args.seed)
    elif kind == "hetero":
        sg = fig3_hetero(args.scale, feat_dim=args.feat_dim, seed=args.seed)
    else:  # random-hetero
        n = args.vertices
        counts = {f"t{i}": n // args.vertex_types + (i < n % args.vertex_types) for i in range(args.vertex_types)}
        names = list(counts)
        ets = [(names[i], f"r{i}", names[(i + 1) % len(names)]) for i in range(len(names))]
        sg = random_hetero(counts, ets, args.edges, feat_dim=args.feat_dim, seed=args.seed,
                           split=(args.train_frac, (1 - args.train_frac) / 2, (1 - args.train_frac) / 2))
    save_graph(args.out, sg.graph, sg.features)
    g = sg.graph
    print(f"wrote {args.out}: {g.num_vertices} vertices, {g.num_edges} edges, "
          f"{len(g.schema.vertex_types)} vertex types, {len(g.schema.edge_types)} edge types")
    if sg.planted_cut is not None:
        print(f"planted cut: {sg.planted_cut}")
    return 0


def _balance_table(names, sums, k) -> list[str]:
    totals = sums.sum(0)
    lines = ["constraint".ljust(22) + "".join(f"part{p}".rjust(9) for p in range(k)) + "max/mean".rjust(10)]
    for c, name in enumerate(names or [f"c{i}" for i in range(sums.shape[1])]):
        ratio = sums[:, c].max() / (totals[c] / k) if totals[c] > 0 else 0.0
        lines.append(str(name)[:21].ljust(22) + "".join(f"{int(round(v)):9d}" for v in sums[:, c]) + f"{ratio:10.3f}")
    return lines


def cmd_partition(args) -> int:
    sg = _load_dataset(args.dataset)
    g = sg.graph
    book = make_book(g, args.k, args.trainers, eps=args.eps, seed=args.seed, method=args.method,
                     two_level=not args.one_level)
    write_partition_dir(args.out, g, sg.features, book)
    fl = book.first_level
    print(f"partitioned {g.num_vertices} vertices into {fl.k} machine(s) x {book.num_trainers} trainer(s) -> {args.out}")
    print(f"edge cut: {fl.cut}")
    print("\n".join(_balance_table(fl.constraint_names, fl.sums, fl.k)))
    flag = "RELAXED" if fl.relaxed else "ok"
    print(f"balance: eps={fl.eps:g} used={fl.eps_used:g} {flag}{'' if fl.balanced else ' UNBALANCED'}")
    for m in book.second_level_meta:
        flag = "RELAXED" if m["relaxed"] else "ok"
        print(f"machine {m['machine']} trainer split: eps used={m['eps_used']:g} {flag}")
    return 0


def _train_config(args) -> TrainConfig:
    fanouts = _fanouts(args.fanouts)
    return TrainConfig(layers=len(fanouts), hidden=args.hidden, fanouts=fanouts, batch_size=args.batch_size,
                       lr=args.lr, epochs=args.epochs, seed=args.seed)


def _cluster_config(args, book) -> ClusterConfig:
    caps = SERIAL if args.serial_pipeline else args.capacities
    kw = dict(trainers_per_machine=book.num_trainers, capacities=caps, partition_dir=str(args.part_dir), seed=args.seed)
    if args.config:
        cfg = ClusterConfig.load(args.config, **kw)
    else:
        cfg = ClusterConfig([Member(r, "127.0.0.1", port) for r, port in enumerate(free_ports(book.num_parts))], **kw)
    if len(cfg.members) != book.num_parts:
        raise ConfigurationError(f"cluster config lists {len(cfg.members)} members, partition has {book.num_parts}")
    return cfg


def cmd_serve(args) -> int:
    book = load_book(args.part_dir)
    if args.trainers is not None and args.trainers != book.num_trainers:
        raise ConfigurationError(f"{args.trainers} trainers per machine requested, partition book has {book.num_trainers}")
    config = ClusterConfig.load(args.config, trainers_per_machine=book.num_trainers,
                                capacities=SERIAL if args.serial_pipeline else args.capacities, seed=args.seed)
    cfg = _train_config(args) if args.train else None
    serve_node(args.part_dir, config, args.rank, _fanouts(args.fanouts), trainers=args.trainers, cfg=cfg,
               log_dir=args.log_dir, timeout=args.timeout)
    return 0


def cmd_train(args) -> int:
    if not Path(args.part_dir).is_dir():
        raise ConfigurationError(f"partition directory not found: {args.part_dir}")
    book = load_book(args.part_dir)
    if args.trainers is not None and args.trainers != book.num_trainers:
        raise ConfigurationError(f"{args.trainers} trainers per machine requested, partition book has {book.num_trainers}")
    cfg = _train_config(args)
    config = _cluster_config(args, book)
    if args.log_dir:
        Path(args.log_dir).mkdir(parents=True, exist_ok=True)
    level = logging.getLogger().level
    results = launch_local_processes(args.part_dir, config, cfg.fanouts, cfg, log_dir=args.log_dir,
                                     timeout=args.timeout, log_level=level)
    for rank in sorted(results):
        for t, losses in enumerate(results[rank] or []):
            if losses:
                print(f"rank {rank * book.num_trainers + t}: {len(losses)} steps, "
                      f"first loss {losses[0]:.4f}, last loss {losses[-1]:.4f}")
    return 0


def cmd_bench(args) -> int:
    sg = _load_dataset(args.dataset)
    rows = bench.run_ablations(sg, args.k, args.trainers, seed=args.seed, batches=args.batches,
                               rpc_latency=args.rpc_latency, device_latency=args.device_latency,
                               pipeline_machines=args.pipeline_machines)
    if args.out:
        bench.write_rows(args.out, rows)
    else:
        w = csv.DictWriter(sys.stdout, bench.FIELDS)
        w.writeheader()
        w.writerows(rows)
    return 0


def _inspect_dataset(path) -> None:
    schema, meta = read_schema(path)
    _, g, feats = load_graph(path)
    print(f"dataset {path}")
    for vt in meta["vertex_types"]:
        print(f"  vertex type {vt['name']}: {vt['count']} vertices, feature dim {vt.get('feat_dim')}")
    for (s, r, d), lo, hi in zip(schema.edge_types, g.edge_type_offsets[:-1], g.edge_type_offsets[1:]):
        print(f"  edge type {s}-{r}->{d}: {hi - lo} edges")
    splits = {name: int(np.count_nonzero(g.masks == code)) for name, code in (("train", MASK_TRAIN), ("val", MASK_VAL), ("test", MASK_TEST))}
    print(f"  total: {g.num_vertices} vertices, {g.num_edges} edges; split sizes {splits}")
    if g.labels is not None:
        print(f"  classes: {int(g.labels.max()) + 1 if len(g.labels) else 0}")


def _inspect_partition(path) -> None:
    book = load_book(path)
    fl = book.first_level
    print(f"partition {path}: {fl.k} machine(s) x {book.num_trainers} trainer(s), edge cut {fl.cut}")
    print("\n".join(_balance_table(fl.constraint_names, fl.sums, fl.k)))
    counts = None
    for m in range(fl.k):
        data = read_node_data(path, m)
        part = data.part
        halo = len(part.local2global) - part.num_core
        frac = halo / len(part.local2global) if len(part.local2global) else 0.0
        counts = data.train_counts
        print(f"  machine {m}: {part.num_core} owned, {halo} halo (halo fraction {frac:.3f}), "
              f"{len(part.edge_ids)} edges, train per trainer {counts[m].tolist()}")
    if counts is not None:
        per_machine = counts.sum(1)
        mean = per_machine.mean() if len(per_machine) else 0
        ratio = per_machine.max() / mean if mean > 0 else 0.0
        print(f"  train vertices per machine max/mean {ratio:.3f} (eps {fl.eps:g})")


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if (p / "book.json").exists():
        _inspect_partition(p)
    elif (p / "schema.json").exists():
        _inspect_dataset(p)
    elif p.exists():
        raise GraphIOError(f"{p}: neither a dataset nor a partition directory")
    else:
        raise ConfigurationError(f"path not found: {p}")
    return 0


# -- argument parsing --------------------------------------------------------------------------


def _add_train_args(p):
    p.add_argument("--fanouts", default="15,10,5", help="per layer, input layer first; 'full' keeps all")
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--capacities", type=_capacities, default=CapacityConfig(), help="sample,cpu,device in-flight caps")
    p.add_argument("--serial-pipeline", action="store_true", help="force capacities 1,1,1")
    p.add_argument("--trainers", type=int, default=None, help="trainers per machine (must match the partition)")
    p.add_argument("--log-dir", default=None)
    p.add_argument("--timeout", type=float, default=600.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heteroforge", description="Distributed heterogeneous-graph mini-batch training at desk scale")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("kind", choices=["planted", "two-cliques", "hetero", "random-hetero"])
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--vertices", type=int, default=400)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--clique-size", type=int, default=8)
    p.add_argument("--scale", type=int, default=50)
    p.add_argument("--vertex-types", type=int, default=2)
    p.add_argument("--edges", type=int, default=1500, help="edges per type (random-hetero)")
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="partition a dataset for k machines")
    p.add_argument("dataset")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--trainers", type=int, default=1)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--method", choices=["mincut", "random"], default="mincut")
    p.add_argument("--one-level", action="store_true", help="random trainer split instead of min-cut")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("serve", help="run one cluster member")
    p.add_argument("part_dir")
    p.add_argument("--config", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--train", action="store_true", help="also run this member's trainers")
    _add_train_args(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("train", help="train on a localhost (or configured) cluster")
    p.add_argument("part_dir")
    p.add_argument("--config", default=None, help="cluster file of 'rank host port' lines")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="ablation measurements as CSV")
    p.add_argument("dataset")
    p.add_argument("-k", type=int, default=4)
    p.add_argument("--trainers", type=int, default=2)
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--rpc-latency", type=float, default=0.002)
    p.add_argument("--device-latency", type=float, default=0.001)
    p.add_argument("--pipeline-machines", type=int, default=2)
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="describe a dataset or partition directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("HFG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HeteroForgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
