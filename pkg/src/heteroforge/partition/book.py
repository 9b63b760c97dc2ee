"""Two-level partition book and physical per-machine partitions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ConfigurationError, GraphIOError, RangeError
from ..formats import read_arrays, read_feature_file, write_arrays, write_feature_file
from ..graph import MASK_TRAIN, FeatureMatrix, HomogenizedGraph
from .multilevel import PartitionAssignment, partition_graph, symmetric_adjacency


@dataclass
class PartitionBook:
    """Global vertex ID -> (machine partition, trainer sub-partition)."""

    first_level: PartitionAssignment
    second_level: np.ndarray  # trainer index within the vertex's machine partition
    num_trainers: int
    vertex_type_offsets: np.ndarray
    edge_type_offsets: np.ndarray
    second_level_meta: list = field(default_factory=list)

    @property
    def num_parts(self) -> int:
        return self.first_level.k

    @property
    def part_of(self) -> np.ndarray:
        return self.first_level.part_of

    def owner(self, global_ids) -> np.ndarray:
        ids = np.asarray(global_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.part_of)):
            raise RangeError("global vertex ID out of range for partition book")
        return self.part_of[ids]

    def vertices_of(self, machine: int, trainer: int | None = None) -> np.ndarray:
        sel = self.part_of == machine
        if trainer is not None:
            sel &= self.second_level == trainer
        return np.flatnonzero(sel)

    def to_json(self) -> dict:
        fl = self.first_level
        return {
            "num_parts": fl.k,
            "num_trainers": self.num_trainers,
            "vertex_type_offsets": self.vertex_type_offsets.tolist(),
            "edge_type_offsets": self.edge_type_offsets.tolist(),
            "first_level": fl.part_of.tolist(),
            "second_level": self.second_level.tolist(),
            "constraint_names": list(fl.constraint_names),
            "constraint_sums": fl.sums.tolist(),
            "eps": fl.eps,
            "eps_used": fl.eps_used,
            "relaxed": fl.relaxed,
            "balanced": fl.balanced,
            "edge_cut": fl.cut,
            "second_level_meta": self.second_level_meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PartitionBook":
        k = int(d["num_parts"])
        fl = PartitionAssignment(
            part_of=np.asarray(d["first_level"], dtype=np.int64),
            k=k,
            sums=np.asarray(d["constraint_sums"], dtype=np.float64).reshape(k, -1),
            constraint_names=tuple(d.get("constraint_names", ())),
            eps=float(d["eps"]),
            eps_used=float(d["eps_used"]),
            relaxed=bool(d["relaxed"]),
            balanced=bool(d["balanced"]),
            cut=int(d.get("edge_cut", 0)),
        )
        return cls(
            first_level=fl,
            second_level=np.asarray(d["second_level"], dtype=np.int64),
            num_trainers=int(d["num_trainers"]),
            vertex_type_offsets=np.asarray(d["vertex_type_offsets"], dtype=np.int64),
            edge_type_offsets=np.asarray(d["edge_type_offsets"], dtype=np.int64),
            second_level_meta=d.get("second_level_meta", []),
        )


def second_level_partition(
    g: HomogenizedGraph, first_level: PartitionAssignment, trainers_per_machine: int, eps: float = 0.05, seed: int = 0
) -> PartitionBook:
    """Split each machine partition's induced subgraph into T trainer sub-partitions.

    Only vertex count and train-mask count are balanced here.  No physical
    split happens at this level: vertices are merely labelled.
    """
    T = int(trainers_per_machine)
    if T < 1:
        raise ConfigurationError("trainers_per_machine must be >= 1")
    n = g.num_vertices
    second = np.zeros(n, dtype=np.int64)
    meta = []
    if T > 1:
        adj = symmetric_adjacency(g.src, g.dst, n)
        weights = np.stack([np.ones(n), (g.masks == MASK_TRAIN).astype(np.float64)], axis=1)
        for p in range(first_level.k):
            idx = np.flatnonzero(first_level.part_of == p)
            if idx.size < T:
                raise ConfigurationError(f"machine partition {p} has {idx.size} vertices, fewer than T={T}")
            sub = adj[idx][:, idx].tocsr()
            res = partition_graph(sub, weights[idx], T, eps=eps, seed=seed * 7919 + p, names=("vertices", "train"))
            second[idx] = res.part_of
            meta.append(
                {"machine": p, "eps_used": res.eps_used, "relaxed": res.relaxed, "balanced": res.balanced,
                 "sums": res.sums.tolist()}
            )
    return PartitionBook(
        first_level=first_level,
        second_level=second,
        num_trainers=T,
        vertex_type_offsets=g.vertex_type_offsets.copy(),
        edge_type_offsets=g.edge_type_offsets.copy(),
        second_level_meta=meta,
    )


def random_second_level(book: PartitionBook, seed: int = 0) -> PartitionBook:
    """Same first level, trainer sub-partitions drawn uniformly at random.

    Baseline for the 1-level ablation: trainers still cover disjoint seed sets
    but without locality.
    """
    rng = np.random.default_rng(seed)
    second = np.zeros_like(book.second_level)
    for p in range(book.num_parts):
        idx = np.flatnonzero(book.part_of == p)
        second[idx] = rng.permutation(np.arange(idx.size) % book.num_trainers)
    return PartitionBook(book.first_level, second, book.num_trainers, book.vertex_type_offsets,
                         book.edge_type_offsets, [])


DENSE_MAP_LIMIT = 1 << 26


@dataclass(eq=False)
class PhysicalPartition:
    """One machine's subgraph: owned (core) vertices plus halo sources.

    Local IDs put core vertices first (ascending global ID) then halo vertices
    (ascending global ID).  The local in-CSR holds every owned edge; halo rows
    are empty.
    """

    part_id: int
    num_core: int
    local2global: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray  # local source IDs
    edge_ids: np.ndarray  # global edge IDs of owned edges, CSR order
    vertex_type_offsets: np.ndarray
    edge_type_offsets: np.ndarray
    core_masks: np.ndarray
    core_labels: np.ndarray | None = None

    def __post_init__(self):
        self._sorted = np.argsort(self.local2global, kind="stable")
        self._sorted_ids = self.local2global[self._sorted]
        n = int(self.vertex_type_offsets[-1]) if len(self.vertex_type_offsets) else 0
        self._dense = None
        if n <= DENSE_MAP_LIMIT:
            # direct global -> local table; searchsorted is the fallback for huge graphs
            self._dense = np.full(n, -1, dtype=np.int64)
            self._dense[self.local2global] = np.arange(len(self.local2global))

    @property
    def num_local(self) -> int:
        return len(self.local2global)

    @property
    def core(self) -> np.ndarray:
        return self.local2global[: self.num_core]

    @property
    def halo(self) -> np.ndarray:
        return self.local2global[self.num_core :]

    @property
    def indices_global(self) -> np.ndarray:
        return self.local2global[self.indices]

    def global_to_local(self, ids, strict=True) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if self._dense is not None:
            n = len(self._dense)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                inside = (ids >= 0) & (ids < n)
                out = np.full(ids.shape, -1, dtype=np.int64)
                out[inside] = self._dense[ids[inside]]
            else:
                out = self._dense[ids]
            if strict and ids.size and out.min() < 0:
                raise RangeError(f"partition {self.part_id} has no local copy of vertex {int(ids[out < 0][0])}")
            return out
        pos = np.searchsorted(self._sorted_ids, ids)
        pos_c = np.minimum(pos, max(len(self._sorted_ids) - 1, 0))
        found = (pos < len(self._sorted_ids)) & (self._sorted_ids[pos_c] == ids) if len(self._sorted_ids) else np.zeros(ids.shape, bool)
        if strict and not np.all(found):
            raise RangeError(f"partition {self.part_id} has no local copy of vertex {int(ids[~found][0])}")
        out = np.where(found, self._sorted[pos_c] if len(self._sorted) else -1, -1)
        return out

    def is_core(self, ids) -> np.ndarray:
        loc = self.global_to_local(ids, strict=False)
        return (loc >= 0) & (loc < self.num_core)

    def to_arrays(self) -> dict:
        arrays = {
            "meta": np.array([self.part_id, self.num_core], dtype=np.int64),
            "local2global": self.local2global,
            "indptr": self.indptr,
            "indices": self.indices,
            "edge_ids": self.edge_ids,
            "vertex_type_offsets": self.vertex_type_offsets,
            "edge_type_offsets": self.edge_type_offsets,
            "core_masks": self.core_masks.astype(np.uint8),
        }
        if self.core_labels is not None:
            arrays["core_labels"] = self.core_labels
        return arrays

    @classmethod
    def from_arrays(cls, a: Mapping[str, np.ndarray]) -> "PhysicalPartition":
        return cls(
            part_id=int(a["meta"][0]),
            num_core=int(a["meta"][1]),
            local2global=a["local2global"],
            indptr=a["indptr"],
            indices=a["indices"],
            edge_ids=a["edge_ids"],
            vertex_type_offsets=a["vertex_type_offsets"],
            edge_type_offsets=a["edge_type_offsets"],
            core_masks=a["core_masks"],
            core_labels=a.get("core_labels"),
        )


@dataclass
class FeatureShard:
    """Rows of one ID space owned by one machine, keyed by type-local ID."""

    name: str
    owned_ids: np.ndarray  # sorted type-local IDs
    values: np.ndarray  # (len(owned_ids), width) float32


def edge_owner(g: HomogenizedGraph, book: PartitionBook) -> np.ndarray:
    """Machine owning each edge: the owner of its destination vertex."""
    return book.part_of[g.dst]


def materialize_partitions(
    g: HomogenizedGraph, book: PartitionBook, features: Mapping[str, FeatureMatrix] | None = None
) -> list[tuple[PhysicalPartition, dict[str, FeatureShard]]]:
    features = features or {}
    if len(book.part_of) != g.num_vertices:
        raise ConfigurationError("partition book does not cover the graph's vertices")
    eowner = edge_owner(g, book)
    vtypes = g.vertex_types_of(np.arange(g.num_vertices))
    etypes = g.edge_types_of(np.arange(g.num_edges))
    out = []
    for p in range(book.num_parts):
        core = np.flatnonzero(book.part_of == p)
        # in-CSR slots whose destination is a core vertex, in global CSR order
        slot_lo, slot_hi = g.indptr[core], g.indptr[core + 1]
        deg = slot_hi - slot_lo
        slots = np.repeat(slot_lo - np.cumsum(deg) + deg, deg) + np.arange(deg.sum())
        srcs = g.indices[slots]
        halo = np.setdiff1d(np.unique(srcs), core)
        l2g = np.concatenate([core, halo])
        indptr = np.zeros(len(l2g) + 1, dtype=np.int64)
        indptr[1 : len(core) + 1] = np.cumsum(deg)
        indptr[len(core) + 1 :] = indptr[len(core)]
        part = PhysicalPartition(
            part_id=p,
            num_core=len(core),
            local2global=l2g,
            indptr=indptr,
            indices=np.zeros(0, dtype=np.int64),
            edge_ids=g.edge_ids[slots],
            vertex_type_offsets=g.vertex_type_offsets.copy(),
            edge_type_offsets=g.edge_type_offsets.copy(),
            core_masks=g.masks[core],
            core_labels=None if g.labels is None else g.labels[core],
        )
        part.indices = part.global_to_local(srcs)

        shards = {}
        for name, fm in features.items():
            if name in g.schema.vertex_types:
                t = g.schema.vtype_index(name)
                owned = core[vtypes[core] == t] - g.vertex_type_offsets[t]
            else:
                e = g.schema.etype_index(name)
                eids = np.flatnonzero((eowner == p) & (etypes == e))
                owned = eids - g.edge_type_offsets[e]
            shards[name] = FeatureShard(name, owned, fm.values[owned])
        out.append((part, shards))
    return out


# -- partition directory I/O -----------------------------------------------------


def save_book(directory, book: PartitionBook) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "book.json").write_text(json.dumps(book.to_json()) + "\n", encoding="utf-8")


def load_book(directory) -> PartitionBook:
    path = Path(directory) / "book.json"
    try:
        return PartitionBook.from_json(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise GraphIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphIOError(f"{path}: corrupt partition book ({exc})") from exc


def save_partition(directory, k: int, part: PhysicalPartition, shards: Mapping[str, FeatureShard]) -> None:
    d = Path(directory) / f"part{k}"
    d.mkdir(parents=True, exist_ok=True)
    arrays = part.to_arrays()
    for name, shard in shards.items():
        arrays[f"owned:{name}"] = shard.owned_ids
        write_feature_file(d / f"feat_{name}.bin", shard.values)
    write_arrays(d / "graph.bin", arrays)


def load_partition(directory, k: int) -> tuple[PhysicalPartition, dict[str, FeatureShard]]:
    d = Path(directory) / f"part{k}"
    arrays = read_arrays(d / "graph.bin")
    part = PhysicalPartition.from_arrays(arrays)
    shards = {}
    for key, owned in arrays.items():
        if key.startswith("owned:"):
            name = key[len("owned:") :]
            vals = read_feature_file(d / f"feat_{name}.bin")
            if vals.shape[0] != len(owned):
                raise GraphIOError(f"{d / f'feat_{name}.bin'}: {vals.shape[0]} rows for {len(owned)} owned IDs")
            shards[name] = FeatureShard(name, owned, vals)
    return part, shards
