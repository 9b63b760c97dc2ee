"""Heterogeneous graph core: schema, homogenized CSR, typed/global IDs.

Vertices of every type are mapped into one global ID space where each type
occupies a contiguous range, in schema order.  Edges get contiguous global
IDs per edge type, in input order.  Adjacency is stored destination-grouped
(in-edges) since sampling walks from targets to their in-neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import RangeError, StructuralError

MASK_NONE, MASK_TRAIN, MASK_VAL, MASK_TEST = 0, 1, 2, 3
SPLITS = {"train": MASK_TRAIN, "val": MASK_VAL, "test": MASK_TEST}


@dataclass(frozen=True)
class HeteroSchema:
    """Ordered vertex types (with counts) and (src, relation, dst) edge types."""

    vertex_types: tuple[str, ...]
    num_vertices: tuple[int, ...]
    edge_types: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vertex_types", tuple(self.vertex_types))
        object.__setattr__(self, "num_vertices", tuple(int(n) for n in self.num_vertices))
        object.__setattr__(self, "edge_types", tuple(tuple(e) for e in self.edge_types))
        if len(set(self.vertex_types)) != len(self.vertex_types):
            raise StructuralError(f"duplicate vertex type names: {self.vertex_types}")
        if len(self.num_vertices) != len(self.vertex_types):
            raise StructuralError("num_vertices must give one count per vertex type")
        if any(n < 0 for n in self.num_vertices):
            raise StructuralError("vertex counts must be non-negative")
        rels = [r for _, r, _ in self.edge_types]
        if len(set(rels)) != len(rels):
            # relation names key the edge files and the KVStore spaces
            raise StructuralError(f"duplicate relation names: {rels}")
        declared = set(self.vertex_types)
        for src, rel, dst in self.edge_types:
            if src not in declared or dst not in declared:
                raise StructuralError(f"edge type ({src}, {rel}, {dst}) references an undeclared vertex type")

    @classmethod
    def from_counts(cls, counts: Mapping[str, int], edge_types=()):
        return cls(tuple(counts), tuple(counts.values()), tuple(edge_types))

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(r for _, r, _ in self.edge_types)

    def vtype_index(self, vtype) -> int:
        if isinstance(vtype, (int, np.integer)):
            if not 0 <= vtype < len(self.vertex_types):
                raise RangeError(f"vertex type index {vtype} out of range")
            return int(vtype)
        try:
            return self.vertex_types.index(vtype)
        except ValueError:
            raise RangeError(f"unknown vertex type {vtype!r}") from None

    def etype_index(self, etype) -> int:
        if isinstance(etype, (int, np.integer)):
            if not 0 <= etype < len(self.edge_types):
                raise RangeError(f"edge type index {etype} out of range")
            return int(etype)
        if isinstance(etype, tuple):
            try:
                return self.edge_types.index(etype)
            except ValueError:
                raise RangeError(f"unknown edge type {etype!r}") from None
        try:
            return self.relations.index(etype)
        except ValueError:
            raise RangeError(f"unknown relation {etype!r}") from None


@dataclass(frozen=True)
class FeatureMatrix:
    """Row-major float32 features for one ID space; row i = type-local ID i."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        if self.values.dtype != np.float32:
            raise StructuralError(f"features for {self.name!r} must be float32, got {self.values.dtype}")
        if self.values.ndim != 2:
            raise StructuralError(f"features for {self.name!r} must be 2-D")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def row_width(self) -> int:
        return self.values.shape[1]


def _prefix(counts) -> np.ndarray:
    out = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=out[1:])
    return out


@dataclass(frozen=True, eq=False)
class HomogenizedGraph:
    schema: HeteroSchema
    vertex_type_offsets: np.ndarray
    edge_type_offsets: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray  # global source ID per CSR slot
    edge_ids: np.ndarray  # global edge ID per CSR slot
    src: np.ndarray  # indexed by global edge ID
    dst: np.ndarray
    masks: np.ndarray  # u8 per vertex, MASK_* codes
    labels: np.ndarray | None = field(default=None)

    @property
    def num_vertices(self) -> int:
        return int(self.vertex_type_offsets[-1])

    @property
    def num_edges(self) -> int:
        return int(self.edge_type_offsets[-1])

    @property
    def num_vertices_per_type(self) -> tuple[int, ...]:
        return self.schema.num_vertices

    # -- ID mapping -------------------------------------------------------

    def to_global(self, vtype, typed_id):
        t = self.schema.vtype_index(vtype)
        ids = np.asarray(typed_id, dtype=np.int64)
        n = self.schema.num_vertices[t]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise RangeError(f"typed ID out of range for vertex type {self.schema.vertex_types[t]!r} (count {n})")
        out = ids + self.vertex_type_offsets[t]
        return int(out) if out.ndim == 0 else out

    def to_typed(self, global_id):
        """Return ``(type index, typed ID)``; vectorised for arrays."""
        ids = np.asarray(global_id, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_vertices):
            raise RangeError(f"global vertex ID out of range [0, {self.num_vertices})")
        t = np.searchsorted(self.vertex_type_offsets, ids, side="right") - 1
        local = ids - self.vertex_type_offsets[t]
        if ids.ndim == 0:
            return int(t), int(local)
        return t, local

    def vertex_types_of(self, ids) -> np.ndarray:
        return np.searchsorted(self.vertex_type_offsets, np.asarray(ids), side="right") - 1

    def edge_types_of(self, eids) -> np.ndarray:
        return np.searchsorted(self.edge_type_offsets, np.asarray(eids), side="right") - 1

    def typed_edge_id(self, eids):
        eids = np.asarray(eids, dtype=np.int64)
        e = self.edge_types_of(eids)
        return e, eids - self.edge_type_offsets[e]

    # -- adjacency --------------------------------------------------------

    def in_neighbors(self, v: int) -> list[tuple[int, int]]:
        if not 0 <= v < self.num_vertices:
            raise RangeError(f"vertex {v} out of range [0, {self.num_vertices})")
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.edge_ids[lo:hi].tolist()))

    def in_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.num_vertices)

    def ids_in_split(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.masks == SPLITS[split])


def homogenize(
    schema: HeteroSchema,
    typed_edge_lists: Mapping | Sequence,
    masks: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> HomogenizedGraph:
    """Build the homogenized in-edge CSR from per-edge-type typed edge lists.

    ``typed_edge_lists`` is either a sequence aligned with ``schema.edge_types``
    or a mapping keyed by relation name / edge-type triple; each entry is an
    ``(m, 2)`` array-like of ``(src typed ID, dst typed ID)``.
    """
    voff = _prefix(schema.num_vertices)
    if isinstance(typed_edge_lists, Mapping):
        lists = [None] * len(schema.edge_types)
        for key, edges in typed_edge_lists.items():
            lists[schema.etype_index(key)] = edges
    else:
        lists = list(typed_edge_lists)
        if len(lists) != len(schema.edge_types):
            raise StructuralError("need one edge list per edge type")

    srcs, dsts, counts = [], [], []
    for e, (stype, rel, dtype) in enumerate(schema.edge_types):
        edges = lists[e]
        arr = np.zeros((0, 2), dtype=np.int64) if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        si, di = schema.vtype_index(stype), schema.vtype_index(dtype)
        for col, t, what in ((0, si, "source"), (1, di, "destination")):
            bad = np.flatnonzero((arr[:, col] < 0) | (arr[:, col] >= schema.num_vertices[t]))
            if bad.size:
                raise StructuralError(
                    f"edge type {rel!r}: edge index {int(bad[0])} has {what} typed ID "
                    f"{int(arr[bad[0], col])} outside [0, {schema.num_vertices[t]})"
                )
        srcs.append(arr[:, 0] + voff[si])
        dsts.append(arr[:, 1] + voff[di])
        counts.append(len(arr))

    src = np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64)
    n = int(voff[-1])
    # stable sort keeps ascending edge ID within each destination
    order = np.argsort(dst, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])

    if masks is None:
        masks = np.zeros(n, dtype=np.uint8)
    masks = np.asarray(masks, dtype=np.uint8)
    if masks.shape != (n,) or (masks.size and masks.max() > MASK_TEST):
        raise StructuralError("masks must be one code in {0,1,2,3} per vertex")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise StructuralError("labels must have one entry per vertex")

    return HomogenizedGraph(
        schema=schema,
        vertex_type_offsets=voff,
        edge_type_offsets=_prefix(counts),
        indptr=indptr,
        indices=src[order],
        edge_ids=order.astype(np.int64),
        src=src,
        dst=dst,
        masks=masks,
        labels=labels,
    )


def typed_edge_lists(g: HomogenizedGraph) -> list[np.ndarray]:
    """Inverse of :func:`homogenize`: per-edge-type typed pairs in edge-ID order."""
    out = []
    for e, (stype, _, dtype) in enumerate(g.schema.edge_types):
        lo, hi = g.edge_type_offsets[e], g.edge_type_offsets[e + 1]
        s = g.src[lo:hi] - g.vertex_type_offsets[g.schema.vtype_index(stype)]
        d = g.dst[lo:hi] - g.vertex_type_offsets[g.schema.vtype_index(dtype)]
        out.append(np.stack([s, d], axis=1))
    return out


def gather_rows(g: HomogenizedGraph, features: Mapping[str, FeatureMatrix], global_ids) -> np.ndarray:
    """Single-machine feature gather for mixed-type global vertex IDs."""
    global_ids = np.asarray(global_ids, dtype=np.int64)
    t, local = g.to_typed(global_ids)
    t, local = np.atleast_1d(t), np.atleast_1d(local)
    widths = {features[name].row_width for name in g.schema.vertex_types if name in features}
    if len(widths) != 1:
        raise StructuralError(f"vertex types must share one feature width, got {sorted(widths)}")
    out = np.empty((len(global_ids), widths.pop()), dtype=np.float32)
    for ti in np.unique(t):
        sel = t == ti
        out[sel] = features[g.schema.vertex_types[ti]].values[local[sel]]
    return out
