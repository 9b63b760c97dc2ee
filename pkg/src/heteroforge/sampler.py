"""Mini-batch scheduling, per-edge-type fanout sampling, stitching, frontiers and compaction.

Randomness comes from a counter-based hash keyed by
(epoch_seed, seq_no, destination vertex, hop, edge ID).  Each in-edge gets an
independent 64-bit key; a seed keeps the K smallest keys per incident edge
type, which is a uniform K-subset.  Because keys depend only on IDs, any
machine can reproduce any other machine's draw, and a partitioned run gives
the same blocks as a single-machine run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, IncompleteBatchError, RangeError, StructuralError
from .graph import gather_rows
from .net.protocol import FULL_FANOUT, SampleRequest, SampleResponse, Verb

FULL = FULL_FANOUT
DEFAULT_FANOUTS = (15, 10, 5)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_G1 = np.uint64(0x9E3779B97F4A7C15)
_G2 = np.uint64(0xD1B54A32D192ED03)
_MASK = (1 << 64) - 1


def mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser, elementwise on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _mix_int(x: int) -> int:
    x ^= x >> 30
    x = (x * int(_M1)) & _MASK
    x ^= x >> 27
    x = (x * int(_M2)) & _MASK
    return x ^ (x >> 31)


def stream_key(epoch_seed: int, seq_no: int) -> np.uint64:
    a = _mix_int((int(epoch_seed) + int(_G1)) & _MASK)
    return np.uint64(_mix_int(a ^ _mix_int((int(seq_no) * int(_G2)) & _MASK)))


def edge_keys(stream: np.uint64, dst, hop: int, eid) -> np.ndarray:
    dst = np.asarray(dst).astype(np.uint64)
    eid = np.asarray(eid).astype(np.uint64)
    per_seed = mix64(np.uint64(stream) ^ mix64(dst * _G1 + np.uint64(hop + 1)))
    return mix64(per_seed + eid * _G2)


def hop_fanout(fanouts, hop: int) -> int:
    """Fanouts are listed input layer first, so hop 0 (from the seeds) uses the last entry."""
    return int(fanouts[len(fanouts) - 1 - hop])


def check_fanouts(fanouts) -> tuple:
    fanouts = tuple(int(f) for f in fanouts)
    if not fanouts or any(f < 1 for f in fanouts):
        raise ConfigurationError(f"fanouts must be >= 1 or FULL, got {fanouts}")
    return fanouts


# -- adjacency views ------------------------------------------------------------------


@dataclass(eq=False)
class AdjacencyView:
    """In-CSR rows addressable by global vertex ID with global source IDs per slot."""

    indptr: np.ndarray
    src_global: np.ndarray
    edge_ids: np.ndarray
    edge_type_offsets: np.ndarray
    row_of: object  # callable: global IDs -> row indices (RangeError if absent)

    @classmethod
    def of_graph(cls, g) -> "AdjacencyView":
        n = g.num_vertices

        def rows(ids):
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise RangeError("seed vertex out of range")
            return ids

        return cls(g.indptr, g.indices, g.edge_ids, g.edge_type_offsets, rows)

    @classmethod
    def of_partition(cls, part) -> "AdjacencyView":
        def rows(ids):
            loc = part.global_to_local(ids)
            if np.any(loc >= part.num_core):
                bad = np.asarray(ids)[loc >= part.num_core][0]
                raise RangeError(f"partition {part.part_id} does not own the adjacency of vertex {int(bad)}")
            return loc

        return cls(part.indptr, part.indices_global, part.edge_ids, part.edge_type_offsets, rows)


@dataclass
class SampledEdges:
    src: np.ndarray
    dst: np.ndarray
    eid: np.ndarray

    def __len__(self):
        return len(self.eid)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    def to_response(self) -> SampleResponse:
        return SampleResponse(self.src, self.dst, self.eid)

    @classmethod
    def from_response(cls, r: SampleResponse):
        return cls(r.src, r.dst, r.eid)

    def equals(self, other) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("src", "dst", "eid"))


def sample_one_hop(view: AdjacencyView, seeds, fanout: int, key, hop: int) -> SampledEdges:
    """Per seed and per incident edge type keep all in-edges or a uniform K-subset.

    Output groups edges by seed in input order; within a seed edges keep CSR
    order (ascending edge ID).
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    rows = view.row_of(seeds)
    lo, hi = view.indptr[rows], view.indptr[rows + 1]
    deg = hi - lo
    total = int(deg.sum())
    if total == 0:
        return SampledEdges.empty()
    seed_idx = np.repeat(np.arange(len(seeds)), deg)
    slots = np.repeat(lo - np.cumsum(deg) + deg, deg) + np.arange(total)
    eid = view.edge_ids[slots]
    if fanout != FULL:
        # CSR rows hold ascending edge IDs and edge types are contiguous ID ranges,
        # so (seed, type) groups are already contiguous runs
        etype = np.searchsorted(view.edge_type_offsets, eid, side="right") - 1
        grp = seed_idx * len(view.edge_type_offsets) + etype
        starts = np.concatenate(([0], np.flatnonzero(grp[1:] != grp[:-1]) + 1))
        sizes = np.diff(np.append(starts, total))
        big = sizes > fanout
        if big.any():
            # only oversized groups need keys; ties keep ascending edge ID (stable sort)
            idx = np.flatnonzero(np.repeat(big, sizes))
            keys = edge_keys(stream_key(*key), seeds[seed_idx[idx]], hop, eid[idx])
            order = np.lexsort((keys, grp[idx]))
            first = np.repeat(np.cumsum(sizes[big]) - sizes[big], sizes[big])
            keep = np.ones(total, dtype=bool)
            keep[idx[order][np.arange(len(idx)) - first >= fanout]] = False
            slots, seed_idx, eid = slots[keep], seed_idx[keep], eid[keep]
    return SampledEdges(view.src_global[slots], seeds[seed_idx], eid)


def sample_one_hop_local(part, seeds, fanout, key, hop=0) -> SampledEdges:
    return sample_one_hop(AdjacencyView.of_partition(part), seeds, fanout, key, hop)


def split_local_remote(seeds, part_of) -> dict:
    """Seeds grouped by the machine owning their in-adjacency, input order kept inside each group."""
    seeds = np.asarray(seeds, dtype=np.int64)
    owners = np.asarray(part_of)[seeds]
    return {int(p): seeds[owners == p] for p in np.unique(owners)}


def stitch(seeds, subsets: dict, results: dict) -> SampledEdges:
    """Merge per-partition results into seed order; a missing result fails the batch."""
    seeds = np.asarray(seeds, dtype=np.int64)
    missing = [p for p, s in subsets.items() if len(s) and p not in results]
    if missing:
        raise IncompleteBatchError(f"no sampling result from partition(s) {missing}")
    parts = [results[p] for p in sorted(subsets) if len(subsets[p])]
    if not parts:
        return SampledEdges.empty()
    if len(parts) == 1:
        return parts[0]
    src = np.concatenate([r.src for r in parts])
    dst = np.concatenate([r.dst for r in parts])
    eid = np.concatenate([r.eid for r in parts])
    order_of_seed = np.argsort(seeds, kind="stable")
    pos = order_of_seed[np.searchsorted(seeds[order_of_seed], dst)]
    order = np.argsort(pos, kind="stable")
    return SampledEdges(src[order], dst[order], eid[order])


def frontier(src, dsts) -> np.ndarray:
    """Sorted unique union of sampled sources and the destination set itself."""
    return np.unique(np.concatenate([np.asarray(src, dtype=np.int64), np.asarray(dsts, dtype=np.int64)]))


def compute_frontier_bundled(batches) -> list[np.ndarray]:
    """Frontiers of several mini-batches in one vectorised pass.

    `batches` is a sequence of (sources, destinations) pairs.
    """
    batches = list(batches)
    if len(batches) <= 1:
        return [frontier(src, dsts) for src, dsts in batches]
    vals = [np.concatenate([np.asarray(src, dtype=np.int64), np.asarray(dsts, dtype=np.int64)]) for src, dsts in batches]
    lens = [len(v) for v in vals]
    v = np.concatenate(vals)
    if v.size == 0:
        return [v.copy() for _ in batches]
    if v.min() < 0 or v.max() >= 1 << 40:
        return [np.unique(x) for x in vals]
    # one sort over (batch index, vertex) packed into a single integer key
    tagged = np.unique(np.repeat(np.arange(len(batches), dtype=np.int64) << 40, lens) | v)
    cuts = np.searchsorted(tagged, np.arange(len(batches) + 1, dtype=np.int64) << 40)
    low = tagged & ((1 << 40) - 1)
    return [low[cuts[i] : cuts[i + 1]] for i in range(len(batches))]


# -- blocks and compaction ---------------------------------------------------------------


@dataclass
class SampledBlock:
    hop: int
    dst_nodes: np.ndarray  # destination set (global IDs)
    edges: SampledEdges


def sample_blocks(view: AdjacencyView, seeds, fanouts, key) -> list[SampledBlock]:
    """Single-machine multi-hop sampling; the oracle for the distributed path."""
    blocks = []
    cur = np.asarray(seeds, dtype=np.int64)
    for hop in range(len(fanouts)):
        edges = sample_one_hop(view, cur, hop_fanout(fanouts, hop), key, hop)
        blocks.append(SampledBlock(hop, cur, edges))
        cur = frontier(edges.src, cur)
    return blocks


@dataclass
class CompactMiniBatch:
    seq_no: int
    seeds: np.ndarray  # global IDs, local IDs [0, len(seeds))
    local2global: np.ndarray
    sizes: list  # sizes[h] = number of local vertices needed at hop h; sizes[0] = len(seeds)
    block_src: list  # per hop, local source IDs
    block_dst: list  # per hop, local destination IDs (< sizes[h])
    block_eid: list
    block_etype: list
    input_nodes: np.ndarray  # global IDs in sorted order, as pulled
    features: np.ndarray | None = None  # rows in local-ID order
    labels: np.ndarray | None = None
    pos_pairs: np.ndarray | None = None  # (m, 2) local IDs
    neg_pairs: np.ndarray | None = None
    epoch: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_hops(self) -> int:
        return len(self.block_src)

    @property
    def num_nodes(self) -> int:
        return len(self.local2global)

    def fingerprint(self) -> bytes:
        """Canonical bytes of everything that reaches the trainer."""
        parts = [np.array([self.seq_no], np.int64), self.seeds, self.local2global, np.asarray(self.sizes, np.int64)]
        for h in range(self.num_hops):
            parts += [self.block_src[h], self.block_dst[h], self.block_eid[h], self.block_etype[h]]
        for extra in (self.features, self.labels, self.pos_pairs, self.neg_pairs):
            if extra is not None:
                parts.append(np.ascontiguousarray(extra))
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _member(sorted_set: np.ndarray, x) -> np.ndarray:
    """Elementwise membership of x in a sorted array."""
    x = np.asarray(x)
    if len(sorted_set) == 0:
        return np.zeros(x.shape, dtype=bool)
    pos = np.minimum(np.searchsorted(sorted_set, x), len(sorted_set) - 1)
    return sorted_set[pos] == x


def compact(blocks: list[SampledBlock], seeds, edge_type_offsets, seq_no: int = 0) -> CompactMiniBatch:
    """Relabel: seeds first, then each hop's new vertices in ascending global order.

    Each hop's destination set is thereby a prefix of its source set.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(np.unique(seeds)) != len(seeds):
        raise StructuralError("seed vertices must be unique")
    if not blocks:
        raise StructuralError("at least one block is required")
    groups = [seeds]
    seen = np.sort(seeds)  # sorted destination set of the current hop
    sizes = [len(seeds)]
    for b in blocks:
        if not np.array_equal(np.sort(np.asarray(b.dst_nodes)), seen):
            raise StructuralError(f"hop {b.hop}: destination set differs from the previous hop's frontier")
        if len(b.edges) and not np.all(_member(seen, b.edges.dst)):
            raise StructuralError(f"hop {b.hop}: edge destination outside the destination set")
        nxt = frontier(b.edges.src, seen)
        groups.append(nxt[~_member(seen, nxt)])
        seen = nxt
        sizes.append(len(seen))
    l2g = np.concatenate(groups)
    order = np.argsort(l2g, kind="stable")
    sorted_ids = l2g[order]

    def to_local(ids):
        return order[np.searchsorted(sorted_ids, ids)]

    bs, bd, be, bt = [], [], [], []
    for b in blocks:
        bs.append(to_local(b.edges.src))
        bd.append(to_local(b.edges.dst))
        be.append(np.asarray(b.edges.eid, dtype=np.int64))
        bt.append(np.searchsorted(edge_type_offsets, b.edges.eid, side="right") - 1)
    return CompactMiniBatch(seq_no, seeds, l2g, sizes, bs, bd, be, bt, input_nodes=sorted_ids)


def reorder_features(batch: CompactMiniBatch, pulled: np.ndarray) -> np.ndarray:
    """Rows pulled for `input_nodes` (sorted) rearranged into local-ID order."""
    return pulled[np.searchsorted(batch.input_nodes, batch.local2global)]


def local_minibatch(g, features, seeds, fanouts, key=(0, 0), seq_no: int = 0) -> CompactMiniBatch:
    """Single-machine sampled, compacted and feature-filled batch with labels; the reference path."""
    blocks = sample_blocks(AdjacencyView.of_graph(g), seeds, fanouts, key)
    mb = compact(blocks, seeds, g.edge_type_offsets, seq_no)
    mb.features = reorder_features(mb, gather_rows(g, features, mb.input_nodes))
    if g.labels is not None:
        mb.labels = g.labels[mb.seeds]
    return mb


# -- scheduling ---------------------------------------------------------------------------


@dataclass
class TargetBatch:
    kind: str  # "vertex" or "link"
    seq_no: int
    epoch: int
    step: int
    key: tuple  # (epoch_seed, seq_no) RNG stream
    targets: np.ndarray  # training IDs (vertex IDs or edge IDs)
    seeds: np.ndarray | None = None  # unique global vertex IDs to sample from
    pos_pairs: np.ndarray | None = None
    neg_pairs: np.ndarray | None = None


def steps_in_epoch(n: int, batch_size: int, drop_last: bool) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def schedule(train_ids, batch_size: int, epoch_seed: int, epochs: int | None = None, steps_per_epoch: int | None = None,
             start_seq: int = 0, stream: int = 0) -> Iterator[TargetBatch]:
    """Endless (or `epochs`-long) stream of shuffled training batches.

    Each epoch is a seeded permutation chunked into batches; `steps_per_epoch`
    truncates epochs so several trainers advance in lockstep.  `stream`
    distinguishes trainers so their permutations are independent.
    """
    ids = np.asarray(train_ids, dtype=np.int64)
    if ids.size == 0:
        raise ConfigurationError("training set is empty")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    steps = steps_in_epoch(len(ids), batch_size, False) if steps_per_epoch is None else int(steps_per_epoch)
    if steps < 1:
        raise ConfigurationError(f"{len(ids)} training IDs cannot fill one batch of {batch_size}")
    seq = start_seq
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = np.random.default_rng([epoch_seed & _MASK, epoch, stream]).permutation(ids)
        for step in range(steps):
            chunk = perm[step * batch_size : (step + 1) * batch_size]
            yield TargetBatch("vertex", seq, epoch, step, (epoch_seed, seq), chunk, seeds=chunk)
            seq += 1
        epoch += 1


def make_link_task(edge_batch: TargetBatch, src, dst, dst_type_range, num_negatives: int, rng) -> TargetBatch:
    """Turn a batch of edge IDs into positive pairs plus corrupted-destination negatives.

    `src`/`dst` give global endpoints of the batch's edges; `dst_type_range`
    is (lo, hi) per positive, the global ID interval of its destination type.
    """
    if num_negatives < 1:
        raise ConfigurationError("num_negatives must be >= 1")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    lo, hi = (np.broadcast_to(np.asarray(a, dtype=np.int64), src.shape) for a in dst_type_range)
    pos = np.stack([src, dst], axis=1)
    neg_src = np.repeat(src, num_negatives)
    neg_dst = rng.integers(np.repeat(lo, num_negatives), np.repeat(hi, num_negatives))
    neg = np.stack([neg_src, neg_dst], axis=1)
    seeds = np.unique(np.concatenate([pos.ravel(), neg.ravel()]))
    return TargetBatch("link", edge_batch.seq_no, edge_batch.epoch, edge_batch.step, edge_batch.key,
                       edge_batch.targets, seeds=seeds, pos_pairs=pos, neg_pairs=neg)


class LinkTaskBuilder:
    """Per-trainer adapter from scheduled edge-ID batches to link targets."""

    def __init__(self, g, num_negatives: int = 1):
        self.g = g
        self.num_negatives = num_negatives

    def __call__(self, batch: TargetBatch) -> TargetBatch:
        g = self.g
        eids = batch.targets
        src, dst = g.src[eids], g.dst[eids]
        dtype_idx = g.vertex_types_of(dst)
        lo, hi = g.vertex_type_offsets[dtype_idx], g.vertex_type_offsets[dtype_idx + 1]
        rng = np.random.default_rng([batch.key[0] & _MASK, batch.key[1], 1])
        return make_link_task(batch, src, dst, (lo, hi), self.num_negatives, rng)


# -- distributed sampling -----------------------------------------------------------------


class DistributedSampler:
    """One machine's view: samples owned adjacency locally and asks peers for the rest.

    Peers are addressed by machine index through `client`.
    """

    def __init__(self, machine: int, part, part_of, client=None, fanouts=DEFAULT_FANOUTS):
        self.machine = machine
        self.part = part
        self.part_of = np.asarray(part_of)
        self.client = client
        self.fanouts = check_fanouts(fanouts)
        self.view = AdjacencyView.of_partition(part)

    def attach(self, server) -> None:
        server.register(Verb.SAMPLE_NEIGHBORS, self._serve)

    def _serve(self, req: SampleRequest, ctx):
        seeds = req.seeds.astype(np.int64)
        return self.sample_local(seeds, req.layer, req.fanout, req.key).to_response()

    def sample_local(self, seeds, hop, fanout, key) -> SampledEdges:
        return sample_one_hop(self.view, seeds, fanout, key, hop)

    def split(self, seeds) -> dict:
        return split_local_remote(seeds, self.part_of)

    def issue_remote(self, subsets: dict, hop: int, key) -> dict:
        """SAMPLE_NEIGHBORS to every non-local owner; returns futures keyed by machine."""
        fanout = hop_fanout(self.fanouts, hop)
        futs = {}
        for p, s in subsets.items():
            if p == self.machine or not len(s):
                continue
            if self.client is None:
                raise ConfigurationError("remote seeds but the sampler has no RPC client")
            req = SampleRequest(hop, fanout, s.astype(np.uint64), (key[0] & _MASK, key[1] & _MASK))
            futs[p] = self.client.call_async(p, Verb.SAMPLE_NEIGHBORS, req)
        return futs

    def sample_hop(self, seeds, hop, key) -> SampledEdges:
        """Blocking one-hop sample across machines (used outside the pipeline)."""
        subsets = self.split(seeds)
        futs = self.issue_remote(subsets, hop, key)
        results = {}
        if self.machine in subsets and len(subsets[self.machine]):
            results[self.machine] = self.sample_local(subsets[self.machine], hop, hop_fanout(self.fanouts, hop), key)
        for p, f in futs.items():
            results[p] = SampledEdges.from_response(f.result())
        return stitch(seeds, subsets, results)

    def sample_blocks(self, seeds, key) -> list[SampledBlock]:
        blocks = []
        cur = np.asarray(seeds, dtype=np.int64)
        for hop in range(len(self.fanouts)):
            edges = self.sample_hop(cur, hop, key)
            blocks.append(SampledBlock(hop, cur, edges))
            cur = frontier(edges.src, cur)
        return blocks
