"""Distributed feature store: one ID space per vertex/edge type, sharded by partition ownership."""
from __future__ import annotations

import logging
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, OwnershipError, RangeError, StructuralError
from .net.protocol import Empty, PullRequest, PullResponse, PushRequest, Verb

log = logging.getLogger(__name__)

MAX_RPC_BYTES = 64 << 20


@dataclass
class IdSpace:
    """Routing table of one ID space: owner machine per type-local ID."""

    name: str
    count: int
    width: int
    owner: np.ndarray  # (count,) machine index

    def __post_init__(self):
        self.owner = np.asarray(self.owner, dtype=np.int64)
        if self.owner.shape != (self.count,):
            raise ConfigurationError(f"space {self.name!r}: partition policy covers {len(self.owner)} of {self.count} IDs")


@dataclass(eq=False)
class KVShard:
    name: str
    owned_ids: np.ndarray  # sorted type-local IDs
    rows: np.ndarray  # (len(owned_ids), width) float32
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.owned_ids = np.asarray(self.owned_ids, dtype=np.int64)
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.owned_ids):
            raise StructuralError(f"shard {self.name!r}: {self.rows.shape[0]} rows for {len(self.owned_ids)} IDs")
        if len(self.owned_ids) > 1 and np.any(np.diff(self.owned_ids) <= 0):
            raise StructuralError(f"shard {self.name!r}: owned IDs must be sorted and unique")

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def positions(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.owned_ids, ids)
        ok = pos < len(self.owned_ids)
        ok[ok] = self.owned_ids[pos[ok]] == ids[ok]
        if not ok.all():
            raise OwnershipError(f"shard {self.name!r} does not own ID {int(ids[~ok][0])}")
        return pos

    def local_gather(self, ids, out=None) -> np.ndarray:
        pos = self.positions(ids)
        if out is None:
            return self.rows[pos]
        np.take(self.rows, pos, axis=0, out=out)
        return out

    def write(self, ids, rows) -> None:
        pos = self.positions(ids)
        with self.lock:
            self.rows[pos] = rows


class PendingPull:
    """Rows land in `out` as remote chunks arrive; completes once every chunk has landed."""

    def __init__(self, out: np.ndarray):
        self.out = out
        self.future: Future = Future()
        self._remaining = 1  # held by the issuer until all chunks are issued
        self._lock = threading.Lock()

    def _add(self):
        with self._lock:
            self._remaining += 1

    def _finish(self, exc=None):
        with self._lock:
            if self.future.done():
                return
            if exc is not None:
                self.future.set_exception(exc)
                return
            self._remaining -= 1
            if self._remaining == 0:
                self.future.set_result(self.out)

    def seal(self):
        """Called by the issuer once every chunk is in flight."""
        self._finish()

    def result(self, timeout=None) -> np.ndarray:
        return self.future.result(timeout)

    def add_done_callback(self, fn):
        self.future.add_done_callback(fn)


VERTEX_SPACE = "@vertex"  # pull by global vertex ID across all vertex-type spaces


class KVStore:
    """One instance per node process.

    `machine` is this node's partition index; `client` reaches peers keyed by
    partition index (None for a single-machine store).
    """

    def __init__(self, machine: int = 0, client=None, max_rpc_bytes: int = MAX_RPC_BYTES):
        self.machine = machine
        self.client = client
        self.max_rpc_bytes = max_rpc_bytes
        self.spaces: dict[str, IdSpace] = {}
        self.shards: dict[str, KVShard] = {}
        self.vertex_spaces: list[str] = []  # vertex-type order
        self.vertex_type_offsets: np.ndarray | None = None
        self._vowner = None
        self._stats_lock = threading.Lock()
        self.bytes_local = 0
        self.bytes_remote = 0

    # -- registration ---------------------------------------------------------------

    def register_space(self, space: IdSpace, shard: KVShard | None = None) -> None:
        if space.name.startswith("@"):
            raise ConfigurationError(f"space names starting with '@' are reserved, got {space.name!r}")
        if space.name in self.spaces:
            raise ConfigurationError(f"ID space {space.name!r} already registered")
        if shard is not None:
            mine = np.flatnonzero(space.owner == self.machine)
            if not np.array_equal(mine, shard.owned_ids):
                raise ConfigurationError(f"shard {space.name!r} does not match the partition policy for machine {self.machine}")
            if shard.width != space.width:
                raise StructuralError(f"shard {space.name!r} width {shard.width} != space width {space.width}")
            self.shards[space.name] = shard
        self.spaces[space.name] = space

    def set_vertex_layout(self, type_names, offsets) -> None:
        """Enable global-ID pulls across vertex-type spaces."""
        self.vertex_spaces = list(type_names)
        self.vertex_type_offsets = np.asarray(offsets, dtype=np.int64)
        self._vowner = None

    def attach(self, server) -> None:
        server.register(Verb.PULL_DATA, self._serve_pull)
        server.register(Verb.PUSH_DATA, self._serve_push)

    def _serve_pull(self, req: PullRequest, ctx):
        if req.space == VERTEX_SPACE:
            gids = req.ids
            offs = self.vertex_type_offsets
            if offs is None:
                raise ConfigurationError(f"machine {self.machine} has no vertex layout")
            if gids.size and (gids.min() < 0 or gids.max() >= offs[-1]):
                raise RangeError("global vertex ID out of range")
            types = np.searchsorted(offs, gids, side="right") - 1
            out = np.empty((len(gids), self._vertex_width(types)), dtype=np.float32)
            self._gather_vertices(gids, types, out, np.arange(len(gids)))
            return PullResponse(out)
        return PullResponse(self._shard(req.space).local_gather(req.ids))

    def _serve_push(self, req: PushRequest, ctx):
        self._shard(req.space).write(req.ids, req.rows)
        return Empty()

    def _shard(self, name) -> KVShard:
        try:
            return self.shards[name]
        except KeyError:
            raise ConfigurationError(f"no local shard for space {name!r} on machine {self.machine}") from None

    def _space(self, name) -> IdSpace:
        try:
            return self.spaces[name]
        except KeyError:
            raise ConfigurationError(f"unknown ID space {name!r}") from None

    def _check(self, space: IdSpace, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.size and (ids.min() < 0 or ids.max() >= space.count):
            bad = ids[(ids < 0) | (ids >= space.count)][0]
            raise RangeError(f"ID {int(bad)} out of range for space {space.name!r} (count {space.count})")
        return ids

    def _count(self, local=0, remote=0):
        with self._stats_lock:
            self.bytes_local += local
            self.bytes_remote += remote

    def reset_counters(self):
        with self._stats_lock:
            self.bytes_local = self.bytes_remote = 0

    # -- pull / push ------------------------------------------------------------------

    def pull_start(self, name: str, ids, out: np.ndarray | None = None, row_offset: int = 0,
                   pending: PendingPull | None = None) -> PendingPull:
        """Gather local rows now and issue one request per remote owner chunk.

        Rows for ids[i] land at out[row_offset + i].  Passing `pending` lets
        several spaces share one completion.
        """
        space = self._space(name)
        ids = self._check(space, ids)
        if out is None:
            out = np.empty((len(ids), space.width), dtype=np.float32)
        if pending is None:
            pending = PendingPull(out)
        owners = space.owner[ids]
        local = np.flatnonzero(owners == self.machine)
        if local.size:
            out[row_offset + local] = self._shard(name).local_gather(ids[local])
            self._count(local=local.size * space.width * 4)
        remote = np.flatnonzero(owners != self.machine)
        if remote.size:
            if self.client is None:
                raise ConfigurationError(f"space {name!r}: remote IDs requested but the store has no RPC client")
            chunk = max(1, self.max_rpc_bytes // max(1, space.width * 4))
            order = remote[np.argsort(owners[remote], kind="stable")]
            peers, starts = np.unique(owners[order], return_index=True)
            bounds = list(starts) + [len(order)]
            for j, peer in enumerate(peers):
                group = order[bounds[j] : bounds[j + 1]]
                for c in range(0, len(group), chunk):
                    pos = group[c : c + chunk]
                    pending._add()
                    fut = self.client.call_async(int(peer), Verb.PULL_DATA, PullRequest(name, ids[pos]))
                    fut.add_done_callback(self._landing(pending, out, row_offset + pos, space.width))
        return pending

    def _landing(self, pending: PendingPull, out, dest, width):
        def done(fut):
            try:
                rows = fut.result().rows
                if rows.shape != (len(dest), width):
                    raise StructuralError(f"remote pull returned shape {rows.shape}, expected {(len(dest), width)}")
                out[dest] = rows
                self._count(remote=rows.nbytes)
            except Exception as exc:  # noqa: BLE001 - surfaced through the pending future
                pending._finish(exc)
                return
            pending._finish()

        return done

    def pull(self, name: str, ids, out: np.ndarray | None = None) -> np.ndarray:
        pending = self.pull_start(name, ids, out)
        pending.seal()
        return pending.result()

    def _vertex_owner(self) -> np.ndarray:
        if self._vowner is None:
            self._vowner = np.concatenate([self.spaces[n].owner for n in self.vertex_spaces]) if self.vertex_spaces \
                else np.zeros(0, np.int64)
        return self._vowner

    def _vertex_width(self, types) -> int:
        present = np.flatnonzero(np.bincount(types, minlength=len(self.vertex_spaces)))
        widths = {self.spaces[self.vertex_spaces[t]].width for t in present}
        if len(widths) > 1:
            raise StructuralError("vertex types in one pull must share a feature width")
        if widths:
            return widths.pop()
        return self.spaces[self.vertex_spaces[0]].width if self.vertex_spaces else 0

    def _gather_vertices(self, gids, types, out, dest) -> None:
        """Local rows of global vertex IDs into out[dest]."""
        offs = self.vertex_type_offsets
        for t in np.unique(types):
            sel = np.flatnonzero(types == t)
            out[dest[sel]] = self._shard(self.vertex_spaces[t]).local_gather(gids[sel] - offs[t])

    def pull_vertices_start(self, global_ids, out: np.ndarray | None = None) -> PendingPull:
        """Pull rows for global vertex IDs that may span several vertex-type spaces.

        One request per owning peer (and chunk) regardless of how many types it covers.
        """
        if self.vertex_type_offsets is None:
            raise ConfigurationError("vertex layout not set on this store")
        gids = np.asarray(global_ids, dtype=np.int64).ravel()
        offs = self.vertex_type_offsets
        if gids.size and (gids.min() < 0 or gids.max() >= offs[-1]):
            raise RangeError("global vertex ID out of range")
        types = np.searchsorted(offs, gids, side="right") - 1
        width = self._vertex_width(types)
        if out is None:
            out = np.empty((len(gids), width), dtype=np.float32)
        pending = PendingPull(out)
        owners = self._vertex_owner()[gids]
        local = np.flatnonzero(owners == self.machine)
        if local.size:
            self._gather_vertices(gids[local], types[local], out, local)
            self._count(local=local.size * width * 4)
        remote = np.flatnonzero(owners != self.machine)
        if remote.size:
            if self.client is None:
                raise ConfigurationError("remote vertex IDs requested but the store has no RPC client")
            chunk = max(1, self.max_rpc_bytes // max(1, width * 4))
            order = remote[np.argsort(owners[remote], kind="stable")]
            peers, starts = np.unique(owners[order], return_index=True)
            bounds = list(starts) + [len(order)]
            for j, peer in enumerate(peers):
                group = order[bounds[j] : bounds[j + 1]]
                for c in range(0, len(group), chunk):
                    pos = group[c : c + chunk]
                    pending._add()
                    fut = self.client.call_async(int(peer), Verb.PULL_DATA, PullRequest(VERTEX_SPACE, gids[pos]))
                    fut.add_done_callback(self._landing(pending, out, pos, width))
        return pending

    def pull_vertices(self, global_ids, out=None) -> np.ndarray:
        pending = self.pull_vertices_start(global_ids, out)
        pending.seal()
        return pending.result()

    def push(self, name: str, ids, rows, timeout=None) -> None:
        space = self._space(name)
        ids = self._check(space, ids)
        rows = np.ascontiguousarray(rows, dtype=np.float32)
        if rows.shape != (len(ids), space.width):
            raise StructuralError(f"push to {name!r}: rows shape {rows.shape}, expected {(len(ids), space.width)}")
        if not len(ids):
            return
        owners = space.owner[ids]
        futures = []
        remote = np.flatnonzero(owners != self.machine)
        if remote.size and self.client is None:
            raise ConfigurationError(f"space {name!r}: remote IDs pushed but the store has no RPC client")
        chunk = max(1, self.max_rpc_bytes // max(1, space.width * 4))
        for peer in np.unique(owners[remote]):
            group = remote[owners[remote] == peer]
            for c in range(0, len(group), chunk):
                pos = group[c : c + chunk]
                futures.append(self.client.call_async(int(peer), Verb.PUSH_DATA, PushRequest(name, ids[pos], rows[pos]), timeout))
        local = np.flatnonzero(owners == self.machine)
        if local.size:
            self._shard(name).write(ids[local], rows[local])
        for f in futures:
            f.result()

    def local_gather(self, name: str, ids) -> np.ndarray:
        return self._shard(name).local_gather(np.asarray(ids, dtype=np.int64))


def graph_spaces(g, book, widths: dict) -> list[IdSpace]:
    """Vertex-type spaces then edge-type spaces with ownership taken from the partition book."""
    return id_spaces(g.schema, g.vertex_type_offsets, g.edge_type_offsets, book.part_of, book.part_of[g.dst], widths)


def id_spaces(schema, vertex_type_offsets, edge_type_offsets, part_of, edge_owner, widths: dict) -> list[IdSpace]:
    """Same as graph_spaces, from saved routing arrays instead of the whole graph."""
    spaces = []
    for t, name in enumerate(schema.vertex_types):
        lo, hi = vertex_type_offsets[t], vertex_type_offsets[t + 1]
        if name in widths:
            spaces.append(IdSpace(name, int(hi - lo), int(widths[name]), part_of[lo:hi]))
    for e, (_, rel, _) in enumerate(schema.edge_types):
        lo, hi = edge_type_offsets[e], edge_type_offsets[e + 1]
        if rel in widths:
            spaces.append(IdSpace(rel, int(hi - lo), int(widths[rel]), edge_owner[lo:hi]))
    return spaces
