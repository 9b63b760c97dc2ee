"""Barrier and mean-allreduce: gather at a coordinator, reduce in rank order, broadcast."""
from __future__ import annotations

import logging
import threading

import numpy as np

from ..errors import CollectiveError, HeteroForgeError
from .protocol import CollectiveRequest, Empty, Verb, VectorResponse

log = logging.getLogger(__name__)


def reduce_mean(contribs: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean accumulated in float64, strictly in list (rank) order."""
    acc = np.zeros(len(contribs[0]), dtype=np.float64)
    for v in contribs:
        acc += v
    return (acc / len(contribs)).astype(np.float32)


class _Round:
    def __init__(self, size):
        self.size = size
        self.values: dict[int, np.ndarray | None] = {}
        self.done = threading.Event()
        self.result = None
        self.error = None
        self.collected = 0


class Coordinator:
    """Collective rendezvous hosted by one node server (rank 0 by convention)."""

    def __init__(self, server, timeout: float = 30.0):
        self.timeout = timeout
        self._rounds: dict = {}
        self._members: dict = {}  # group -> {conn_id: rank}
        self._broken: dict = {}
        self._lock = threading.Lock()
        server.register(Verb.BARRIER, self._handle)
        server.register(Verb.ALLREDUCE, self._handle)
        server.disconnect_callbacks.append(self._on_disconnect)

    def _handle(self, req: CollectiveRequest, ctx):
        key = (req.group, ctx.verb, req.round)
        with self._lock:
            if req.group in self._broken:
                raise CollectiveError(self._broken[req.group])
            if not 0 <= req.rank < req.size:
                raise CollectiveError(f"rank {req.rank} outside group of size {req.size}")
            self._members.setdefault(req.group, {})[ctx.conn_id] = req.rank
            rnd = self._rounds.setdefault(key, _Round(req.size))
            if rnd.size != req.size:
                raise CollectiveError(f"group {req.group!r}: size mismatch ({req.size} vs {rnd.size})")
            if req.rank in rnd.values:
                raise CollectiveError(f"group {req.group!r}: rank {req.rank} joined round {req.round} twice")
            rnd.values[req.rank] = req.values
            if len(rnd.values) == rnd.size:
                self._complete(rnd, ctx.verb)
        if not rnd.done.wait(self.timeout):
            self._fail_group(req.group, f"group {req.group!r} round {req.round} timed out waiting for members")
        with self._lock:
            rnd.collected += 1
            if rnd.collected == rnd.size:
                self._rounds.pop(key, None)
        if rnd.error is not None:
            raise CollectiveError(rnd.error)
        return rnd.result

    def _complete(self, rnd: _Round, verb):
        if verb == Verb.BARRIER:
            rnd.result = Empty()
        else:
            vals = [rnd.values[r] for r in range(rnd.size)]
            if any(v is None for v in vals) or len({len(v) for v in vals}) != 1:
                rnd.error = "allreduce members passed vectors of different lengths"
            else:
                rnd.result = VectorResponse(reduce_mean(vals))
        rnd.done.set()

    def _fail_group(self, group, message):
        with self._lock:
            self._broken[group] = message
            for (g, _, _), rnd in list(self._rounds.items()):
                if g == group and not rnd.done.is_set():
                    rnd.error = message
                    rnd.done.set()

    def _on_disconnect(self, conn_id):
        for group, members in list(self._members.items()):
            if conn_id in members:
                rank = members[conn_id]
                with self._lock:
                    pending = any(g == group and not r.done.is_set() for (g, _, _), r in self._rounds.items())
                if pending:
                    log.warning("collective group %r lost member rank %d", group, rank)
                else:
                    log.debug("collective group %r: member rank %d left", group, rank)
                # later rounds fail fast instead of waiting for the departed member
                self._fail_group(group, f"group {group!r}: member rank {rank} disconnected")


class ProcessGroup:
    """One member's handle; collectives go to the coordinator peer over RPC."""

    def __init__(self, client, coordinator_peer, rank: int, size: int, name: str = "trainers", timeout=None):
        self.client = client
        self.coordinator = coordinator_peer
        self.rank = rank
        self.size = size
        self.name = name
        self.timeout = timeout
        self._round = 0

    def _call(self, verb, values=None):
        req = CollectiveRequest(self.name, self._round, self.rank, self.size, values)
        self._round += 1
        try:
            return self.client.call(self.coordinator, verb, req, timeout=self.timeout)
        except CollectiveError:
            raise
        except HeteroForgeError as exc:
            raise CollectiveError(f"{verb.name} failed on rank {self.rank}: {exc}") from exc

    def barrier(self) -> None:
        self._call(Verb.BARRIER)

    def allreduce_mean(self, vec) -> np.ndarray:
        vec = np.ascontiguousarray(vec, dtype=np.float32).ravel()
        return self._call(Verb.ALLREDUCE, vec).values


class LocalGroup:
    """Single-member group: barrier is a no-op, allreduce is the identity."""

    rank = 0
    size = 1

    def barrier(self) -> None:
        pass

    def allreduce_mean(self, vec) -> np.ndarray:
        return np.array(vec, dtype=np.float32).ravel()
