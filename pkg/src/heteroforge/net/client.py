"""Asynchronous RPC client: one reused connection per peer, futures keyed by request ID."""
from __future__ import annotations

import heapq
import itertools
import logging
import socket
import threading
import time
from concurrent.futures import Future

from ..errors import ProtocolError, RemoteError, TransportError
from .protocol import (
    RESPONSE_TYPES,
    STATUS_ERROR,
    Verb,
    encode_frame,
    split_status,
)
from .server import FrameReader

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class _PeerConnection:
    def __init__(self, client: "RpcClient", peer, address):
        self.client = client
        self.peer = peer
        self.address = address
        self.sock = None
        self.send_lock = threading.Lock()
        self.pending: dict[int, tuple[Future, Verb]] = {}
        self.expired: set[int] = set()
        self.lock = threading.Lock()
        self.dead = False

    def connect(self, timeout):
        try:
            sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as exc:
            raise TransportError(f"peer {self.peer} at {self.address[0]}:{self.address[1]} unreachable: "
                                 f"{exc.strerror or exc}", peer=self.peer) from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        threading.Thread(target=self._read_loop, name=f"rpc-peer{self.peer}", daemon=True).start()

    def send(self, rid, verb, payload: bytes, fut: Future):
        with self.lock:
            if self.dead:
                raise TransportError(f"connection to peer {self.peer} is closed", peer=self.peer)
            self.pending[rid] = (fut, verb)
        try:
            with self.send_lock:
                self.sock.sendall(encode_frame(rid, verb, payload))
        except OSError as exc:
            self.fail_all(TransportError(f"send to peer {self.peer} failed: {exc}", peer=self.peer))
            raise TransportError(f"send to peer {self.peer} failed: {exc}", peer=self.peer) from exc

    def expire(self, rid) -> Future | None:
        with self.lock:
            entry = self.pending.pop(rid, None)
            if entry is not None:
                self.expired.add(rid)
        return entry[0] if entry else None

    def fail_all(self, exc):
        with self.lock:
            self.dead = True
            pending, self.pending = self.pending, {}
        for fut, _ in pending.values():
            if not fut.done():
                fut.set_exception(exc)

    def close(self):
        self.fail_all(TransportError(f"client closed connection to peer {self.peer}", peer=self.peer))
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()

    def _read_loop(self):
        err = None
        try:
            reader = FrameReader(self.sock)
            while True:
                frame = reader.next()
                if frame is None:
                    err = TransportError(f"peer {self.peer} closed the connection", peer=self.peer)
                    break
                rid, verb, payload = frame
                with self.lock:
                    entry = self.pending.pop(rid, None)
                    late = rid in self.expired
                    self.expired.discard(rid)
                if entry is None:
                    if late:
                        continue
                    raise ProtocolError(f"response for unknown request id {rid}")
                fut, sent_verb = entry
                if verb != sent_verb:
                    fut.set_exception(ProtocolError(f"response verb {verb.name} for a {sent_verb.name} request"))
                    continue
                try:
                    status, body = split_status(payload)
                    if status == STATUS_ERROR:
                        fut.set_exception(RemoteError(f"peer {self.peer}: {body.decode('utf-8', 'replace')}"))
                    else:
                        fut.set_result(RESPONSE_TYPES[verb].decode(body))
                except ProtocolError as exc:
                    fut.set_exception(exc)
        except ProtocolError as exc:
            log.error("protocol error from peer %s: %s", self.peer, exc)
            err = TransportError(f"protocol error from peer {self.peer}: {exc}", peer=self.peer)
        except (OSError, TransportError) as exc:
            err = TransportError(f"connection to peer {self.peer} lost: {exc}", peer=self.peer)
        self.fail_all(err)


class RpcClient:
    """Issues requests to cluster peers; `peers` maps a peer key (rank) to (host, port)."""

    def __init__(self, peers: dict, timeout: float = DEFAULT_TIMEOUT, connect_timeout: float | None = None):
        self.peers = dict(peers)
        self.timeout = float(timeout)
        self.connect_timeout = connect_timeout if connect_timeout is not None else min(self.timeout, 5.0)
        self._conns: dict = {}
        self._conn_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._deadlines: list = []
        self._cv = threading.Condition()
        self._closed = False
        self._reaper = threading.Thread(target=self._reap_loop, name="rpc-reaper", daemon=True)
        self._reaper.start()

    def _connection(self, peer) -> _PeerConnection:
        with self._conn_lock:
            conn = self._conns.get(peer)
            if conn is not None and not conn.dead:
                return conn
            if peer not in self.peers:
                raise TransportError(f"unknown peer {peer}", peer=peer)
            conn = _PeerConnection(self, peer, self.peers[peer])
            conn.connect(self.connect_timeout)
            self._conns[peer] = conn
            return conn

    def call_async(self, peer, verb: Verb, request, timeout: float | None = None) -> Future:
        """Send without blocking on the reply; the future yields the decoded response."""
        if self._closed:
            raise TransportError("client is closed", peer=peer)
        payload = request if isinstance(request, (bytes, bytearray)) else request.encode()
        fut: Future = Future()
        rid = next(self._ids)
        try:
            conn = self._connection(peer)
            conn.send(rid, Verb(verb), bytes(payload), fut)
        except TransportError as exc:
            fut.set_exception(exc)
            return fut
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        with self._cv:
            heapq.heappush(self._deadlines, (deadline, rid, peer))
            if self._deadlines[0][1] == rid:  # the reaper only needs waking for a new earliest deadline
                self._cv.notify()
        return fut

    def call(self, peer, verb: Verb, request, timeout: float | None = None):
        return self.call_async(peer, verb, request, timeout).result()

    def close(self):
        self._closed = True
        with self._cv:
            self._cv.notify()
        with self._conn_lock:
            conns, self._conns = list(self._conns.values()), {}
        for c in conns:
            c.close()

    def _reap_loop(self):
        while True:
            with self._cv:
                while not self._closed and (not self._deadlines or self._deadlines[0][0] > time.monotonic()):
                    wait = None if not self._deadlines else self._deadlines[0][0] - time.monotonic()
                    self._cv.wait(wait)
                if self._closed:
                    return
                _, rid, peer = heapq.heappop(self._deadlines)
            conn = self._conns.get(peer)
            fut = conn.expire(rid) if conn is not None else None
            if fut is not None and not fut.done():
                fut.set_exception(TransportError(f"request {rid} to peer {peer} timed out", peer=peer))
