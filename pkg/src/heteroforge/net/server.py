"""Threaded node server: one reader thread per connection; requests run on reusable handler threads."""
from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time
from typing import Callable

from ..errors import ProtocolError, TransportError
from .protocol import HEADER_SIZE, Verb, decode_header, decode_request, encode_frame, error_payload, ok_payload

log = logging.getLogger(__name__)

Handler = Callable[[object, "RequestContext"], object]


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF before the first byte."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            if got == 0:
                return None
            raise TransportError(f"connection closed mid-frame ({got}/{n} bytes)")
        got += k
    return bytes(buf)


class FrameReader:
    """Buffered frame reader: one recv usually yields a whole small frame (or several)."""

    def __init__(self, sock: socket.socket, chunk: int = 1 << 16):
        self.sock = sock
        self.chunk = chunk
        self.buf = bytearray()

    def _fill(self, need: int) -> bool:
        while len(self.buf) < need:
            data = self.sock.recv(max(self.chunk, need - len(self.buf)))
            if not data:
                if not self.buf:
                    return False
                raise TransportError(f"connection closed mid-frame ({len(self.buf)}/{need} bytes)")
            self.buf += data
        return True

    def next(self):
        """-> (request id, verb, payload) or None on clean EOF between frames."""
        if not self._fill(HEADER_SIZE):
            return None
        length, rid, verb = decode_header(bytes(self.buf[:HEADER_SIZE]))
        if not self._fill(HEADER_SIZE + length):
            raise TransportError("connection closed mid-frame")
        payload = bytes(self.buf[HEADER_SIZE : HEADER_SIZE + length])
        del self.buf[: HEADER_SIZE + length]
        return rid, verb, payload


class RequestContext:
    __slots__ = ("server", "conn_id", "request_id", "verb")

    def __init__(self, server, conn_id, request_id, verb):
        self.server = server
        self.conn_id = conn_id
        self.request_id = request_id
        self.verb = verb


class _Conn:
    def __init__(self, sock, conn_id, peer):
        self.sock = sock
        self.id = conn_id
        self.peer = peer
        self.send_lock = threading.Lock()
        self.closed = False

    def send(self, data: bytes):
        with self.send_lock:
            if self.closed:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.closed = True

    def close(self):
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class NodeServer:
    """Serves registered verb handlers; SHUTDOWN drains in-flight requests then stops."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, name: str = "node", delays: dict | None = None):
        self.host = host
        self.port = port
        self.name = name
        self.handlers: dict[Verb, Handler] = {}
        self.delays = {Verb(k): float(v) for k, v in (delays or {}).items()}
        self.disconnect_callbacks: list[Callable[[int], None]] = []
        self._sock = None
        self._conns: dict[int, _Conn] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._inflight = 0
        self._stopping = False
        self._stopped = threading.Event()
        self._accept_thread = None
        self.requests_served = 0
        self._jobs: queue.SimpleQueue = queue.SimpleQueue()
        self._idle_workers = 0
        self.handler_threads = 0

    # -- lifecycle -------------------------------------------------------------

    def register(self, verb: Verb, handler: Handler) -> None:
        self.handlers[Verb(verb)] = handler

    def start(self) -> "NodeServer":
        if self._sock is not None:
            raise TransportError(f"{self.name}: server already started", peer=self.address)
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((self.host, self.port))
        except OSError as exc:
            s.close()
            raise TransportError(f"{self.name}: cannot bind {self.host}:{self.port}: {exc.strerror or exc}",
                                 peer=(self.host, self.port)) from exc
        s.listen(128)
        self._sock = s
        self.port = s.getsockname()[1]
        self._accept_thread = threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True)
        self._accept_thread.start()
        log.debug("%s listening on %s:%d", self.name, self.host, self.port)
        return self

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def stop(self) -> None:
        with self._lock:
            self._stopping = True
            conns = list(self._conns.values())
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        for c in conns:
            c.close()
        self._stopped.set()

    def wait_stopped(self, timeout=None) -> bool:
        return self._stopped.wait(timeout)

    def drain(self, timeout: float | None = None, keep: int = 0) -> bool:
        """Wait until at most `keep` requests are in flight."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._idle:
            while self._inflight > keep:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return False
                self._idle.wait(left)
        return True

    def wait_disconnected(self, timeout: float | None = None) -> bool:
        """Wait until every client connection has closed."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._idle:
            while self._conns:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return False
                self._idle.wait(left)
        return True

    # -- internals ---------------------------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                sock, peer = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                if self._stopping:
                    sock.close()
                    continue
                conn = _Conn(sock, next(self._ids), peer)
                self._conns[conn.id] = conn
            threading.Thread(target=self._read_loop, args=(conn,), name=f"{self.name}-conn{conn.id}", daemon=True).start()

    def _read_loop(self, conn: _Conn):
        try:
            reader = FrameReader(conn.sock)
            while True:
                frame = reader.next()
                if frame is None:
                    break
                rid, verb, payload = frame
                with self._lock:
                    self._inflight += 1
                self._dispatch(conn, rid, verb, payload)
        except ProtocolError as exc:
            log.error("%s: protocol error from %s: %s; closing connection", self.name, conn.peer, exc)
        except (OSError, TransportError) as exc:
            if not self._stopping:
                log.debug("%s: connection %s dropped: %s", self.name, conn.peer, exc)
        finally:
            conn.close()
            with self._lock:
                self._conns.pop(conn.id, None)
                self._idle.notify_all()
            for cb in list(self.disconnect_callbacks):
                try:
                    cb(conn.id)
                except Exception:  # pragma: no cover - callbacks must not kill the reader
                    log.exception("disconnect callback failed")

    def _dispatch(self, *job):
        # every request gets a free thread (handlers may block, e.g. in a barrier); threads are reused
        with self._lock:
            if self._idle_workers > 0:
                self._idle_workers -= 1
            else:
                self.handler_threads += 1
                threading.Thread(target=self._worker, name=f"{self.name}-handler", daemon=True).start()
        self._jobs.put(job)

    def _worker(self):
        while True:
            self._handle(*self._jobs.get())
            with self._lock:
                self._idle_workers += 1

    def _handle(self, conn: _Conn, rid: int, verb: Verb, payload: bytes):
        try:
            delay = self.delays.get(verb, 0.0)
            if delay > 0:
                time.sleep(delay)
            if verb == Verb.SHUTDOWN:
                self._shutdown(conn, rid)
                return
            handler = self.handlers.get(verb)
            try:
                if handler is None:
                    raise ProtocolError(f"{self.name} has no handler for {verb.name}")
                request = decode_request(verb, payload)
                body = ok_payload(handler(request, RequestContext(self, conn.id, rid, verb)).encode())
            except Exception as exc:
                log.debug("%s: %s request %d failed: %r", self.name, verb.name, rid, exc)
                body = error_payload(f"{type(exc).__name__}: {exc}")
            conn.send(encode_frame(rid, verb, body))
        finally:
            with self._idle:
                self._inflight -= 1
                self.requests_served += 1
                self._idle.notify_all()

    def _shutdown(self, conn: _Conn, rid: int):
        with self._lock:
            self._stopping = True
        self.drain(keep=1)  # everything except this request
        conn.send(encode_frame(rid, Verb.SHUTDOWN, ok_payload(b"")))
        threading.Thread(target=self.stop, daemon=True).start()
