import logging
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heteroforge.errors import CollectiveError, ProtocolError, RemoteError, TransportError
from heteroforge.net import (
    CollectiveRequest,
    Coordinator,
    Empty,
    LocalGroup,
    NodeServer,
    ProcessGroup,
    PullRequest,
    PullResponse,
    RpcClient,
    Verb,
    decode_frame,
    encode_frame,
)
from heteroforge.net.protocol import HEADER_SIZE, REQUEST_TYPES, RESPONSE_TYPES, decode_header
from support import messages, same

@settings(max_examples=10_000, deadline=None)
@given(messages(), st.integers(0, 2**64 - 1))
def test_frame_round_trip_every_verb(msg, rid):
    verb, req, resp = msg
    for obj, table in ((req, REQUEST_TYPES), (resp, RESPONSE_TYPES)):
        frame = decode_frame(encode_frame(rid, verb, obj.encode()))
        assert frame.request_id == rid and frame.verb == verb
        same(obj, table[verb].decode(frame.payload))


def test_header_layout_is_bit_exact():
    raw = encode_frame(0x0102030405060708, Verb.PULL_DATA, b"xyz")
    assert raw == b"HFN1" + b"\x03\x00\x00\x00" + bytes.fromhex("0807060504030201") + b"\x02" + b"xyz"
    assert HEADER_SIZE == 17


def test_protocol_errors():
    with pytest.raises(ProtocolError, match="magic"):
        decode_header(b"XXXX" + bytes(13))
    with pytest.raises(ProtocolError, match="unknown verb"):
        decode_header(b"HFN1" + bytes(12) + b"\x09")
    with pytest.raises(ProtocolError):
        PullRequest.decode(b"\x01")
    with pytest.raises(ProtocolError, match="trailing"):
        Empty.decode(b"\x00")


@pytest.fixture
def echo_server():
    srv = NodeServer(name="echo", delays={})

    def pull(req, ctx):
        if req.space == "slow":
            time.sleep(0.05)
        if req.space == "boom":
            raise ValueError("no such space")
        return PullResponse(np.asarray(req.ids, dtype=np.float32)[:, None])

    srv.register(Verb.PULL_DATA, pull)
    Coordinator(srv, timeout=5.0)
    srv.start()
    yield srv
    srv.stop()


def test_round_trip_and_remote_error(echo_server):
    cli = RpcClient({0: echo_server.address})
    try:
        out = cli.call(0, Verb.PULL_DATA, PullRequest("a", np.array([7])))
        assert out.rows.tolist() == [[7.0]]
        with pytest.raises(RemoteError, match="no such space"):
            cli.call(0, Verb.PULL_DATA, PullRequest("boom", np.array([1])))
    finally:
        cli.close()


def test_out_of_order_completion(echo_server):
    cli = RpcClient({0: echo_server.address})
    try:
        order = []
        slow = cli.call_async(0, Verb.PULL_DATA, PullRequest("slow", np.array([1])))
        fast = cli.call_async(0, Verb.PULL_DATA, PullRequest("fast", np.array([2])))
        slow.add_done_callback(lambda f: order.append("slow"))
        fast.add_done_callback(lambda f: order.append("fast"))
        assert slow.result(5).rows[0, 0] == 1 and fast.result(5).rows[0, 0] == 2
        assert order == ["fast", "slow"]
    finally:
        cli.close()


def test_concurrent_pulls_match_request_ids(echo_server):
    cli = RpcClient({0: echo_server.address})
    try:
        futs = [cli.call_async(0, Verb.PULL_DATA, PullRequest("a", np.arange(i, i + 3))) for i in range(20)]
        for i, f in enumerate(futs):
            assert f.result(5).rows[:, 0].tolist() == [i, i + 1, i + 2]
    finally:
        cli.close()


def test_injected_delay_and_timeout():
    srv = NodeServer(delays={Verb.PULL_DATA: 0.3})
    srv.register(Verb.PULL_DATA, lambda r, c: PullResponse(np.zeros((0, 1), np.float32)))
    srv.start()
    cli = RpcClient({0: srv.address}, timeout=0.05)
    try:
        with pytest.raises(TransportError, match="timed out"):
            cli.call(0, Verb.PULL_DATA, PullRequest("a", np.zeros(0, np.int64)))
        # late reply to the expired request is dropped; the connection stays usable
        out = cli.call(0, Verb.PULL_DATA, PullRequest("a", np.zeros(0, np.int64)), timeout=2.0)
        assert out.rows.shape == (0, 1)
    finally:
        cli.close()
        srv.stop()


def test_unreachable_peer():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    cli = RpcClient({3: ("127.0.0.1", port)}, timeout=1.0)
    fut = cli.call_async(3, Verb.BARRIER, CollectiveRequest("g", 0, 0, 1))
    with pytest.raises(TransportError) as info:
        fut.result(5)
    assert info.value.peer == 3
    cli.close()


def test_bind_failure():
    srv = NodeServer().start()
    try:
        with pytest.raises(TransportError, match="cannot bind"):
            NodeServer(port=srv.port).start()
    finally:
        srv.stop()


def test_malformed_magic_closes_connection(echo_server, caplog):
    with caplog.at_level(logging.ERROR):
        with socket.create_connection(echo_server.address) as s:
            s.sendall(b"JUNK" + bytes(13))
            s.settimeout(2)
            assert s.recv(1) == b""
    assert any("bad magic" in r.getMessage() for r in caplog.records)


def test_shutdown_drains_outstanding():
    srv = NodeServer(delays={Verb.PULL_DATA: 0.2})
    srv.register(Verb.PULL_DATA, lambda r, c: PullResponse(np.ones((1, 1), np.float32)))
    srv.start()
    cli = RpcClient({0: srv.address})
    pending = cli.call_async(0, Verb.PULL_DATA, PullRequest("a", np.array([0])))
    time.sleep(0.05)
    cli.call(0, Verb.SHUTDOWN, Empty(), timeout=5)
    assert pending.done() and pending.result().rows[0, 0] == 1
    assert srv.wait_stopped(5)
    cli.close()


def _run_members(address, vectors, barrier_first=True):
    out = [None] * len(vectors)
    errs = []

    def member(r):
        cli = RpcClient({0: address}, timeout=10)
        try:
            g = ProcessGroup(cli, 0, r, len(vectors))
            if barrier_first:
                g.barrier()
            out[r] = g.allreduce_mean(vectors[r])
        except Exception as exc:  # noqa: BLE001
            errs.append(exc)
        finally:
            cli.close()

    threads = [threading.Thread(target=member, args=(r,)) for r in range(len(vectors))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(20)
    return out, errs


def test_allreduce_arithmetic(echo_server):
    out, errs = _run_members(echo_server.address, [np.array([1, 3], np.float32), np.array([3, 5], np.float32)])
    assert not errs
    assert out[0].tolist() == [2, 4] and out[1].tolist() == [2, 4]


def test_allreduce_four_members_bitwise():
    rng = np.random.default_rng(0)
    vecs = [rng.standard_normal(1000).astype(np.float32) for _ in range(4)]
    srv = NodeServer()
    Coordinator(srv)
    srv.start()
    try:
        out, errs = _run_members(srv.address, vecs)
    finally:
        srv.stop()
    assert not errs
    acc = np.zeros(1000)
    for v in vecs:
        acc = acc + v.astype(np.float64)
    oracle = (acc / 4).astype(np.float32)
    for r in range(4):
        assert out[r].tobytes() == oracle.tobytes()


def test_single_member_barrier_and_identity(echo_server):
    cli = RpcClient({0: echo_server.address})
    g = ProcessGroup(cli, 0, 0, 1, name="solo")
    t0 = time.monotonic()
    g.barrier()
    assert time.monotonic() - t0 < 1.0
    v = np.array([0.1, -2.5], np.float32)
    assert g.allreduce_mean(v).tobytes() == v.tobytes()
    assert LocalGroup().allreduce_mean(v).tobytes() == v.tobytes()
    cli.close()


def test_member_disconnect_fails_collective(echo_server):
    errs = []
    survivor_cli = RpcClient({0: echo_server.address}, timeout=10)
    dying_cli = RpcClient({0: echo_server.address}, timeout=10)
    # the dying member joins round 0 then disconnects before round 1
    dying = ProcessGroup(dying_cli, 0, 1, 3, name="g")
    survivor = ProcessGroup(survivor_cli, 0, 0, 3, name="g")

    def run(g):
        try:
            g.barrier()
        except CollectiveError as exc:
            errs.append(exc)

    t1 = threading.Thread(target=run, args=(dying,))
    t2 = threading.Thread(target=run, args=(survivor,))
    t1.start()
    t2.start()
    time.sleep(0.2)
    dying_cli.close()
    t1.join(5)
    t2.join(5)
    assert len(errs) == 2
    assert any("disconnected" in str(e) for e in errs)
    survivor_cli.close()
