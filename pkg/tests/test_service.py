import json
import os
import socket
import struct
import threading
import time
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from mksv import ops
from mksv.errors import ErrorCode
from mksv.ikc.channel import TO_GUEST, Channel
from mksv.ikc.frames import CallId, FrameKind, IkcFrame
from mksv.service.admin import AdminServer
from mksv.service.backend import resolve
from mksv.service.filter import FilterPolicy, Verdict, apply_filter
from mksv.service.gateway import Gateway
from mksv.service.service import RegistrationError, TenantService

from conftest import run_attached


# -- filter -----------------------------------------------------------------

def test_deny_all_and_allow_all():
    for cid in (CallId.SEND, CallId.RECV, CallId.PUSH, CallId.PULL):
        assert apply_filter(FilterPolicy.deny_all(), cid) is Verdict.DENY
        assert apply_filter(FilterPolicy.allow_all(), cid) is Verdict.ALLOW


def test_op_override_beats_call_verdict():
    p = FilterPolicy.from_dict({"default": "deny", "calls": {"send": "allow"},
                                "ops": {"open": "deny"}})
    assert apply_filter(p, CallId.SEND, ops.Request(ops.Op.WRITE, fd=1)) is Verdict.ALLOW
    assert apply_filter(p, CallId.SEND, ops.Request(ops.Op.OPEN, path="/x")) is Verdict.DENY
    assert apply_filter(p, CallId.PUSH) is Verdict.DENY


@pytest.mark.parametrize("path, ok", [
    ("/tenant/a", True), ("tenant/a/b", True), ("/tenant", True),
    ("/tenant/../etc/passwd", False), ("/tenantx/a", False), ("/etc", False),
    ("/tenant/./../tenant/z", True),
])
def test_path_prefixes(path, ok):
    p = FilterPolicy(path_prefixes=("/tenant",))
    got = apply_filter(p, CallId.SEND, ops.Request(ops.Op.OPEN, path=path))
    assert (got is Verdict.ALLOW) == ok


def test_policy_dict_roundtrip():
    p = FilterPolicy.from_dict({"default": "deny", "calls": {"pull": "allow"},
                                "ops": {"connect": "deny"}, "path_prefixes": ["/a"]})
    assert FilterPolicy.from_dict(p.to_dict()) == p


@given(st.text(alphabet=st.sampled_from("ab./"), max_size=30))
def test_resolve_never_escapes_root(path):
    root = Path("/srv/root")
    target = resolve(root, path)
    assert target == root or root in target.parents


# -- identity and registration ---------------------------------------------

def test_fresh_instances_share_a_fingerprint():
    a, b = TenantService(backend="echo"), TenantService(backend="echo")
    assert a.fingerprint() == b.fingerprint()
    a.overlay("t1")
    assert a.fingerprint() != b.fingerprint()
    a.shutdown()


def test_overlay_once_and_registration_rules(tmp_path):
    svc = TenantService(backend="echo")
    with pytest.raises(RegistrationError):
        svc.register_uvm(1, Channel())  # no overlay yet
    svc.overlay("t", tmp_path)
    with pytest.raises(RegistrationError):
        svc.overlay("u")
    svc.register_uvm(1, Channel())
    with pytest.raises(RegistrationError):
        svc.register_uvm(1, Channel())
    svc.unregister_uvm(1)
    with pytest.raises(RegistrationError):
        svc.register_uvm(1, Channel())  # ids are never reused
    svc.shutdown()
    with pytest.raises(RegistrationError):
        svc.register_uvm(2, Channel())


def test_group_hook_sees_each_worker(tmp_path):
    seen = []
    svc = TenantService(backend="echo", group_hook=lambda g, tid: seen.append((g, tid)))
    svc.overlay("t", tmp_path)

    def prog(sys, _):
        sys.kcall(CallId.SEND, b"a")
        return 0 if sys.kcall(CallId.RECV, 8) == b"a" else 1

    ctx, _ = run_attached(svc, prog)
    ctx.close()
    svc.shutdown()
    assert ctx.exit_status == 0 and len(seen) == 1 and seen[0][0] == "default"


def test_non_remote_call_gets_unknown_call_status(echo_service):
    ch = Channel()
    echo_service.register_uvm(77, ch)
    resp = echo_service.dispatch(IkcFrame(FrameKind.CALL_REQUEST, 77, 0, CallId.GETPID, 1))
    assert resp.status == ErrorCode.UNKNOWN_CALL
    assert ch.count(TO_GUEST, FrameKind.CALL_RESPONSE) == 1
    gone = echo_service.dispatch(IkcFrame(FrameKind.CALL_REQUEST, 78, 0, CallId.SEND, 1))
    assert gone.status == ErrorCode.VM_TERMINATED


# -- workers ----------------------------------------------------------------

def _chatty_threads(sys, n):
    def worker(s, k):
        for i in range(20):
            s.kcall(CallId.SEND, bytes([k, i]))
            if s.kcall(CallId.RECV, 2) != bytes([k, i]):
                return 1
        return 0

    tids = [sys.posix.pthread_create(worker, k) for k in range(n)]
    return sum(sys.posix.pthread_join(t) for t in tids)


def test_worker_cap_backlog_drains_as_threads_retire(tmp_path):
    svc = TenantService(backend="echo", worker_cap=1).overlay("t", tmp_path)
    ctx, _ = run_attached(svc, _chatty_threads, 4, timeout=60)
    ctx.close()
    created = svc.workers_created
    svc.shutdown()
    assert ctx.exit_status == 0, ctx.error
    assert created == 4  # one at a time, each retired when its thread exits


def test_each_thread_keeps_one_worker(tmp_path):
    svc = TenantService(backend="echo", trace=True).overlay("t", tmp_path)
    ctx, _ = run_attached(svc, _chatty_threads, 6, timeout=60)
    ctx.close()
    svc.shutdown()
    assert ctx.exit_status == 0
    by_tid = {}
    for _, tid, seq, worker in svc.trace:
        by_tid.setdefault(tid, set()).add(worker)
    assert len(by_tid) == 6 and all(len(w) == 1 for w in by_tid.values())
    assert len({w for ws in by_tid.values() for w in ws}) == 6


# -- host backend -----------------------------------------------------------

def _escape_attempt(sys, _):
    px = sys.posix
    buf = sys.alloc(64)
    sys.store(buf, b"pwned")
    fd = px.open("/../../outside.txt", ops.O_WRONLY | ops.O_CREAT)
    px.write(fd, buf, 5)
    px.close(fd)
    return 0


def test_traversal_is_clamped_to_the_handle_root(host_service, tmp_path):
    ctx, handle = run_attached(host_service, _escape_attempt)
    ctx.close()
    assert ctx.exit_status == 0, ctx.error
    assert (handle.root / "outside.txt").read_bytes() == b"pwned"
    assert not (tmp_path / "outside.txt").exists()


def test_filter_denial_reaches_the_guest(tmp_path):
    svc = TenantService(FilterPolicy(path_prefixes=("/tenant",))).overlay("t", tmp_path)
    ctx, _ = run_attached(svc, lambda sys, a: sys.posix.open("/etc/passwd"))
    ctx.close()
    denied, calls = svc.denied, svc.backend_calls
    svc.shutdown()
    assert ctx.error == "FilterDenied" and denied == 1 and calls == 0


def test_unregister_releases_leaked_fds(host_service):
    def leaky(sys, _):
        for i in range(5):
            sys.posix.open(f"/tenant/f{i}", ops.O_WRONLY | ops.O_CREAT)
        return 0

    before = len(os.listdir("/proc/self/fd"))
    ctx, handle = run_attached(host_service, leaky, unregister=False)
    assert len(handle.fd_table) == 5
    host_service.unregister_uvm(ctx.uvm_id)
    ctx.close()
    assert handle.fd_table == {}
    assert len(os.listdir("/proc/self/fd")) <= before


def test_socket_connect_send_recv(host_service):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]

    def peer():
        conn, _ = srv.accept()
        with conn:
            conn.sendall(conn.recv(100).upper())

    threading.Thread(target=peer, daemon=True).start()

    def prog(sys, _):
        px = sys.posix
        buf = sys.alloc(64)
        sys.store(buf, b"ping")
        fd = px.socket()
        px.connect(fd, "127.0.0.1", port)
        px.write(fd, buf, 4)
        n = px.read_exact(fd, buf, 4)
        px.close(fd)
        return 0 if sys.load(buf, n) == b"PING" else 1

    ctx, _ = run_attached(host_service, prog)
    ctx.close()
    srv.close()
    assert ctx.exit_status == 0, ctx.error


# -- gateway ----------------------------------------------------------------

def test_gateway_buffers_until_connect_and_allows_one_client():
    gw = Gateway().start()
    gw.write(b"early ")
    a = socket.create_connection(("127.0.0.1", gw.port))
    gw.write(b"late")
    got = b""
    while len(got) < 10:
        got += a.recv(100)
    assert got == b"early late"
    b = socket.create_connection(("127.0.0.1", gw.port))
    b.settimeout(2)
    assert b.recv(10) == b""  # refused: closed straight away
    deadline = time.monotonic() + 2
    while gw.refused == 0 and time.monotonic() < deadline:
        time.sleep(0.01)
    assert gw.refused == 1
    a.sendall(b"in")
    assert gw.read(10) == b"in"
    a.shutdown(socket.SHUT_WR)
    assert gw.read(10) == b""
    gw.write(b"after-eof")  # output still flows after the client half-closes
    assert a.recv(100) == b"after-eof"
    gw.close()
    a.close()
    b.close()


# -- admin endpoint ---------------------------------------------------------

def test_admin_register_stats_shutdown(tmp_path):
    svc = TenantService(backend="echo").overlay("t", tmp_path)
    admin = AdminServer(svc).start()
    with socket.create_connection(admin.address) as s:
        f = s.makefile("rwb")

        def ask(cmd):
            f.write(json.dumps(cmd).encode() + b"\n")
            f.flush()
            return json.loads(f.readline())

        reg = ask({"cmd": "register", "uvm_id": 5, "group": "g"})
        assert reg["ok"] and reg["port"] > 0
        assert ask({"cmd": "stats"})["stats"]["live_uvms"] == 1
        assert not ask({"cmd": "bogus"})["ok"]
        assert not ask({"cmd": "register", "uvm_id": 5})["ok"]
        assert ask({"cmd": "shutdown"})["ok"]
    deadline = time.monotonic() + 5
    while not svc.closed and time.monotonic() < deadline:
        time.sleep(0.01)
    assert svc.closed
