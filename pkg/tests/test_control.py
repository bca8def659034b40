import json
import math
import socket
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from mksv.config import Settings
from mksv.control.daemon import Daemon, call
from mksv.control.plane import ControlPlane, InvocationRequest, Mode, PlaneClosed
from mksv.control.pools import PoolEmpty, ResourcePool
from mksv.runtime.boot import ImageError


@pytest.fixture
def plane(tmp_path):
    p = ControlPlane(Settings(scratch_root=str(tmp_path / "plane"), keep_alive_s=30))
    yield p
    p.shutdown()


def req(tenant="t", function="echo", mode=Mode.SHARED, payload=b"hi"):
    return InvocationRequest(tenant, function, mode, payload)


# -- pools ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), max_size=60), st.integers(0, 6), st.integers(0, 6))
def test_pool_accounting(ops_seq, target, low):
    low = min(low, target)
    counter = iter(range(10**6))
    pool = ResourcePool("x", lambda: next(counter), target, low).prefill()
    held = []
    for take in ops_seq:
        if take or not held:
            held.append(pool.acquire())
        else:
            pool.release(held.pop())
    pool.wait_idle(5)
    assert pool.acquired - pool.released == len(held)
    assert len(set(held)) == len(held)  # never hands out one item twice
    assert pool.built == len(held) + len(pool)


def test_pool_without_refill_runs_dry():
    pool = ResourcePool("x", object, 1, 0, refill=False).prefill()
    pool.acquire()
    with pytest.raises(PoolEmpty):
        pool.acquire()


def test_pool_refills_below_low_water():
    pool = ResourcePool("x", object, 4, 2).prefill()
    pool.acquire()
    pool.acquire()
    assert pool.refills_started == 0
    pool.acquire()
    pool.wait_idle(5)
    assert pool.refills_started == 1 and len(pool) == 4


# -- deployment modes --------------------------------------------------------

def test_shared_reuses_one_service(plane):
    a, b = plane.invoke(req()), plane.invoke(req())
    assert a.ok and b.ok and a.output == b"hi" == b.output
    assert a.service_created and not b.service_created
    assert b.service_acquire_ms == 0.0
    assert plane.counters["services_created"] == 1


def test_one_to_one_builds_and_destroys_per_invocation(plane):
    for _ in range(3):
        r = plane.invoke(req(mode=Mode.ONE_TO_ONE))
        assert r.ok and r.service_created
    assert plane.counters["services_created"] == 3 == plane.counters["services_retired"]
    assert plane.tokens_held() == 0


def test_standalone_touches_no_service(plane):
    r = plane.invoke(req(mode=Mode.STANDALONE))
    assert r.ok and r.output == b"hi" and not r.service_created
    assert r.acquire_work["services_constructed"] == 0
    assert plane.counters["services_created"] == 0


def test_file_io_through_a_shared_service(plane):
    r = plane.invoke(req(function="io-heavy", payload=b""))
    assert r.ok, r.error
    assert r.output == b"ok\n" and len(r.bulk_log) >= 2


def test_concurrent_first_invocations_create_one_service(plane):
    results = []
    threads = [threading.Thread(target=lambda: results.append(plane.invoke(req("burst"))))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r.ok for r in results)
    assert sum(r.service_created for r in results) == 1


def test_tokens_conserved_across_modes_and_reaping(plane):
    for i in range(12):
        mode = [Mode.SHARED, Mode.ONE_TO_ONE, Mode.STANDALONE][i % 3]
        assert plane.invoke(req(f"t{i % 4}", mode=mode)).ok
    assert plane.tokens_held() == sum(1 for s in plane.slots.values() if s.live)
    plane.reap(math.inf)
    assert plane.tokens_held() == 0


# -- reaping ----------------------------------------------------------------

def test_reap_respects_deadline_and_live_uvms(plane):
    plane.invoke(req("r"))
    slot = plane.slots["r"]
    assert plane.reap(time.monotonic()) == 0  # keep-alive not expired
    plane.ensure_service("r", hold=True)
    assert plane.reap(math.inf) == 0  # a live user VM pins the service
    with slot.lock:
        slot.live_uvms -= 1
    assert plane.reap(math.inf) == 1
    assert not slot.live
    again = plane.invoke(req("r"))
    assert again.ok and again.service_created


def test_invoke_extends_keep_alive(tmp_path):
    p = ControlPlane(Settings(scratch_root=str(tmp_path / "p"), keep_alive_s=0.2))
    try:
        p.invoke(req("k"))
        first = p.slots["k"].deadline
        time.sleep(0.05)
        p.invoke(req("k"))
        assert p.slots["k"].deadline > first
        time.sleep(0.3)
        assert p.reap() == 1
    finally:
        p.shutdown()


# -- drain ------------------------------------------------------------------

def test_drain_terminates_stragglers_and_refuses_new_work(plane):
    box = []
    t = threading.Thread(target=lambda: box.append(plane.invoke(req(function="sleep-5000"))))
    t.start()
    while not plane.live_contexts:
        time.sleep(0.005)
    assert plane.drain(0.1) == 1
    t.join(10)
    assert not box[0].ok and box[0].error == "VmTerminated"
    with pytest.raises(PlaneClosed):
        plane.invoke(req())


def test_unknown_function_is_rejected_before_admission(plane):
    with pytest.raises(ImageError):
        plane.invoke(req(function="no-such"))
    assert plane.inflight == 0 and plane.counters["invocations"] == 0


# -- daemon -----------------------------------------------------------------

@pytest.fixture
def daemon(tmp_path):
    d = Daemon(Settings(port=0, scratch_root=str(tmp_path / "d"))).start()
    yield d
    d.request_shutdown()
    assert d.wait_stopped(20)


def test_daemon_inline_invoke_and_stats(daemon):
    [reply] = call(daemon.address, {"cmd": "invoke", "tenant": "a", "function": "echo",
                                    "payload": "ping"})
    assert reply["ok"] and reply["result"]["output"] == "ping"
    [stats] = call(daemon.address, {"cmd": "stats"})
    assert stats["stats"]["counters"]["invocations"] == 1
    [bad] = call(daemon.address, {"cmd": "nope"})
    assert not bad["ok"]
    [bad] = call(daemon.address, {"cmd": "invoke", "tenant": "a"})
    assert not bad["ok"] and "bad request" in bad["error"]
    [bad] = call(daemon.address, {"cmd": "invoke", "tenant": "a", "function": "no-such"})
    assert not bad["ok"] and bad["error"].startswith("ImageError")


def test_daemon_gateway_invoke(daemon):
    # the ready event arrives first; the client then talks to the gateway
    with socket.create_connection(daemon.address) as s:
        s.sendall(b'{"cmd": "invoke", "tenant": "g", "function": "echo"}\n')
        f = s.makefile("rb")
        ready = json.loads(f.readline())
        assert ready["event"] == "ready"
        with socket.create_connection(("127.0.0.1", ready["port"])) as g:
            g.sendall(b"over the gateway")
            g.shutdown(socket.SHUT_WR)
            got = b""
            while chunk := g.recv(100):
                got += chunk
        result = json.loads(f.readline())
    assert got == b"over the gateway" and result["ok"]
