"""Incremental resident memory per live invocation, by deployment mode.

Run one mode per fresh process (``python3 -m mksv.density --mode shared``)
so allocator state left by another mode cannot leak into the numbers.
"""

from __future__ import annotations

import argparse
import gc
import json
import socket
import threading
import time

import psutil

from mksv.config import Settings
from mksv.control.plane import ControlPlane, InvocationRequest, Mode


def _rss() -> int:
    gc.collect()
    return psutil.Process().memory_info().rss


def _release(host: str, port: int) -> None:
    # the guest echoes until stdin reaches EOF; an empty session ends it
    try:
        with socket.create_connection((host, port), timeout=10) as s:
            s.shutdown(socket.SHUT_WR)
            while s.recv(4096):
                pass
    except OSError:
        pass


def _hold(plane: ControlPlane, mode: Mode, count: int, tenant: str, tag: str):
    """Start ``count`` invocations that stay alive until released."""
    ports: list[int] = []
    lock = threading.Lock()
    results = []

    def on_ready(port: int) -> None:
        with lock:
            ports.append(port)

    def run(i: int) -> None:
        t = tenant if mode is Mode.SHARED else f"{tenant}-{tag}-{i}"
        results.append(plane.invoke(InvocationRequest(t, "echo", mode), on_ready=on_ready))

    threads = [threading.Thread(target=run, args=(i,), daemon=True) for i in range(count)]
    for th in threads:
        th.start()
        # one at a time: overlapping boots would inflate transient allocations
        deadline = time.monotonic() + 30
        while len(plane.live_contexts) < len(ports) or len(ports) < threads.index(th) + 1:
            if time.monotonic() > deadline:
                raise TimeoutError("invocation did not come up")
            time.sleep(0.001)
    return threads, ports, results


def _finish(plane: ControlPlane, threads, ports, results) -> int:
    for port in ports:
        _release(plane.settings.host, port)
    for th in threads:
        th.join(30)
    return sum(1 for r in results if not r.ok)


def measure(mode: str, instances: int = 50, *, warmup: int = 5,
            settings: Settings | None = None) -> dict:
    """Resident-set growth per invocation with ``instances`` invocations alive at once.

    A warm-up batch of the same shape runs first so one-time costs (imports,
    the tenant's shared service, pool refills) are already paid.
    """
    m = Mode(mode)
    settings = settings or Settings(keep_alive_s=3600, template_pool=2, namespace_pool=8)
    plane = ControlPlane(settings)
    try:
        errors = _finish(plane, *_hold(plane, m, warmup, "density", "warm"))
        plane.templates.wait_idle(10)
        plane.namespaces.wait_idle(10)
        before = _rss()
        threads, ports, results = _hold(plane, m, instances, "density", "batch")
        time.sleep(0.05)
        after = _rss()
        errors += _finish(plane, threads, ports, results)
    finally:
        plane.shutdown()
    return {"mode": m.value, "instances": instances, "rss_before": before, "rss_after": after,
            "per_instance_bytes": (after - before) / instances, "errors": errors}


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m mksv.density")
    p.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    p.add_argument("--instances", type=int, default=50)
    args = p.parse_args(argv)
    print(json.dumps(measure(args.mode, args.instances)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
