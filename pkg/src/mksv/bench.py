"""Cold-start and round-trip benchmarks driven through a control plane."""

from __future__ import annotations

import math
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from mksv.control.plane import ControlPlane, InvocationRequest, InvocationResult, Mode
from mksv.replay.stats import summarize
from mksv.runtime.boot import PHASES

COLDSTART_MODES = ("full", "known-tenant", "standalone")
RTT_SWEEP = (32, 192, 4 * 1024, 64 * 1024, 1024 * 1024)
INVOKE_PHASES = ("service_acquire_ms", "uvm_boot_ms", "first_byte_ms", "completion_ms")


@dataclass
class ColdstartReport:
    mode: str
    function: str
    results: list[InvocationResult] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return sum(1 for r in self.results if not r.ok)

    def phase_samples(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {p: [] for p in INVOKE_PHASES}
        for name in PHASES:
            out[f"boot.{name}_ms"] = []
        out["boot.total_ms"] = []
        for r in self.results:
            out["service_acquire_ms"].append(r.service_acquire_ms)
            out["uvm_boot_ms"].append(r.uvm_boot_ms)
            if r.first_byte_ms is not None:
                out["first_byte_ms"].append(r.first_byte_ms)
            out["completion_ms"].append(r.completion_ms)
            if r.boot is not None:
                for name, us in r.boot.phases:
                    out[f"boot.{name}_ms"].append(us / 1e3)
                out["boot.total_ms"].append(r.boot.total_us / 1e3)
        return out

    def boot_phase_names(self) -> list[str]:
        names: list[str] = []
        for r in self.results:
            if r.boot is not None:
                names = r.boot.names()
                break
        return names

    def table(self) -> dict[str, dict]:
        return {k: summarize(v) for k, v in self.phase_samples().items() if v}

    def to_dict(self) -> dict:
        return {"mode": self.mode, "function": self.function,
                "iterations": len(self.results), "errors": self.errors,
                "boot_phases": self.boot_phase_names(),
                "services_created": sum(1 for r in self.results if r.service_created),
                "phases": self.table()}


def coldstart(plane: ControlPlane, mode: str, iterations: int, *, function: str = "echo",
              payload: bytes = b"x" * 32, tenant: str = "bench") -> ColdstartReport:
    """Run ``iterations`` cold invocations.

    ``full`` gives every invocation a tenant with no live service, so each
    one pays for service creation. ``known-tenant`` warms the tenant first
    and measures user-VM start only. ``standalone`` boots with no service.
    """
    if mode not in COLDSTART_MODES:
        raise ValueError(f"unknown coldstart mode {mode!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    report = ColdstartReport(mode, function)
    if mode == "known-tenant":
        warm = plane.invoke(InvocationRequest(tenant, function, Mode.SHARED, payload))
        if not warm.ok:
            report.results.append(warm)
            return report
    for i in range(iterations):
        if mode == "full":
            req = InvocationRequest(f"{tenant}-cold-{i}", function, Mode.SHARED, payload)
        elif mode == "known-tenant":
            req = InvocationRequest(tenant, function, Mode.SHARED, payload)
        else:
            req = InvocationRequest(tenant, function, Mode.STANDALONE, payload)
        report.results.append(plane.invoke(req))
        if mode == "full":
            plane.reap(math.inf)  # keep one live service at a time
    return report


# -- round trip -------------------------------------------------------------

def hex_diff(expected: bytes, got: bytes, context: int = 8) -> str:
    """First differing offset with a short hex window from both sides."""
    n = min(len(expected), len(got))
    at = next((i for i in range(n) if expected[i] != got[i]), n)
    lo, hi = max(0, at - context), at + context
    return (f"offset {at}: expected {expected[lo:hi].hex()} got {got[lo:hi].hex()} "
            f"(lengths {len(expected)} vs {len(got)})")


@dataclass
class RttResult:
    size: int
    samples_ms: list[float]
    path: str | None = None          # inline, bulk, or None when nothing completed
    bulk_per_message: float = 0.0
    error: str | None = None
    corruption: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.corruption is None

    def to_dict(self) -> dict:
        return {"size": self.size, "ok": self.ok, "path": self.path,
                "bulk_per_message": self.bulk_per_message, "error": self.error,
                "corruption": self.corruption, "latency_ms": summarize(self.samples_ms)}


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def rtt(plane: ControlPlane, size: int, iterations: int, *, tenant: str = "rtt",
        seed: int = 0, warmup: int = 1) -> RttResult:
    """Echo ``size``-byte length-prefixed messages through one warm user VM.

    The VM runs ``echo-framed`` on the tenant's shared service; each sample
    is the wall time from sending a message to receiving its last echoed byte.
    """
    payload = random.Random(seed * 1_000_003 + size).randbytes(size)
    frame = struct.pack("<I", size) + payload
    ready = threading.Event()
    port_box: list[int] = []
    result_box: list[InvocationResult] = []

    def on_ready(port: int) -> None:
        port_box.append(port)
        ready.set()

    def run() -> None:
        result_box.append(plane.invoke(InvocationRequest(tenant, "echo-framed", Mode.SHARED),
                                       on_ready=on_ready))
        ready.set()

    runner = threading.Thread(target=run, name="rtt-invoke", daemon=True)
    runner.start()
    ready.wait(plane.settings.invoke_timeout_s)
    out = RttResult(size, [])
    if not port_box:
        runner.join(5)
        out.error = result_box[0].error if result_box else "NoGateway"
        return out
    messages = 0
    try:
        with socket.create_connection((plane.settings.host, port_box[0]), timeout=30) as s:
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            for i in range(warmup + iterations):
                t0 = time.perf_counter()
                s.sendall(frame)
                echoed = _recv_exact(s, 4 + size)
                elapsed = (time.perf_counter() - t0) * 1e3
                if len(echoed) < 4 + size:
                    break
                messages += 1
                if echoed[4:] != payload:
                    out.corruption = hex_diff(payload, echoed[4:])
                    break
                if i >= warmup:
                    out.samples_ms.append(elapsed)
            s.shutdown(socket.SHUT_WR)
    except OSError as exc:
        out.error = f"ConnectionError: {exc}"
    runner.join(plane.settings.invoke_timeout_s)
    res = result_box[0] if result_box else None
    if res is not None and not res.ok:
        # the VM's own failure explains a dropped connection better than the socket does
        out.error = (res.error or f"exit {res.exit_status}").split(":")[0]
    elif len(out.samples_ms) < iterations and out.ok:
        out.error = "ShortEcho"
    if res is not None and messages:
        per = len(res.bulk_log) / messages
        out.bulk_per_message = per
        out.path = "bulk" if res.bulk_log else "inline"
    return out
