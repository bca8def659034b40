"""Open-loop trace replay with a bounded number of in-flight requests."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import psutil

from mksv.replay.stats import percentile
from mksv.replay.trace import TraceRecord, decimate

MEMORY_SAMPLE_INTERVAL_S = 0.1
PRESTART_WORKERS = 8


@dataclass(frozen=True)
class ReplayConfig:
    downsample_factor: int = 1
    max_inflight: int = 64
    slo_ms: float = math.inf
    memory_budget_bytes: float = math.inf
    duration_cap_s: float = math.inf
    slo_window_s: float = 5.0
    stop_on_trip: bool = False

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        if not self.slo_window_s > 0:
            raise ValueError("slo_window_s must be positive")


class Target(Protocol):
    """Executes one request synchronously; returns None on success or an error name."""

    def __call__(self, record: TraceRecord) -> str | None: ...


@dataclass
class Sample:
    request_id: int
    tenant_id: str
    scheduled_s: float
    issue_s: float
    latency_ms: float
    status: str


@dataclass
class ReplayReport:
    factor: int
    samples: list[Sample]
    saturation_events: int
    memory_samples: list[tuple[float, int]]
    inflight_series: list[tuple[float, int]]
    duration_s: float
    slo_ms: float
    slo_window_s: float
    memory_budget_bytes: float
    aborted: bool = False
    schedule_digest: str = ""

    @property
    def issued(self) -> int:
        return len(self.samples)

    @property
    def errors(self) -> int:
        return sum(1 for s in self.samples if s.status != "ok")

    @property
    def latencies_ms(self) -> list[float]:
        return [s.latency_ms for s in self.samples]

    @property
    def p50_ms(self) -> float | None:
        return percentile(self.latencies_ms, 50) if self.samples else None

    @property
    def p99_ms(self) -> float | None:
        return percentile(self.latencies_ms, 99) if self.samples else None

    @property
    def achieved_rps(self) -> float:
        ok = sorted(s.issue_s for s in self.samples if s.status == "ok")
        if len(ok) < 2 or ok[-1] <= ok[0]:
            return float(len(ok)) / self.duration_s if self.duration_s > 0 else 0.0
        return (len(ok) - 1) / (ok[-1] - ok[0])

    @property
    def peak_memory_bytes(self) -> int:
        return max((b for _, b in self.memory_samples), default=0)

    @property
    def issue_skew_ms(self) -> list[float]:
        return [(s.issue_s - s.scheduled_s) * 1e3 for s in self.samples]

    @property
    def max_inflight_seen(self) -> int:
        return max((n for _, n in self.inflight_series), default=0)

    def slo_windows(self) -> list[tuple[float, float]]:
        """(window start, p99 latency) for each window of issued requests."""
        buckets: dict[int, list[float]] = {}
        for s in self.samples:
            buckets.setdefault(int(s.issue_s // self.slo_window_s), []).append(s.latency_ms)
        return [(k * self.slo_window_s, percentile(v, 99)) for k, v in sorted(buckets.items())]

    @property
    def slo_spike(self) -> bool:
        return slo_spike(self.slo_windows(), self.slo_ms)

    @property
    def memory_tripped(self) -> bool:
        return self.peak_memory_bytes >= self.memory_budget_bytes

    @property
    def tripped(self) -> bool:
        return self.aborted or self.slo_spike or self.memory_tripped

    def to_dict(self, include_samples: bool = False) -> dict:
        skew = self.issue_skew_ms
        d = {
            "factor": self.factor,
            "issued": self.issued,
            "errors": self.errors,
            "p50_ms": self.p50_ms,
            "p99_ms": self.p99_ms,
            "achieved_rps": self.achieved_rps,
            "duration_s": self.duration_s,
            "saturation_events": self.saturation_events,
            "max_inflight_seen": self.max_inflight_seen,
            "peak_memory_bytes": self.peak_memory_bytes,
            "memory_budget_bytes": None if math.isinf(self.memory_budget_bytes)
            else self.memory_budget_bytes,
            "slo_ms": None if math.isinf(self.slo_ms) else self.slo_ms,
            "slo_spike": self.slo_spike,
            "memory_tripped": self.memory_tripped,
            "aborted": self.aborted,
            "issue_skew_p99_ms": percentile(skew, 99) if skew else None,
            "schedule_digest": self.schedule_digest,
        }
        if include_samples:
            d["samples"] = [s.__dict__ for s in self.samples]
        return d

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request_id", "tenant", "issue_ts", "latency_ms", "status"])
        for s in self.samples:
            w.writerow([s.request_id, s.tenant_id, f"{s.issue_s:.6f}", f"{s.latency_ms:.3f}",
                        s.status])
        return buf.getvalue()


def slo_spike(windows: list[tuple[float, float]], slo_ms: float, consecutive: int = 2) -> bool:
    run = 0
    for _, p99 in windows:
        run = run + 1 if p99 > slo_ms else 0
        if run >= consecutive:
            return True
    return False


def schedule_of(records: list[TraceRecord], factor: int,
                duration_cap_s: float = math.inf) -> list[tuple[int, TraceRecord]]:
    kept = decimate(records, factor)
    if not kept:
        return []
    base = kept[0].arrival_ms
    return [(i, r) for i, r in enumerate(kept)
            if (r.arrival_ms - base) / 1000.0 <= duration_cap_s]


def schedule_digest(schedule: list[tuple[int, TraceRecord]]) -> str:
    h = hashlib.sha256()
    for i, r in schedule:
        h.update(f"{i},{r.tenant_id},{r.function_id},{r.arrival_ms!r}\n".encode())
    return h.hexdigest()


class _Sampler(threading.Thread):
    def __init__(self, t0: float, interval: float, inflight: Callable[[], int]):
        super().__init__(name="replay-sampler", daemon=True)
        self.proc = psutil.Process()
        self.baseline = self.proc.memory_info().rss
        self.t0 = t0
        self.interval = interval
        self.inflight = inflight
        self.memory: list[tuple[float, int]] = []
        self.series: list[tuple[float, int]] = []
        self.stop = threading.Event()

    def sample(self) -> None:
        now = time.perf_counter() - self.t0
        self.memory.append((now, max(0, self.proc.memory_info().rss - self.baseline)))
        self.series.append((now, self.inflight()))

    def run(self) -> None:
        while not self.stop.wait(self.interval):
            self.sample()


def replay(records: list[TraceRecord], config: ReplayConfig, target: Target) -> ReplayReport:
    """Issue the kept records at their trace offsets and measure each request.

    Issuance never waits on completions unless ``max_inflight`` requests are
    outstanding; each such wait counts as one saturation event.
    """
    schedule = schedule_of(records, config.downsample_factor, config.duration_cap_s)
    slots = threading.BoundedSemaphore(config.max_inflight)
    work: queue.Queue = queue.Queue()
    samples: list[Sample | None] = [None] * len(schedule)
    lock = threading.Lock()
    state = {"inflight": 0, "saturation": 0, "idle": 0}
    stop = threading.Event()
    completed_windows: dict[int, list[float]] = {}

    def inflight() -> int:
        return state["inflight"]

    # baseline RSS before any worker thread exists
    sampler = _Sampler(0.0, MEMORY_SAMPLE_INTERVAL_S, inflight)
    t0 = 0.0

    def worker():
        while True:
            with lock:
                state["idle"] += 1
            item = work.get()
            with lock:
                state["idle"] -= 1
            if item is None:
                return
            idx, rec, sched, issued = item
            try:
                status = target(rec) or "ok"
            except Exception as exc:  # a failing target must not kill the driver
                status = type(exc).__name__
            done = time.perf_counter()
            latency_ms = (done - (t0 + issued)) * 1e3
            samples[idx] = Sample(idx, rec.tenant_id, sched, issued, latency_ms, status)
            with lock:
                state["inflight"] -= 1
                completed_windows.setdefault(int(issued // config.slo_window_s),
                                             []).append(latency_ms)
                if config.stop_on_trip and _online_trip(completed_windows, config):
                    stop.set()
            slots.release()

    workers: list[threading.Thread] = []

    def spawn() -> None:
        w = threading.Thread(target=worker, daemon=True, name=f"replay-w{len(workers)}")
        workers.append(w)
        w.start()

    # a few workers up front, more only when concurrency actually rises; a
    # thousand idle threads cost real scheduling jitter on a small host
    for _ in range(min(config.max_inflight, PRESTART_WORKERS)):
        spawn()
    # the clock starts once every worker is up so thread start-up does not skew the schedule
    t0 = sampler.t0 = time.perf_counter()
    sampler.sample()
    sampler.start()

    base_ms = schedule[0][1].arrival_ms if schedule else 0.0
    issued_count = 0
    aborted = False
    for idx, rec in schedule:
        sched = (rec.arrival_ms - base_ms) / 1000.0
        delay = t0 + sched - time.perf_counter()
        if delay > 0:
            if stop.wait(delay):
                aborted = True
                break
        elif stop.is_set():
            aborted = True
            break
        if not slots.acquire(blocking=False):
            state["saturation"] += 1
            slots.acquire()
        if config.stop_on_trip and sampler.memory and \
                sampler.memory[-1][1] >= config.memory_budget_bytes:
            slots.release()
            aborted = True
            break
        with lock:
            state["inflight"] += 1
            grow = state["idle"] == 0 and len(workers) < config.max_inflight
        issued = time.perf_counter() - t0
        work.put((idx, rec, sched, issued))
        issued_count += 1
        # a new worker is started after the hand-off so its start-up is not on the issue path
        if grow:
            spawn()

    for _ in workers:
        work.put(None)
    for w in workers:
        w.join()
    sampler.stop.set()
    sampler.join()
    sampler.sample()
    duration = time.perf_counter() - t0
    return ReplayReport(
        factor=config.downsample_factor,
        samples=[s for s in samples[:issued_count] if s is not None],
        saturation_events=state["saturation"],
        memory_samples=sampler.memory,
        inflight_series=sampler.series,
        duration_s=duration,
        slo_ms=config.slo_ms,
        slo_window_s=config.slo_window_s,
        memory_budget_bytes=config.memory_budget_bytes,
        aborted=aborted,
        schedule_digest=schedule_digest(schedule),
    )


def _online_trip(windows: dict[int, list[float]], config: ReplayConfig) -> bool:
    if math.isinf(config.slo_ms):
        return False
    ordered = [(k * config.slo_window_s, percentile(v, 99)) for k, v in sorted(windows.items())]
    return slo_spike(ordered, config.slo_ms)


# -- targets ---------------------------------------------------------------

class CapacityStub:
    """Backend with a hard capacity of ``capacity_rps``: a deterministic single-server queue.

    Each request occupies the server for 1/capacity seconds; a request that
    finds the server busy waits for it. Above capacity the queue, and with it
    the latency, grows without bound.
    """

    def __init__(self, capacity_rps: float):
        if capacity_rps <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_rps = capacity_rps
        self.service_s = 1.0 / capacity_rps
        self._lock = threading.Lock()
        self._free_at = 0.0
        self.served = 0

    def __call__(self, record: TraceRecord) -> str | None:
        now = time.perf_counter()
        with self._lock:
            start = max(now, self._free_at)
            self._free_at = start + self.service_s
            finish = self._free_at
            self.served += 1
        delay = finish - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        return None


class PlaneTarget:
    """Runs each record as a cold user VM on a control plane (echo by default)."""

    def __init__(self, plane, *, function: str = "echo", mode: str = "shared",
                 payload: bytes = b"x" * 32, use_trace_function: bool = False):
        from mksv.control.plane import Mode
        self.plane = plane
        self.function = function
        self.mode = Mode(mode)
        self.payload = payload
        self.use_trace_function = use_trace_function

    def __call__(self, record: TraceRecord) -> str | None:
        from mksv.control.plane import InvocationRequest
        fn = record.function_id if self.use_trace_function else self.function
        result = self.plane.invoke(InvocationRequest(record.tenant_id, fn, self.mode,
                                                     self.payload))
        if not result.ok:
            return (result.error or f"exit {result.exit_status}").split(":")[0]
        if result.output != self.payload and fn.startswith("echo"):
            return "Corruption"
        return None


class DaemonTarget:
    """Sends each record to a running daemon over its JSON API."""

    def __init__(self, address: tuple[str, int], *, function: str = "echo",
                 mode: str = "shared", payload: bytes = b"x" * 32):
        self.address = address
        self.function = function
        self.mode = mode
        self.payload = payload

    def __call__(self, record: TraceRecord) -> str | None:
        from mksv.control.daemon import call
        replies = call(self.address, {"cmd": "invoke", "tenant": record.tenant_id,
                                      "function": self.function, "mode": self.mode,
                                      "payload_hex": self.payload.hex()})
        final = replies[-1]
        if not final.get("ok"):
            err = final.get("error") or (final.get("result") or {}).get("error") or "Failed"
            return str(err).split(":")[0]
        return None
