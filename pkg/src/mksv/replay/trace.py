"""Invocation traces: CSV I/O, decimation, synthesis, same-tenant in-flight analytics."""

from __future__ import annotations

import bisect
import collections
import csv
import io
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

REQUIRED = ("arrival_ms", "tenant_id", "function_id")
OPTIONAL = ("service_time_ms",)
DEFAULT_SERVICE_MS = 100.0


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: float
    tenant_id: str
    function_id: str
    service_time_ms: float | None = None


def _parse_rows(f: TextIO, name: str) -> list[TraceRecord]:
    reader = csv.reader(f)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TraceError(f"{name}: empty trace") from None
    if tuple(header[:3]) != REQUIRED or header[3:] not in ([], list(OPTIONAL)):
        raise TraceError(f"{name}:1: header must be {','.join(REQUIRED)}[,service_time_ms]")
    has_service = len(header) == 4
    records, problems = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            problems.append(f"{name}:{line}: expected {len(header)} fields, got {len(row)}")
            continue
        arrival, tenant, function = (c.strip() for c in row[:3])
        try:
            arrival_ms = float(arrival)
        except ValueError:
            problems.append(f"{name}:{line}: arrival_ms {arrival!r} is not a number")
            continue
        if arrival_ms < 0:
            problems.append(f"{name}:{line}: arrival_ms is negative")
            continue
        if not tenant:
            problems.append(f"{name}:{line}: empty tenant_id")
            continue
        if not function:
            problems.append(f"{name}:{line}: empty function_id")
            continue
        service = None
        if has_service and row[3].strip():
            try:
                service = float(row[3])
            except ValueError:
                problems.append(f"{name}:{line}: service_time_ms {row[3]!r} is not a number")
                continue
            if service < 0:
                problems.append(f"{name}:{line}: service_time_ms is negative")
                continue
        records.append(TraceRecord(arrival_ms, tenant, function, service))
    if problems:
        raise TraceError("; ".join(problems))
    if not records:
        raise TraceError(f"{name}: empty trace")
    # sorted() is stable, so ties keep file order
    return sorted(records, key=lambda r: r.arrival_ms)


def load_trace(source: str | Path | TextIO) -> list[TraceRecord]:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as f:
            return _parse_rows(f, str(source))
    return _parse_rows(source, getattr(source, "name", "<trace>"))


def dump_trace(records: Iterable[TraceRecord], dest: str | Path | TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REQUIRED + OPTIONAL)
    for r in records:
        w.writerow([repr(r.arrival_ms), r.tenant_id, r.function_id,
                    "" if r.service_time_ms is None else repr(r.service_time_ms)])
    text = buf.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    elif dest is not None:
        dest.write(text)
    return text


def decimate(records: list[TraceRecord], factor: int) -> list[TraceRecord]:
    """Keep every ``factor``-th record, starting with the first."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    return records[::factor]


def uniform_trace(rate_rps: float, span_s: float, tenants: int = 1,
                  function_id: str = "echo") -> list[TraceRecord]:
    """Evenly spaced arrivals at ``rate_rps``, tenants assigned round-robin."""
    n = max(1, int(round(rate_rps * span_s)))
    step = 1000.0 / rate_rps
    return [TraceRecord(i * step, f"t{i % tenants}", function_id) for i in range(n)]


def synthesize_trace(n: int, p_overlap: float, *, tenants: int = 1,
                     service_time_ms: float = DEFAULT_SERVICE_MS,
                     seed: int = 0) -> list[TraceRecord]:
    """Trace where exactly round(p_overlap * n) arrivals find a same-tenant request in flight.

    Overlapping arrivals land inside the previous request's service time;
    the others land after every earlier request of the tenant has finished.
    """
    if not 0.0 <= p_overlap <= 1.0:
        raise ValueError("p_overlap must be in [0, 1]")
    rng = random.Random(seed)
    owners = [i % tenants for i in range(n)]
    firsts = set(range(min(n, tenants)))  # a tenant's first arrival cannot overlap
    candidates = [i for i in range(n) if i not in firsts]
    k = min(len(candidates), int(round(p_overlap * n)))
    overlapping = set(rng.sample(candidates, k))
    last_arrival: dict[int, float] = {}
    last_end: dict[int, float] = {}
    out = []
    s = service_time_ms
    for i, t in enumerate(owners):
        if t not in last_arrival:
            arrival = rng.uniform(0, s)
        elif i in overlapping:
            arrival = last_arrival[t] + rng.uniform(0.05, 0.5) * s
        else:
            arrival = last_end[t] + rng.uniform(0.05, 1.0) * s
        last_arrival[t] = arrival
        last_end[t] = max(last_end.get(t, 0.0), arrival + s)
        out.append(TraceRecord(arrival, f"tenant-{t}", "echo", s))
    return sorted(out, key=lambda r: r.arrival_ms)


def poisson_trace(n: int, tenants: int, rate_per_tenant_rps: float, *, seed: int = 0,
                  service_time_ms: float | None = None) -> list[TraceRecord]:
    rng = random.Random(seed)
    out = []
    per = [n // tenants + (1 if i < n % tenants else 0) for i in range(tenants)]
    for t, count in enumerate(per):
        clock = 0.0
        for _ in range(count):
            clock += rng.expovariate(rate_per_tenant_rps) * 1000.0
            st = service_time_ms if service_time_ms is not None else rng.uniform(10, 300)
            out.append(TraceRecord(clock, f"tenant-{t}", "echo", st))
    return sorted(out, key=lambda r: r.arrival_ms)


@dataclass
class InflightCdf:
    counts: list[int]          # per record, in trace order
    cdf: list[tuple[int, float]]  # (k, P(count <= k))

    @property
    def p0(self) -> float:
        return self.cdf[0][1] if self.cdf else 1.0

    @property
    def p_busy(self) -> float:
        return 1.0 - self.p0

    def to_csv(self) -> str:
        lines = ["k,p_le_k"] + [f"{k},{p:.6f}" for k, p in self.cdf]
        return "\n".join(lines) + "\n"


def _service(r: TraceRecord, default: float) -> float:
    return default if r.service_time_ms is None else r.service_time_ms


def inflight_counts(records: list[TraceRecord],
                    default_service_ms: float = DEFAULT_SERVICE_MS) -> list[int]:
    """Same-tenant requests in flight at each arrival, the arriving one excluded.

    Request j is in flight at t when arrival_j <= t < arrival_j + service_j.
    """
    starts: dict[str, list[float]] = collections.defaultdict(list)
    ends: dict[str, list[float]] = collections.defaultdict(list)
    for r in records:
        starts[r.tenant_id].append(r.arrival_ms)
        ends[r.tenant_id].append(r.arrival_ms + _service(r, default_service_ms))
    for v in starts.values():
        v.sort()
    for v in ends.values():
        v.sort()
    counts = []
    for r in records:
        t = r.arrival_ms
        begun = bisect.bisect_right(starts[r.tenant_id], t)
        finished = bisect.bisect_right(ends[r.tenant_id], t)
        own_live = r.arrival_ms + _service(r, default_service_ms) > t
        counts.append(begun - finished - (1 if own_live else 0))
    return counts


def inflight_cdf(records: list[TraceRecord],
                 default_service_ms: float = DEFAULT_SERVICE_MS) -> InflightCdf:
    counts = inflight_counts(records, default_service_ms)
    if not counts:
        return InflightCdf([], [])
    hist = collections.Counter(counts)
    n = len(counts)
    cdf, acc = [], 0
    for k in range(max(hist) + 1):
        acc += hist.get(k, 0)
        cdf.append((k, acc / n))
    return InflightCdf(counts, cdf)
