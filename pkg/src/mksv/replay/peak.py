"""Peak-throughput search over downsampling factors and server-count projection."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction

from mksv.replay.driver import ReplayConfig, ReplayReport, Target, replay
from mksv.replay.trace import TraceRecord


@dataclass
class PeakRun:
    factor: int
    achieved_rps: float
    passed: bool
    reason: str | None


@dataclass
class PeakResult:
    peak_rps: float
    factor: int
    report: ReplayReport
    passed: bool                 # False when even the largest factor tripped
    budget_tripped: bool = False
    first_bad_factor: int | None = None
    step_rps: float | None = None  # rate gap between last-good and first-bad factor
    runs: list[PeakRun] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"peak_rps": self.peak_rps, "factor": self.factor, "passed": self.passed,
                "budget_tripped": self.budget_tripped,
                "first_bad_factor": self.first_bad_factor, "step_rps": self.step_rps,
                "runs": [dataclasses.asdict(r) for r in self.runs],
                "report": self.report.to_dict()}


def _trip_reason(rep: ReplayReport) -> str | None:
    if rep.memory_tripped:
        return "memory"
    if rep.slo_spike or rep.aborted:
        return "slo"
    return None


def default_start_factor(n: int, cap: int = 64) -> int:
    k = 1
    while k * 2 <= min(n, cap):
        k *= 2
    return k


def find_peak_rps(records: list[TraceRecord], config: ReplayConfig, target: Target, *,
                  start_factor: int | None = None) -> PeakResult:
    """Halve the downsampling factor until a run trips the SLO or the memory
    budget, then bisect between the last passing and first tripping factor
    down to adjacent integers. Returns the last passing run."""
    start = start_factor or default_start_factor(len(records))
    runs: list[PeakRun] = []
    reports: dict[int, ReplayReport] = {}

    def run(k: int) -> bool:
        rep = replay(records, dataclasses.replace(config, downsample_factor=k), target)
        reports[k] = rep
        reason = _trip_reason(rep)
        runs.append(PeakRun(k, rep.achieved_rps, reason is None, reason))
        return reason is None

    good = bad = None
    k = start
    while True:
        if run(k):
            good = k
            if k == 1:
                break
            k = max(1, k // 2)
        else:
            bad = k
            break

    if good is None:
        rep = reports[bad]
        return PeakResult(rep.achieved_rps, bad, rep, passed=False,
                          budget_tripped=rep.memory_tripped, first_bad_factor=bad, runs=runs)
    if bad is None:
        rep = reports[good]
        return PeakResult(rep.achieved_rps, good, rep, passed=True, runs=runs)

    lo, hi = bad, good  # lo trips, hi passes, lo < hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if run(mid):
            hi = mid
        else:
            lo = mid
    rep = reports[hi]
    step = reports[lo].achieved_rps - rep.achieved_rps if reports[lo].samples else None
    return PeakResult(rep.achieved_rps, hi, rep, passed=True,
                      budget_tripped=reports[lo].memory_tripped, first_bad_factor=lo,
                      step_rps=step, runs=runs)


def project_servers(trace_peak_rps: float, node_peak_rps: float) -> int:
    """Servers needed to carry the trace at the node's peak, assuming perfect balancing."""
    # decimal strings keep 4310 / 8.62 at exactly 500 instead of 500.00000000000006
    trace = Fraction(str(trace_peak_rps))
    node = Fraction(str(node_peak_rps))
    if node <= 0:
        raise ValueError("node_peak_rps must be positive")
    if trace < 0:
        raise ValueError("trace_peak_rps must be non-negative")
    return math.ceil(trace / node)
