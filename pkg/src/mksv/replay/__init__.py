"""Trace ingestion, in-flight analytics, open-loop replay and capacity projection."""

from mksv.replay.driver import (
    CapacityStub, DaemonTarget, PlaneTarget, ReplayConfig, ReplayReport, Sample,
    replay, schedule_digest, schedule_of, slo_spike,
)
from mksv.replay.peak import PeakResult, PeakRun, find_peak_rps, project_servers
from mksv.replay.stats import percentile, summarize
from mksv.replay.trace import (
    InflightCdf, TraceError, TraceRecord, decimate, dump_trace, inflight_cdf,
    inflight_counts, load_trace, poisson_trace, synthesize_trace, uniform_trace,
)

__all__ = [
    "CapacityStub", "DaemonTarget", "InflightCdf", "PeakResult", "PeakRun", "PlaneTarget",
    "ReplayConfig", "ReplayReport", "Sample", "TraceError", "TraceRecord", "decimate",
    "dump_trace", "find_peak_rps", "inflight_cdf", "inflight_counts", "load_trace",
    "percentile", "poisson_trace", "project_servers", "replay", "schedule_digest",
    "schedule_of", "slo_spike", "summarize", "synthesize_trace", "uniform_trace",
]
