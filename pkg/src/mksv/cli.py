"""Command-line entry point: the daemon, benchmarks and trace analytics."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import signal
import sys
from pathlib import Path

from mksv import bench
from mksv.config import Settings, load_settings
from mksv.errors import ConfigError, KernelError
from mksv.replay import (CapacityStub, DaemonTarget, PlaneTarget, ReplayConfig, TraceError,
                         find_peak_rps, inflight_cdf, load_trace, poisson_trace,
                         project_servers, replay)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
OUTPUTS = ("json", "csv", "human")


class UsageError(Exception):
    pass


# -- output -----------------------------------------------------------------

def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        rows = []
        for k, v in obj.items():
            rows += _flatten(v, f"{prefix}.{k}" if prefix else str(k))
        return rows
    if isinstance(obj, (list, tuple)) and obj and all(isinstance(x, dict) for x in obj):
        rows = []
        for i, v in enumerate(obj):
            rows += _flatten(v, f"{prefix}.{i}")
        return rows
    if isinstance(obj, (list, tuple)):
        return [(prefix, " ".join(str(x) for x in obj))]
    return [(prefix, obj)]


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def emit(doc: dict, fmt: str, out=None, *, table: str | None = None) -> None:
    """Write ``doc`` as JSON, as CSV (``table`` if given, else key,value rows) or as text."""
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(_jsonable(doc), sort_keys=True) + "\n")
    elif fmt == "csv":
        if table is not None:
            out.write(table)
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(_flatten(doc))
        out.write(buf.getvalue())
    else:
        for key, value in _flatten(doc):
            if isinstance(value, float):
                value = f"{value:.4f}"
            out.write(f"{key}: {value}\n")
    out.flush()


# -- config -----------------------------------------------------------------

def _settings_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_settings_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags > MKSV_* env > --config file > defaults)")
    g.add_argument("--config", metavar="PATH", help="key = value config file")
    g.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")
    g.add_argument("--output", choices=OUTPUTS, default="human")
    for f in dataclasses.fields(Settings):
        g.add_argument(_settings_flag(f.name), dest=f"cfg_{f.name}", metavar="V",
                       default=None)


def settings_from(args: argparse.Namespace) -> Settings:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_settings(args.config, overrides=overrides)


def _plane(settings: Settings):
    from mksv.control.plane import ControlPlane
    return ControlPlane(settings)


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"bad address {text!r}, expected HOST:PORT") from None


# -- commands ---------------------------------------------------------------

def cmd_serve(args, s: Settings) -> int:
    from mksv.control.daemon import Daemon
    try:
        daemon = Daemon(s)
    except OSError as exc:
        print(f"mksv: cannot bind {s.host}:{s.port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL

    def on_signal(signum, frame):
        daemon.request_shutdown()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    emit({"event": "serving", "endpoint": daemon.endpoint}, args.output)
    daemon.serve_forever()
    emit({"event": "stopped", "stats": daemon.plane.stats()}, args.output)
    return EXIT_OK


def _payload(args) -> bytes | None:
    if args.payload_hex is not None:
        try:
            return bytes.fromhex(args.payload_hex)
        except ValueError:
            raise UsageError("--payload-hex is not valid hex") from None
    if args.payload_file is not None:
        return Path(args.payload_file).read_bytes()
    if args.payload is not None:
        return args.payload.encode()
    return b""


def cmd_invoke(args, s: Settings) -> int:
    from mksv.control.daemon import call
    from mksv.control.plane import InvocationRequest
    payload = _payload(args)
    mode = args.mode or s.default_mode
    if args.daemon:
        replies = call(_address(args.daemon), {
            "cmd": "invoke", "tenant": args.tenant, "function": args.function, "mode": mode,
            "payload_hex": payload.hex(), "argv": args.argv})
        final = replies[-1]
        doc = final.get("result") or {"ok": False, "error": final.get("error")}
        doc["ok"] = bool(final.get("ok"))
    else:
        plane = _plane(s)
        try:
            result = plane.invoke(InvocationRequest(args.tenant, args.function, mode, payload,
                                                    tuple(args.argv)))
        finally:
            plane.shutdown()
        doc = result.to_dict()
        doc["ok"] = result.ok
    emit(doc, args.output)
    return EXIT_OK if doc["ok"] else EXIT_FAIL


def cmd_coldstart(args, s: Settings) -> int:
    plane = _plane(s)
    try:
        report = bench.coldstart(plane, args.mode, args.iterations, function=args.function)
    finally:
        plane.shutdown()
    doc = report.to_dict()
    rows = ["phase,n,p50_ms,p99_ms"] + [f"{k},{v['n']},{v['p50']:.6f},{v['p99']:.6f}"
                                        for k, v in doc["phases"].items()]
    emit(doc, args.output, table="\n".join(rows) + "\n")
    return EXIT_OK if report.errors == 0 else EXIT_FAIL


def cmd_rtt(args, s: Settings) -> int:
    sizes = list(bench.RTT_SWEEP) if args.sweep else (args.size or [32])
    plane = _plane(s)
    try:
        results = [bench.rtt(plane, n, args.iterations, seed=s.seed) for n in sizes]
    finally:
        plane.shutdown()
    doc = {"strict_page_mode": s.strict_page_mode, "iterations": args.iterations,
           "results": [r.to_dict() for r in results]}
    rows = ["size,ok,path,p50_ms,p99_ms,error"]
    for r in results:
        lat = r.to_dict()["latency_ms"]
        p50 = "" if lat["p50"] is None else f"{lat['p50']:.6f}"
        p99 = "" if lat["p99"] is None else f"{lat['p99']:.6f}"
        rows.append(f"{r.size},{r.ok},{r.path or ''},{p50},{p99},"
                    f"{r.error or r.corruption or ''}")
    emit(doc, args.output, table="\n".join(rows) + "\n")
    for r in results:
        if r.corruption:
            print(f"mksv: corruption at {r.size} B: {r.corruption}", file=sys.stderr)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def _records(args, s: Settings):
    if args.synthetic is not None:
        return poisson_trace(args.synthetic, args.tenants, args.rate, seed=s.seed)
    if args.trace is None:
        raise UsageError("a trace path or --synthetic N is required")
    return load_trace(args.trace)


def cmd_analyze(args, s: Settings) -> int:
    cdf = inflight_cdf(_records(args, s), s.service_time_ms)
    doc = {"records": len(cdf.counts), "p0": cdf.p0, "p_inflight": cdf.p_busy,
           "cdf": [{"k": k, "p_le_k": p} for k, p in cdf.cdf]}
    emit(doc, args.output, table=cdf.to_csv())
    return EXIT_OK


def _target(args, s: Settings):
    if args.target == "stub":
        if args.capacity_rps is None:
            raise UsageError("--target stub needs --capacity-rps")
        return CapacityStub(args.capacity_rps), None
    if args.target == "daemon":
        if not args.daemon:
            raise UsageError("--target daemon needs --daemon HOST:PORT")
        return DaemonTarget(_address(args.daemon), mode=s.default_mode), None
    plane = _plane(s)
    return PlaneTarget(plane, mode=s.default_mode), plane


def cmd_replay(args, s: Settings) -> int:
    records = _records(args, s)
    config = ReplayConfig(downsample_factor=s.downsample, max_inflight=s.max_inflight,
                          slo_ms=s.slo_ms, memory_budget_bytes=s.memory_budget_mib * 2**20,
                          duration_cap_s=s.duration_cap_s, slo_window_s=s.slo_window_s,
                          stop_on_trip=args.find_peak)
    target, plane = _target(args, s)
    try:
        if args.find_peak:
            peak = find_peak_rps(records, config, target, start_factor=args.start_factor)
            report = peak.report
            doc = peak.to_dict()
            if args.trace_peak_rps is not None:
                doc["trace_peak_rps"] = args.trace_peak_rps
                doc["servers"] = (project_servers(args.trace_peak_rps, peak.peak_rps)
                                  if peak.peak_rps > 0 else None)
        else:
            report = replay(records, config, target)
            doc = report.to_dict()
    finally:
        if plane is not None:
            plane.shutdown()
    if args.samples_csv:
        Path(args.samples_csv).write_text(report.samples_csv())
    emit(doc, args.output, table=report.samples_csv())
    return EXIT_OK


def cmd_frames_dump(args, s: Settings) -> int:
    from mksv.ikc.frames import decode_frame, dump_line
    if args.decode:
        raws = []
        for text in args.decode:
            try:
                raws.append(("in", bytes.fromhex(text)))
            except ValueError:
                raise UsageError(f"not hex: {text!r}") from None
        status = EXIT_OK
    else:
        from mksv.runtime.boot import BootOptions, boot
        raws = []
        payload = _payload(args)
        from mksv.runtime.boot import BufferBridge
        ctx, _ = boot(args.function, "standalone", bridge=BufferBridge(payload),
                      options=BootOptions(strict_page_mode=s.strict_page_mode,
                                          memory_bytes=s.memory_mib * 2**20,
                                          run_timeout=s.invoke_timeout_s),
                      dump=lambda direction, raw: raws.append((direction, bytes(raw))))
        status = EXIT_OK if ctx.exit_status == 0 and ctx.error is None else EXIT_FAIL
        ctx.close()
    if args.output == "human":
        for direction, raw in raws:
            sys.stdout.write(f"{direction}\t{dump_line(raw)}\n")
        return status
    frames = []
    for direction, raw in raws:
        try:
            decoded = decode_frame(raw).to_json()
        except KernelError as exc:
            decoded = {"error": type(exc).__name__, "detail": str(exc)}
        frames.append({"direction": direction, "hex": raw.hex(), "frame": decoded})
    rows = ["direction,hex"] + [f"{f['direction']},{f['hex']}" for f in frames]
    emit({"frames": frames, "count": len(frames)}, args.output, table="\n".join(rows) + "\n")
    return status


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mksv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _add_settings_flags(p)
        p.set_defaults(func=func)
        return p

    add("serve", cmd_serve, "run the control-plane daemon until SIGTERM")

    def payload_flags(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--payload", help="stdin for the guest, as text")
        g.add_argument("--payload-hex")
        g.add_argument("--payload-file")

    p = add("invoke", cmd_invoke, "run one invocation")
    p.add_argument("--tenant", default="default")
    p.add_argument("--function", default="echo")
    p.add_argument("--mode", choices=("shared", "one-to-one", "standalone"))
    p.add_argument("--daemon", metavar="HOST:PORT", help="send to a running daemon")
    p.add_argument("--argv", nargs="*", default=[])
    payload_flags(p)

    p = add("coldstart", cmd_coldstart, "cold-start latency per phase")
    p.add_argument("--mode", choices=bench.COLDSTART_MODES, default="known-tenant")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--function", default="echo")

    p = add("rtt", cmd_rtt, "echo round-trip latency through the gateway")
    p.add_argument("--size", type=int, action="append", help="payload bytes (repeatable)")
    p.add_argument("--sweep", action="store_true",
                   help="sizes 32 B, 192 B, 4 KiB, 64 KiB and 1 MiB")
    p.add_argument("--iterations", type=int, default=100)

    def trace_flags(p):
        p.add_argument("trace", nargs="?", help="CSV: arrival_ms,tenant_id,function_id[,service_time_ms]")
        p.add_argument("--synthetic", type=int, metavar="N",
                       help="use N seeded Poisson arrivals instead of a file")
        p.add_argument("--tenants", type=int, default=4)
        p.add_argument("--rate", type=float, default=5.0, help="per-tenant arrival rate (rps)")

    p = add("replay", cmd_replay, "open-loop trace replay and peak search")
    trace_flags(p)
    p.add_argument("--target", choices=("plane", "stub", "daemon"), default="plane")
    p.add_argument("--capacity-rps", type=float, help="capacity of the stub target")
    p.add_argument("--daemon", metavar="HOST:PORT")
    p.add_argument("--find-peak", action="store_true")
    p.add_argument("--start-factor", type=int)
    p.add_argument("--trace-peak-rps", type=float,
                   help="with --find-peak: project servers for this load")
    p.add_argument("--samples-csv", metavar="PATH")

    p = add("analyze", cmd_analyze, "same-tenant in-flight CDF of a trace")
    trace_flags(p)

    p = add("frames-dump", cmd_frames_dump, "print the frames of one standalone run")
    p.add_argument("--function", default="hello")
    p.add_argument("--decode", nargs="+", metavar="HEX", help="decode frames instead")
    payload_flags(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = settings_from(args)
        if args.print_config:
            emit(settings.to_dict(), args.output)
            return EXIT_OK
        for name in ("iterations", "synthetic", "tenants", "start_factor"):
            value = getattr(args, name, None)
            if value is not None and value < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
        return args.func(args, settings)
    except (ConfigError, UsageError) as exc:
        print(f"mksv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceError, KernelError, OSError, ValueError) as exc:
        print(f"mksv: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
