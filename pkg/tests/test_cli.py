import csv
import io
import json
import math
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest

from mksv.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from mksv.control.daemon import call

GOLDEN = Path(__file__).parent / "golden"
UPDATE = os.environ.get("UPDATE_GOLDEN") == "1"


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


# -- key schema ---------------------------------------------------------------

def schema(obj):
    """Key structure and scalar kinds of a JSON document; list items are merged."""
    if isinstance(obj, dict):
        return {k: schema(v) for k, v in obj.items()}
    if isinstance(obj, list):
        merged = None
        for item in obj:
            merged = _merge(merged, schema(item))
        return [] if merged is None else [merged]
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, (int, float)):
        return "number"
    return "string"


def _merge(a, b):
    if a is None or a == "null":
        return b
    if b == "null":
        return a
    if isinstance(a, dict) and isinstance(b, dict):
        return {k: _merge(a.get(k), b.get(k)) for k in a.keys() | b.keys()}
    if isinstance(a, list) and isinstance(b, list):
        return [_merge(a[0] if a else None, b[0] if b else None)] if a or b else []
    return a


def mismatches(got, want, path="$"):
    # null on either side stands for "absent value", so it matches any kind
    if got == "null" or want == "null":
        return []
    if isinstance(want, dict):
        if not isinstance(got, dict):
            return [f"{path}: expected object"]
        out = [f"{path}.{k}: missing" for k in want.keys() - got.keys()]
        out += [f"{path}.{k}: unexpected" for k in got.keys() - want.keys()]
        for k in want.keys() & got.keys():
            out += mismatches(got[k], want[k], f"{path}.{k}")
        return out
    if isinstance(want, list):
        if not isinstance(got, list):
            return [f"{path}: expected array"]
        if want and got:
            return mismatches(got[0], want[0], f"{path}[]")
        return []
    return [] if got == want else [f"{path}: {got} != {want}"]


def check_golden(name: str, doc: dict) -> None:
    path = GOLDEN / f"{name}.json"
    got = schema(doc)
    if UPDATE or not path.exists():
        assert UPDATE, f"golden file {path.name} is missing; rerun with UPDATE_GOLDEN=1"
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(got, indent=1, sort_keys=True) + "\n")
        return
    want = json.loads(path.read_text())
    assert mismatches(got, want) == []


STUB_REPLAY = ("replay", "--synthetic", "40", "--tenants", "2", "--rate", "20",
               "--target", "stub", "--capacity-rps", "1000")

GOLDEN_CASES = {
    "print-config": ("serve", "--print-config"),
    "invoke": ("invoke", "--payload", "hi"),
    "invoke-standalone": ("invoke", "--mode", "standalone", "--payload", "hi"),
    "coldstart": ("coldstart", "--mode", "standalone", "--iterations", "2"),
    "rtt": ("rtt", "--size", "32", "--size", "4096", "--iterations", "2"),
    "analyze": ("analyze", "--synthetic", "50"),
    "replay": STUB_REPLAY,
    "frames-dump": ("frames-dump",),
    "frames-dump-decode": ("frames-dump", "--decode",
                           "564e0101010000000000000070000000010000000000000004000000"
                           "0000000006000000"),
}


@pytest.mark.parametrize("name", sorted(GOLDEN_CASES))
def test_json_output_matches_golden_schema(capsys, name):
    rc, out, _ = run(capsys, *GOLDEN_CASES[name], "--output", "json")
    assert rc == EXIT_OK
    lines = out.splitlines()
    assert len(lines) == 1
    check_golden(name, json.loads(lines[0]))


@pytest.mark.parametrize("name", ["coldstart", "rtt", "analyze", "replay", "invoke"])
def test_csv_output_is_rectangular(capsys, name):
    rc, out, _ = run(capsys, *GOLDEN_CASES[name], "--output", "csv")
    assert rc == EXIT_OK
    rows = list(csv.reader(io.StringIO(out)))
    assert len(rows) >= 2
    assert len({len(r) for r in rows}) == 1


def test_human_output_is_key_value_lines(capsys):
    rc, out, _ = run(capsys, "analyze", "--synthetic", "20")
    assert rc == EXIT_OK
    assert all(": " in line for line in out.splitlines())
    assert any(line.startswith("p0: ") for line in out.splitlines())


def test_print_config_reflects_every_source(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "m.conf"
    cfg.write_text("slo_ms = 75\nseed = 1\nport = 1234\n")
    monkeypatch.setenv("MKSV_SEED", "2")
    monkeypatch.setenv("MKSV_PORT", "2345")
    rc, out, _ = run(capsys, "replay", "--config", str(cfg), "--port", "3456",
                     "--print-config", "--output", "json")
    assert rc == EXIT_OK
    doc = json.loads(out)
    assert (doc["slo_ms"], doc["seed"], doc["port"]) == (75.0, 2, 3456)


def test_analyze_two_record_overlap(capsys, tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("arrival_ms,tenant_id,function_id,service_time_ms\n"
                     "0,a,echo,100\n50,a,echo,100\n")
    rc, out, _ = run(capsys, "analyze", str(trace), "--output", "json")
    assert rc == EXIT_OK
    assert json.loads(out)["p0"] == 0.5


def test_replay_decimation(capsys, tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("arrival_ms,tenant_id,function_id\n"
                     + "".join(f"{i},t{i % 3},echo\n" for i in range(1000)))
    rc, out, _ = run(capsys, "replay", str(trace), "--downsample", "10", "--target", "stub",
                     "--capacity-rps", "100000", "--output", "json")
    assert rc == EXIT_OK
    assert json.loads(out)["issued"] == 100


def test_find_peak_projection_against_stub(capsys):
    rc, out, _ = run(capsys, "replay", "--synthetic", "60", "--tenants", "2", "--rate", "30",
                     "--target", "stub", "--capacity-rps", "20", "--find-peak",
                     "--start-factor", "4", "--trace-peak-rps", "100",
                     "--slo-ms", "200", "--slo-window-s", "0.5", "--output", "json")
    assert rc == EXIT_OK
    doc = json.loads(out)
    check_golden("replay-find-peak", doc)
    assert 0 < doc["peak_rps"] <= 20 * 1.1
    assert doc["servers"] == math.ceil(100 / doc["peak_rps"])


def test_rtt_strict_mode_surfaces_page_crossing(capsys):
    rc, out, _ = run(capsys, "rtt", "--size", "65536", "--iterations", "1",
                     "--strict-page-mode", "true", "--output", "json")
    assert rc == EXIT_FAIL
    (res,) = json.loads(out)["results"]
    assert "CrossesPageBoundary" in res["error"]


def test_coldstart_single_iteration_is_degenerate(capsys):
    rc, out, _ = run(capsys, "coldstart", "--mode", "standalone", "--iterations", "1",
                     "--output", "json")
    assert rc == EXIT_OK
    for stats in json.loads(out)["phases"].values():
        assert stats["n"] == 1 and stats["p50"] == stats["p99"]


# -- reproducibility ----------------------------------------------------------

def _digest(capsys, seed: str) -> str:
    rc, out, _ = run(capsys, *STUB_REPLAY, "--seed", seed, "--output", "json")
    assert rc == EXIT_OK
    return json.loads(out)["schedule_digest"]


def test_seed_reproduces_issued_schedule(capsys):
    assert _digest(capsys, "7") == _digest(capsys, "7")
    assert _digest(capsys, "7") != _digest(capsys, "8")


def test_seeded_analyze_is_byte_identical(capsys):
    argv = ("analyze", "--synthetic", "200", "--seed", "11", "--output", "csv")
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


# -- exit codes ---------------------------------------------------------------

def _bad_trace(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("arrival_ms,tenant_id,function_id\n0,a,echo\nsoon,b,echo\n")
    return str(p)


USAGE_ERRORS = [
    ("invoke", "--port", "http"),
    ("invoke", "--config", "/nonexistent/mksv.conf"),
    ("invoke", "--default-mode", "hybrid"),
    ("coldstart", "--iterations", "0"),
    ("replay", "--synthetic", "5", "--target", "stub"),
    ("replay", "--synthetic", "5", "--target", "daemon"),
    ("analyze",),
    ("invoke", "--payload-hex", "zz"),
    ("invoke", "--daemon", "localhost:http"),
    ("frames-dump", "--decode", "xyz"),
]


@pytest.mark.parametrize("argv", USAGE_ERRORS, ids=" ".join)
def test_usage_and_config_errors_exit_2(capsys, argv):
    rc, _, err = run(capsys, *argv)
    assert rc == EXIT_USAGE
    assert err.startswith("mksv: ")


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["invoke", "--no-such-flag"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_operational_errors_exit_1(capsys, tmp_path):
    cases = [
        (("analyze", _bad_trace(tmp_path)), "TraceError"),
        (("analyze", str(tmp_path / "missing.csv")), "FileNotFoundError"),
        (("invoke", "--function", "no-such-program"), "ImageError"),
    ]
    for argv, kind in cases:
        rc, _, err = run(capsys, *argv)
        assert rc == EXIT_FAIL, argv
        assert kind in err


def test_failed_invocation_exits_1(capsys):
    rc, out, _ = run(capsys, "invoke", "--mode", "standalone", "--function", "io-heavy",
                     "--output", "json")
    assert rc == EXIT_FAIL
    assert json.loads(out)["ok"] is False


# -- serve --------------------------------------------------------------------

def _serve(*extra):
    proc = subprocess.Popen([sys.executable, "-m", "mksv.cli", "serve", "--port", "0",
                             "--output", "json", *extra],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    first = json.loads(proc.stdout.readline())
    assert first["event"] == "serving"
    host, port = first["endpoint"].rsplit(":", 1)
    return proc, first, (host, int(port))


def _stop(proc, timeout=30):
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        proc.kill()
        raise
    return out, err


def test_serve_invoke_shutdown_lifecycle():
    proc, first, addr = _serve()
    try:
        check_golden("serve", first)
        inv = subprocess.run([sys.executable, "-m", "mksv.cli", "invoke", "--daemon",
                              f"{addr[0]}:{addr[1]}", "--payload", "ping", "--output", "json"],
                             capture_output=True, text=True, timeout=60)
        assert inv.returncode == EXIT_OK, inv.stderr
        assert json.loads(inv.stdout)["output"] == "ping"
        assert call(addr, {"cmd": "shutdown"}) == [{"ok": True}]
        out, _ = _stop(proc)
    finally:
        proc.kill()
    assert proc.returncode == EXIT_OK
    stopped = json.loads(out.splitlines()[-1])
    assert stopped["event"] == "stopped"
    assert stopped["stats"]["counters"]["invocations"] == 1


def test_serve_on_occupied_port_names_it():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        res = subprocess.run([sys.executable, "-m", "mksv.cli", "serve", "--port", str(port)],
                             capture_output=True, text=True, timeout=60)
    assert res.returncode == EXIT_FAIL
    assert str(port) in res.stderr


def test_sigterm_with_live_invocations_completes_or_terminates():
    proc, _, addr = _serve()
    functions = ["sleep-1000"] * 3 + ["sleep-60000"] * 2
    replies: list = [None] * len(functions)

    def client(i, fn):
        replies[i] = call(addr, {"cmd": "invoke", "tenant": f"t{i % 2}", "function": fn,
                                 "payload_hex": ""}, timeout=60)

    threads = [threading.Thread(target=client, args=(i, fn)) for i, fn in enumerate(functions)]
    try:
        for th in threads:
            th.start()
        deadline = time.monotonic() + 30
        while call(addr, {"cmd": "stats"})[0]["stats"]["inflight"] < len(functions):
            assert time.monotonic() < deadline, "invocations never went live"
            time.sleep(0.02)
        proc.send_signal(signal.SIGTERM)
        _stop(proc, timeout=60)
        for th in threads:
            th.join(5)
            assert not th.is_alive()
    finally:
        proc.kill()
    assert proc.returncode == EXIT_OK
    for fn, got in zip(functions, replies):
        final = got[-1]
        if final["ok"]:
            assert fn == "sleep-1000"
        else:
            assert "VmTerminated" in final["result"]["error"]
    assert sum(1 for r in replies if r[-1]["ok"]) >= 3
