"""Control-plane daemon: JSON lines over TCP.

Requests are one JSON object per line with a ``cmd`` of ``invoke``,
``stats``, ``drain`` or ``shutdown``. An ``invoke`` without ``payload``
first answers ``{"event": "ready", "port": N}`` so the client can attach to
the gateway, then the result line.
"""

from __future__ import annotations

import contextlib
import json
import logging
import socket
import socketserver
import threading

from mksv.config import Settings
from mksv.control.plane import ControlPlane, InvocationRequest, Mode, PlaneClosed
from mksv.errors import KernelError

log = logging.getLogger(__name__)


def _request_from(cmd: dict, default_mode: str) -> InvocationRequest:
    payload = cmd.get("payload")
    if "payload_hex" in cmd:
        payload = bytes.fromhex(cmd["payload_hex"])
    elif isinstance(payload, str):
        payload = payload.encode()
    return InvocationRequest(str(cmd["tenant"]), str(cmd["function"]),
                             Mode(cmd.get("mode", default_mode)), payload,
                             tuple(cmd.get("argv", ())))


class _Handler(socketserver.StreamRequestHandler):
    def _send(self, obj: dict) -> None:
        self.wfile.write(json.dumps(obj).encode() + b"\n")
        self.wfile.flush()

    def handle(self) -> None:
        daemon: Daemon = self.server.daemon_ref
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                cmd = json.loads(line)
                op = cmd["cmd"]
                if op == "invoke":
                    req = _request_from(cmd, daemon.plane.settings.default_mode)
                    on_ready = (lambda port: self._send({"event": "ready", "port": port}))
                    with daemon.replying():
                        result = daemon.plane.invoke(req, on_ready=on_ready)
                        self._send({"ok": result.ok, "result": result.to_dict()})
                elif op == "stats":
                    self._send({"ok": True, "stats": daemon.plane.stats()})
                elif op == "drain":
                    terminated = daemon.plane.drain(float(cmd.get("timeout", 10.0)))
                    self._send({"ok": True, "terminated": terminated})
                elif op == "shutdown":
                    self._send({"ok": True})
                    daemon.request_shutdown()
                    return
                else:
                    self._send({"ok": False, "error": f"unknown command {op!r}"})
            except PlaneClosed as exc:
                self._send({"ok": False, "error": str(exc)})
            except (ValueError, KeyError, TypeError) as exc:
                self._send({"ok": False, "error": f"bad request: {exc}"})
            except KernelError as exc:
                self._send({"ok": False, "error": f"{type(exc).__name__}: {exc}"})


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False


class Daemon:
    def __init__(self, settings: Settings | None = None, plane: ControlPlane | None = None,
                 reap_interval: float = 1.0):
        self.settings = settings or Settings()
        # bind before building pools so a busy port fails fast
        self._server = _Server((self.settings.host, self.settings.port), _Handler)
        self._server.daemon_ref = self
        self.address = self._server.server_address[:2]
        self.plane = plane or ControlPlane(self.settings)
        self.reap_interval = reap_interval
        self._stop = threading.Event()
        self._stopped = threading.Event()
        self._replies = 0
        self._replies_cv = threading.Condition()

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    @contextlib.contextmanager
    def replying(self):
        with self._replies_cv:
            self._replies += 1
        try:
            yield
        finally:
            with self._replies_cv:
                self._replies -= 1
                self._replies_cv.notify_all()

    def _reaper(self) -> None:
        while not self._stop.wait(self.reap_interval):
            self.plane.reap()

    def serve_forever(self) -> None:
        threading.Thread(target=self._reaper, daemon=True, name="reaper").start()
        server = threading.Thread(target=self._server.serve_forever, args=(0.05,),
                                  daemon=True, name="daemon-accept")
        server.start()
        self._stop.wait()
        self._server.shutdown()
        self._server.server_close()
        self.plane.shutdown()
        # drained invocations still have to write their result line
        with self._replies_cv:
            self._replies_cv.wait_for(lambda: self._replies == 0, 5.0)
        self._stopped.set()

    def start(self) -> "Daemon":
        threading.Thread(target=self.serve_forever, daemon=True, name="daemon").start()
        return self

    def request_shutdown(self) -> None:
        self._stop.set()

    def wait_stopped(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)


def call(address: tuple[str, int], cmd: dict, timeout: float = 60.0) -> list[dict]:
    """Send one command and collect reply lines until the final one."""
    replies = []
    with socket.create_connection(address, timeout=timeout) as s:
        s.sendall(json.dumps(cmd).encode() + b"\n")
        f = s.makefile("rb")
        for line in f:
            msg = json.loads(line)
            replies.append(msg)
            if "event" not in msg:
                break
    return replies
