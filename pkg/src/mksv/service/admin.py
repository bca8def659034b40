"""JSON-lines admin endpoint for a running tenant service."""

from __future__ import annotations

import json
import socketserver
import threading

from mksv.ikc.channel import Channel
from mksv.service.service import RegistrationError, TenantService


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        admin: AdminServer = self.server.admin
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                reply = admin.handle_command(json.loads(line))
            except (ValueError, KeyError, TypeError, RegistrationError) as exc:
                reply = {"ok": False, "error": str(exc)}
            self.wfile.write(json.dumps(reply).encode() + b"\n")
            self.wfile.flush()
            if admin.stopping.is_set():
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class AdminServer:
    """Accepts ``register``, ``stats`` and ``shutdown`` commands.

    ``register`` creates a channel for the given uvm id and keeps it so an
    in-process guest can be attached later through ``channels``.
    """

    def __init__(self, service: TenantService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self.channels: dict[int, Channel] = {}
        self.stopping = threading.Event()
        self._server = _Server((host, port), _Handler)
        self._server.admin = self
        self.address = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,),
                                        daemon=True, name="svc-admin")

    def start(self) -> "AdminServer":
        self._thread.start()
        return self

    def handle_command(self, cmd: dict) -> dict:
        op = cmd["cmd"]
        if op == "register":
            uvm_id = int(cmd["uvm_id"])
            channel = Channel()
            _, port = self.service.register_uvm(uvm_id, channel, cmd.get("group", "default"))
            self.channels[uvm_id] = channel
            return {"ok": True, "uvm_id": uvm_id, "port": port}
        if op == "stats":
            return {"ok": True, "stats": self.service.stats()}
        if op == "shutdown":
            self.stopping.set()
            threading.Thread(target=self.stop, daemon=True).start()
            return {"ok": True}
        raise ValueError(f"unknown command {op!r}")

    def _close_listener(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def stop(self, wait: bool = True) -> None:
        self.service.shutdown()
        closer = threading.Thread(target=self._close_listener, daemon=True)
        closer.start()
        if wait:
            closer.join()
