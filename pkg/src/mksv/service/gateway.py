"""Per-user-VM TCP gateway carrying the guest's standard I/O."""

from __future__ import annotations

import logging
import socket
import threading
import time

from mksv.errors import VmTerminated

log = logging.getLogger(__name__)


class Gateway:
    """Listens on a fresh port; at most one client connection is active.

    Output written before a client connects is buffered and flushed on
    connect. A client half-close shows up as EOF on guest reads while guest
    writes keep flowing until the gateway is closed.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._cv = threading.Condition()
        self._conn: socket.socket | None = None
        self._read_eof = False
        self._pending_out = bytearray()
        self._closed = False
        self.refused = 0
        self.bytes_in = 0
        self.bytes_out = 0
        self.first_output_ns: int | None = None
        self._acceptor = threading.Thread(target=self._accept_loop,
                                          name=f"gateway-{self.port}", daemon=True)

    def start(self) -> "Gateway":
        self._acceptor.start()
        return self

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._cv:
                if self._closed or self._conn is not None:
                    self.refused += 1
                    conn.close()
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._conn = conn
                self._read_eof = False
                pending, self._pending_out = bytes(self._pending_out), bytearray()
                self._cv.notify_all()
            if pending:
                self._send(conn, pending)

    @property
    def connected(self) -> bool:
        return self._conn is not None

    def _wait_conn(self) -> socket.socket:
        with self._cv:
            while self._conn is None:
                if self._closed:
                    raise VmTerminated("gateway closed")
                self._cv.wait()
            return self._conn

    def read(self, n: int) -> bytes:
        """Up to ``n`` bytes from the client; b"" on EOF or reset."""
        conn = self._wait_conn()
        if self._read_eof:
            return b""
        try:
            data = conn.recv(n)
        except (ConnectionResetError, OSError):
            data = b""
        if not data:
            self._read_eof = True
        self.bytes_in += len(data)
        return data

    def _send(self, conn: socket.socket, data: bytes) -> None:
        try:
            conn.sendall(data)
        except OSError as exc:
            log.debug("gateway %d: client gone (%s)", self.port, exc)
            self._drop(conn)

    def write(self, data: bytes) -> int:
        if self.first_output_ns is None:
            self.first_output_ns = time.perf_counter_ns()
        with self._cv:
            if self._closed:
                raise VmTerminated("gateway closed")
            conn = self._conn
            if conn is None:
                self._pending_out += data
                self.bytes_out += len(data)
                return len(data)
        self._send(conn, data)
        self.bytes_out += len(data)
        return len(data)

    def _drop(self, conn: socket.socket) -> None:
        with self._cv:
            if self._conn is conn:
                self._conn = None
                self._read_eof = True
        try:
            conn.close()
        except OSError:
            pass

    def close(self) -> None:
        with self._cv:
            self._closed = True
            conn, self._conn = self._conn, None
            self._cv.notify_all()
        if conn is not None:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._listener.close()
