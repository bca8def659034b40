"""Backends that execute forwarded calls on behalf of one user VM handle."""

from __future__ import annotations

import errno
import os
import posixpath
import queue
import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

from mksv import ops
from mksv.errors import BackendFailure, KernelTimeout, VmTerminated
from mksv.ikc.channel import u32
from mksv.ikc.frames import INLINE_CAPACITY, CallId

if TYPE_CHECKING:
    from mksv.service.service import UserVmHandle


@dataclass(frozen=True)
class Call:
    """One remote call as seen by a backend."""

    call_id: CallId
    tid: int
    header: bytes
    request: ops.Request | None = None
    data: bytes | None = None      # pushed bytes
    capacity: int | None = None    # pull capacity


class Backend(Protocol):
    name: str
    marshaled: bool

    def execute(self, handle: "UserVmHandle", call: Call) -> bytes: ...

    def release(self, handle: "UserVmHandle") -> None: ...


def _recv_len(header: bytes) -> int:
    if len(header) < 4:
        return INLINE_CAPACITY
    return struct.unpack_from("<I", header)[0]


_ACCESS = {ops.O_RDONLY: os.O_RDONLY, ops.O_WRONLY: os.O_WRONLY, ops.O_RDWR: os.O_RDWR}


def host_flags(flags: int) -> int:
    out = _ACCESS.get(flags & 0x3)
    if out is None:
        raise BackendFailure("bad access mode", errno=errno.EINVAL)
    for bit, host in ((ops.O_CREAT, os.O_CREAT), (ops.O_TRUNC, os.O_TRUNC),
                      (ops.O_APPEND, os.O_APPEND)):
        if flags & bit:
            out |= host
    return out | getattr(os, "O_CLOEXEC", 0)


def resolve(root: Path, path: str) -> Path:
    # normalizing against "/" clamps any leading ".." at the scratch root
    rel = posixpath.normpath("/" + path).lstrip("/")
    return root / rel if rel else root


class HostBackend:
    """Direct host I/O under the handle's scratch root; stdio goes to its gateway."""

    name = "host"
    marshaled = True

    def execute(self, handle: "UserVmHandle", call: Call) -> bytes:
        try:
            return self._execute(handle, call)
        except OSError as exc:
            raise BackendFailure(str(exc), errno=exc.errno or errno.EIO) from exc

    def _execute(self, handle: "UserVmHandle", call: Call) -> bytes:
        if call.call_id == CallId.RECV:
            return self._stdin(handle, min(_recv_len(call.header), INLINE_CAPACITY))
        req = call.request
        bulk = call.call_id in (CallId.PUSH, CallId.PULL)
        op = req.op
        if op is ops.Op.OPEN:
            target = resolve(handle.root, req.path)
            flags = host_flags(req.flags)
            if flags & os.O_CREAT:
                target.parent.mkdir(parents=True, exist_ok=True)
            return u32(handle.add_fd(os.open(target, flags, req.mode & 0o777)))
        if op is ops.Op.CLOSE:
            res = handle.pop_fd(req.fd)
            res.close() if isinstance(res, socket.socket) else os.close(res)
            return u32(0)
        if op in (ops.Op.READ, ops.Op.SOCK_RECV):
            limit = req.count if call.capacity is None else min(req.count, call.capacity)
            if not bulk:
                limit = min(limit, INLINE_CAPACITY)
            if op is ops.Op.READ and req.fd == 0:
                return self._stdin(handle, limit)
            res = handle.get_fd(req.fd)
            if isinstance(res, socket.socket):
                return res.recv(limit)
            return self._read_file(res, limit)
        if op in (ops.Op.WRITE, ops.Op.SOCK_SEND):
            data = req.data if call.data is None else call.data
            if op is ops.Op.WRITE and req.fd in (1, 2):
                return u32(handle.gateway.write(data))
            res = handle.get_fd(req.fd)
            if isinstance(res, socket.socket):
                res.sendall(data)
                return u32(len(data))
            return u32(self._write_file(res, data))
        if op is ops.Op.LSEEK:
            fd = handle.get_fd(req.fd)
            if isinstance(fd, socket.socket):
                raise BackendFailure("socket is not seekable", errno=errno.ESPIPE)
            return struct.pack("<q", os.lseek(fd, req.offset, req.whence))
        if op is ops.Op.CLOCK:
            now = time.time_ns() if req.clock_id == 0 else time.monotonic_ns()
            return struct.pack("<Q", now)
        if op is ops.Op.CONNECT:
            sock = socket.create_connection((req.host, req.port), timeout=5.0)
            sock.settimeout(None)
            return u32(handle.add_fd(sock))
        raise BackendFailure(f"unsupported op {op.name}", errno=errno.ENOSYS)

    @staticmethod
    def _stdin(handle: "UserVmHandle", n: int) -> bytes:
        return handle.gateway.read(n) if n > 0 else b""

    @staticmethod
    def _read_file(fd: int, limit: int) -> bytes:
        parts, got = [], 0
        while got < limit:
            chunk = os.read(fd, limit - got)
            if not chunk:
                break
            parts.append(chunk)
            got += len(chunk)
        return b"".join(parts)

    @staticmethod
    def _write_file(fd: int, data: bytes) -> int:
        view, done = memoryview(data), 0
        while done < len(view):
            done += os.write(fd, view[done:])
        return done

    def release(self, handle: "UserVmHandle") -> None:
        for res in handle.drain_fds():
            try:
                res.close() if isinstance(res, socket.socket) else os.close(res)
            except OSError:
                pass


class EchoBackend:
    """Loopback: what a guest thread sends or pushes, its next recv or pull returns."""

    name = "echo"
    marshaled = False

    def __init__(self, recv_timeout: float = 5.0):
        self.recv_timeout = recv_timeout

    def execute(self, handle: "UserVmHandle", call: Call) -> bytes:
        box = handle.mailbox(call.tid)
        if call.call_id == CallId.SEND:
            box.put(call.header)
            return b""
        if call.call_id == CallId.PUSH:
            box.put(call.data)
            return u32(len(call.data))
        limit = _recv_len(call.header) if call.call_id == CallId.RECV else call.capacity
        deadline = time.monotonic() + self.recv_timeout
        while True:
            try:
                return box.get(timeout=0.05)[:limit]
            except queue.Empty:
                if handle.closed:
                    raise VmTerminated("handle released") from None
                if time.monotonic() >= deadline:
                    raise KernelTimeout("no message for recv") from None

    def release(self, handle: "UserVmHandle") -> None:
        pass


def make_backend(kind: str) -> Backend:
    if kind == "host":
        return HostBackend()
    if kind == "echo":
        return EchoBackend()
    raise ValueError(f"unknown backend {kind!r}")
