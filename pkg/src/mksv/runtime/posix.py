"""POSIX compatibility shim over the kernel-call interface.

Each POSIX call maps to a fixed kernel-call sequence:

* thread, mutex, condition, sleep and clock calls stay local;
* ``read(0)`` / ``write(1|2)`` become ``recv`` / ``send`` (stdio is bridged to
  the gateway by whoever serves the channel);
* other descriptors marshal the operation into ``send``;
* anything whose marshaled form does not fit a frame goes through one
  ``push`` or ``pull`` over the caller's buffer.
"""

from __future__ import annotations

import errno
import struct

from mksv import ops
from mksv.errors import GuestError
from mksv.ikc.frames import INLINE_CAPACITY, CallId

STDIN, STDOUT, STDERR = 0, 1, 2
CLOCK_REALTIME = 0
CLOCK_MONOTONIC = 1

SEEK_SET, SEEK_CUR, SEEK_END = 0, 1, 2

SUPPORTED = (
    "read", "write", "open", "close", "lseek", "socket", "connect", "accept",
    "clock_gettime", "nanosleep", "pthread_create", "pthread_join",
    "pthread_mutex_lock", "pthread_mutex_unlock", "pthread_cond_wait",
    "pthread_cond_signal",
)


class _FdTable:
    """Per-process guest descriptor table: guest fd -> (kind, remote fd)."""

    def __init__(self):
        self.entries = {STDIN: ("stdio", STDIN), STDOUT: ("stdio", STDOUT),
                        STDERR: ("stdio", STDERR)}
        self._next = 3

    def add(self, kind: str, remote: int) -> int:
        fd = self._next
        self._next += 1
        self.entries[fd] = (kind, remote)
        return fd

    def get(self, fd: int) -> tuple[str, int]:
        try:
            return self.entries[fd]
        except KeyError:
            raise GuestError(errno.EBADF, f"bad fd {fd}") from None


def segments(addr: int, count: int, segment_bytes: int) -> list[tuple[int, int]]:
    return [(addr + off, min(segment_bytes, count - off))
            for off in range(0, count, segment_bytes)]


class Posix:
    def __init__(self, sys):
        self.sys = sys
        ctx = sys.ctx
        if not hasattr(ctx, "posix_fds"):
            ctx.posix_fds = _FdTable()
        self.fds: _FdTable = ctx.posix_fds

    def call(self, name: str, *args):
        """Generic entry; unsupported calls fail with ENOSYS."""
        if name not in SUPPORTED:
            raise GuestError(errno.ENOSYS, f"{name} is not supported")
        return getattr(self, name)(*args)

    # -- helpers ----------------------------------------------------------

    def _segments(self, addr: int, count: int) -> list[tuple[int, int]]:
        return segments(addr, count, self.sys.ctx.segment_bytes)

    def _remote(self, req: ops.Request) -> bytes:
        return self.sys.kcall(CallId.SEND, ops.encode(req))

    # -- file-ish ---------------------------------------------------------

    def read(self, fd: int, addr: int, count: int) -> int:
        kind, remote = self.fds.get(fd)
        if count <= 0:
            return 0
        self.sys.ctx.check_access(addr, count, write=True)
        if kind in ("stdio", "gateway"):
            if remote != STDIN and kind == "stdio":
                raise GuestError(errno.EBADF, f"fd {fd} is not readable")
            if count <= INLINE_CAPACITY:
                data = self.sys.kcall(CallId.RECV, count)
                self.sys.store(addr, data)
                return len(data)
            req = ops.Request(ops.Op.READ, fd=STDIN, count=count)
        else:
            op = ops.Op.SOCK_RECV if kind == "socket" else ops.Op.READ
            req = ops.Request(op, fd=remote, count=count)
            if count <= INLINE_CAPACITY:
                data = self._remote(req)
                self.sys.store(addr, data)
                return len(data)
        return self.sys.kcall(CallId.PULL, self._segments(addr, count), ops.encode(req))

    def write(self, fd: int, addr: int, count: int) -> int:
        kind, remote = self.fds.get(fd)
        if count <= 0:
            return 0
        if kind == "gateway":
            remote = STDOUT
        elif kind == "stdio" and remote == STDIN:
            raise GuestError(errno.EBADF, "stdin is not writable")
        op = ops.Op.SOCK_SEND if kind == "socket" else ops.Op.WRITE
        if ops.DATA_HEADER_LEN + count <= INLINE_CAPACITY:
            data = self.sys.load(addr, count)
            reply = self._remote(ops.Request(op, fd=remote, data=data))
        else:
            self.sys.ctx.check_access(addr, count)
            reply = self.sys.kcall(CallId.PUSH, self._segments(addr, count),
                                   ops.encode(ops.Request(op, fd=remote)))
        return struct.unpack("<I", reply)[0]

    def open(self, path: str, flags: int = ops.O_RDONLY, mode: int = 0o644) -> int:
        reply = self._remote(ops.Request(ops.Op.OPEN, flags=flags, mode=mode, path=path))
        return self.fds.add("file", struct.unpack("<I", reply)[0])

    def close(self, fd: int) -> int:
        kind, remote = self.fds.get(fd)
        if kind in ("file", "socket"):
            self._remote(ops.Request(ops.Op.CLOSE, fd=remote))
        del self.fds.entries[fd]
        return 0

    def lseek(self, fd: int, offset: int, whence: int = SEEK_SET) -> int:
        kind, remote = self.fds.get(fd)
        if kind != "file":
            raise GuestError(errno.ESPIPE, f"fd {fd} is not seekable")
        reply = self._remote(ops.Request(ops.Op.LSEEK, fd=remote, offset=offset, whence=whence))
        return struct.unpack("<q", reply)[0]

    def socket(self) -> int:
        return self.fds.add("unconnected", -1)

    def connect(self, fd: int, host: str, port: int) -> int:
        kind, _ = self.fds.get(fd)
        if kind != "unconnected":
            raise GuestError(errno.EISCONN, f"fd {fd} already connected")
        reply = self._remote(ops.Request(ops.Op.CONNECT, host=host, port=port))
        self.fds.entries[fd] = ("socket", struct.unpack("<I", reply)[0])
        return 0

    def accept(self) -> int:
        """The only inbound connection is the gateway client, exposed as a new fd."""
        return self.fds.add("gateway", STDIN)

    # -- time -------------------------------------------------------------

    def clock_gettime(self, clock_id: int = CLOCK_MONOTONIC) -> int:
        if clock_id == CLOCK_MONOTONIC:
            return self.sys.kcall(CallId.GETTIME)
        reply = self._remote(ops.Request(ops.Op.CLOCK, clock_id=clock_id))
        return struct.unpack("<Q", reply)[0]

    def nanosleep(self, ns: int) -> int:
        return self.sys.kcall(CallId.SLEEP, ns)

    # -- threads ----------------------------------------------------------

    def pthread_create(self, fn, arg=None) -> int:
        return self.sys.kcall(CallId.CREATE_THREAD, fn, arg)

    def pthread_join(self, tid: int):
        return self.sys.kcall(CallId.JOIN_THREAD, tid)

    def pthread_mutex_lock(self, mid: int) -> int:
        return self.sys.kcall(CallId.MUTEX_LOCK, mid)

    def pthread_mutex_unlock(self, mid: int) -> int:
        return self.sys.kcall(CallId.MUTEX_UNLOCK, mid)

    def pthread_cond_wait(self, cid: int, mid: int) -> int:
        return self.sys.kcall(CallId.COND_WAIT, cid, mid)

    def pthread_cond_signal(self, cid: int) -> int:
        return self.sys.kcall(CallId.COND_SIGNAL, cid)

    # -- conveniences for programs ---------------------------------------

    def read_exact(self, fd: int, addr: int, count: int) -> int:
        """Loop ``read`` until ``count`` bytes or EOF; returns bytes read."""
        got = 0
        while got < count:
            n = self.read(fd, addr + got, count - got)
            if n == 0:
                break
            got += n
        return got


def posix_shim(sys, name: str, *args):
    return Posix(sys).call(name, *args)
