"""Marshaling of POSIX operations carried in send/push/pull payloads (format v1).

Byte 0 is the op tag; fixed-width fields follow, little-endian. Strings are
prefixed with a 16-bit length. For ``write``/``sock_send`` the data bytes
follow the fixed fields (or arrive through the bulk path).

======  ==========  =========================================
tag     op          fields after the tag
======  ==========  =========================================
1       open        u32 flags, u32 mode, str path
2       close       u32 fd
3       read        u32 fd, u32 count
4       write       u32 fd, data...
5       lseek       u32 fd, i64 offset, u32 whence
6       sock_send   u32 fd, data...
7       sock_recv   u32 fd, u32 count
8       clock       u32 clock_id
9       connect     u16 port, str host     (extension)
======  ==========  =========================================
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from mksv.errors import BadFrame

# portable open flags (Linux numbering)
O_RDONLY = 0x0
O_WRONLY = 0x1
O_RDWR = 0x2
O_CREAT = 0x40
O_TRUNC = 0x200
O_APPEND = 0x400


class Op(enum.IntEnum):
    OPEN = 1
    CLOSE = 2
    READ = 3
    WRITE = 4
    LSEEK = 5
    SOCK_SEND = 6
    SOCK_RECV = 7
    CLOCK = 8
    CONNECT = 9


@dataclass(frozen=True)
class Request:
    op: Op
    fd: int = -1
    count: int = 0
    flags: int = 0
    mode: int = 0
    path: str = ""
    offset: int = 0
    whence: int = 0
    clock_id: int = 0
    host: str = ""
    port: int = 0
    data: bytes = b""

    def describe(self) -> dict:
        d = {"op": self.op.name.lower()}
        if self.op in (Op.OPEN,):
            d["path"] = self.path
        if self.fd >= 0:
            d["fd"] = self.fd
        return d


def _str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _take_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    if off + n > len(buf):
        raise BadFrame("truncated string")
    return buf[off:off + n].decode(), off + n


def encode(req: Request) -> bytes:
    tag = bytes([req.op])
    op = req.op
    if op is Op.OPEN:
        return tag + struct.pack("<II", req.flags, req.mode) + _str(req.path)
    if op is Op.CLOSE:
        return tag + struct.pack("<I", req.fd)
    if op in (Op.READ, Op.SOCK_RECV):
        return tag + struct.pack("<II", req.fd, req.count)
    if op in (Op.WRITE, Op.SOCK_SEND):
        return tag + struct.pack("<I", req.fd) + req.data
    if op is Op.LSEEK:
        return tag + struct.pack("<IqI", req.fd, req.offset, req.whence)
    if op is Op.CLOCK:
        return tag + struct.pack("<I", req.clock_id)
    if op is Op.CONNECT:
        return tag + struct.pack("<H", req.port) + _str(req.host)
    raise ValueError(op)


def decode(buf: bytes) -> Request:
    if not buf:
        raise BadFrame("empty op payload")
    try:
        op = Op(buf[0])
    except ValueError:
        raise BadFrame(f"unknown op tag {buf[0]}") from None
    try:
        if op is Op.OPEN:
            flags, mode = struct.unpack_from("<II", buf, 1)
            path, _ = _take_str(buf, 9)
            return Request(op, flags=flags, mode=mode, path=path)
        if op is Op.CLOSE:
            (fd,) = struct.unpack_from("<I", buf, 1)
            return Request(op, fd=fd)
        if op in (Op.READ, Op.SOCK_RECV):
            fd, count = struct.unpack_from("<II", buf, 1)
            return Request(op, fd=fd, count=count)
        if op in (Op.WRITE, Op.SOCK_SEND):
            (fd,) = struct.unpack_from("<I", buf, 1)
            return Request(op, fd=fd, data=bytes(buf[5:]))
        if op is Op.LSEEK:
            fd, offset, whence = struct.unpack_from("<IqI", buf, 1)
            return Request(op, fd=fd, offset=offset, whence=whence)
        if op is Op.CLOCK:
            (cid,) = struct.unpack_from("<I", buf, 1)
            return Request(op, clock_id=cid)
        if op is Op.CONNECT:
            (port,) = struct.unpack_from("<H", buf, 1)
            host, _ = _take_str(buf, 3)
            return Request(op, host=host, port=port)
    except struct.error as exc:
        raise BadFrame(f"truncated {op.name.lower()} payload") from exc
    raise BadFrame(f"unhandled op {op}")


# tag + u32 fd ahead of the data bytes of write/sock_send
DATA_HEADER_LEN = 5
