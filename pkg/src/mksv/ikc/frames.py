"""Inter-kernel frame codec and the kernel-call table.

Frame layout (little-endian, 32-byte header + inline payload)::

    off  size  field
      0     2  magic        0x4E56
      2     1  version      1
      3     1  kind
      4     4  uvm_id
      8     4  thread_id
     12     2  call_id
     14     2  status       0 = OK, else ErrorCode
     16     8  seq
     24     4  payload_len  <= 192
     28     4  reserved     zero
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

from mksv.errors import BadFrame, PayloadTooLarge, UnknownCall

MAGIC = 0x4E56
VERSION = 1
HEADER_SIZE = 32
INLINE_CAPACITY = 192
PAGE_SIZE = 4096

_HEADER = struct.Struct("<HBBIIHHQI4x")
assert _HEADER.size == HEADER_SIZE


class FrameKind(enum.IntEnum):
    CALL_REQUEST = 0
    CALL_RESPONSE = 1
    CREDIT_GRANT = 2
    BULK_READY = 3
    BULK_COMPLETE = 4
    COMMAND = 5


class CallId(enum.IntEnum):
    # process / thread
    GETPID = 0x00
    GETTID = 0x01
    EXIT = 0x02
    EXIT_THREAD = 0x03
    JOIN_THREAD = 0x04
    CREATE_THREAD = 0x05
    # scheduling / synchronization
    YIELD = 0x10
    SLEEP = 0x11
    MUTEX_LOCK = 0x12
    MUTEX_UNLOCK = 0x13
    COND_WAIT = 0x14
    COND_SIGNAL = 0x15
    RESUME = 0x16
    # memory
    MMAP = 0x20
    MUNMAP = 0x21
    MCTRL = 0x22
    MCOPY = 0x23
    # capability / process control
    CAPCTL = 0x30
    TERMINATE = 0x31
    # thread-local storage
    SET_THREAD_DATA_AREA = 0x40
    GET_THREAD_DATA_AREA = 0x41
    # time / debug
    GETTIME = 0x50
    DEBUG = 0x51
    # device I/O
    MMIO_ALLOC = 0x60
    MMIO_FREE = 0x61
    MMIO_INFO = 0x62
    PMIO_ALLOC = 0x63
    PMIO_FREE = 0x64
    PMIO_READ = 0x65
    PMIO_WRITE = 0x66
    # inter-kernel
    SEND = 0x70
    RECV = 0x71
    PUSH = 0x72
    PULL = 0x73

    @property
    def is_remote(self) -> bool:
        return is_remote(self)


VALID_CALL_IDS = frozenset(int(c) for c in CallId)
VALID_KINDS = frozenset(int(k) for k in FrameKind)


def is_remote(code: int) -> bool:
    """Remote-ness is a function of the code range alone."""
    return 0x70 <= code <= 0x73


@dataclass(frozen=True)
class IkcFrame:
    kind: FrameKind
    uvm_id: int
    thread_id: int
    call_id: CallId
    seq: int
    status: int = 0
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def to_json(self) -> dict:
        return {
            "kind": FrameKind(self.kind).name,
            "uvm_id": self.uvm_id,
            "thread_id": self.thread_id,
            "call_id": CallId(self.call_id).name.lower(),
            "status": self.status,
            "seq": self.seq,
            "payload_len": self.payload_len,
            "payload": self.payload.hex(),
        }


def encode_frame(frame: IkcFrame) -> bytes:
    n = len(frame.payload)
    if n > INLINE_CAPACITY:
        raise PayloadTooLarge(f"payload_len {n} > {INLINE_CAPACITY}")
    header = _HEADER.pack(MAGIC, VERSION, int(frame.kind), frame.uvm_id,
                          frame.thread_id, int(frame.call_id), frame.status,
                          frame.seq, n)
    return header + bytes(frame.payload)


def decode_frame(buf: bytes | bytearray | memoryview) -> IkcFrame:
    """Decode exactly one frame; anything malformed raises BadFrame."""
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise BadFrame(f"short buffer: {len(buf)} bytes")
    magic, version, kind, uvm_id, tid, call_id, status, seq, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadFrame(f"bad magic 0x{magic:04x}")
    if version != VERSION:
        raise BadFrame(f"bad version {version}")
    if kind not in VALID_KINDS:
        raise BadFrame(f"unknown kind {kind}")
    if call_id not in VALID_CALL_IDS:
        raise UnknownCall(f"unknown call_id 0x{call_id:04x}")
    if n > INLINE_CAPACITY:
        raise BadFrame(f"payload_len {n} exceeds inline capacity")
    if len(buf) != HEADER_SIZE + n:
        raise BadFrame(f"length mismatch: header says {HEADER_SIZE + n}, got {len(buf)}")
    return IkcFrame(FrameKind(kind), uvm_id, tid, CallId(call_id), seq, status,
                    buf[HEADER_SIZE:])


def dump_line(raw: bytes) -> str:
    """One debug line: hex of the raw frame, tab, decoded JSON (or the error)."""
    try:
        decoded = decode_frame(raw).to_json()
    except BadFrame as exc:
        decoded = {"error": type(exc).__name__, "detail": str(exc)}
    return f"{raw.hex()}\t{json.dumps(decoded, sort_keys=True)}"
