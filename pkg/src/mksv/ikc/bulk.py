"""Rendezvous bulk transfer with scatter/gather descriptors."""

from __future__ import annotations

import enum
import queue
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

from mksv.errors import BadFrame, CrossesPageBoundary, KernelTimeout, VmTerminated
from mksv.ikc.frames import PAGE_SIZE

DEFAULT_ACK_TIMEOUT = 5.0


class Direction(enum.Enum):
    PUSH = "push"
    PULL = "pull"


@dataclass(frozen=True)
class BulkDescriptor:
    direction: Direction
    segments: tuple[tuple[int, int], ...]
    total_len: int
    strict_page_mode: bool


def crosses_page(offset: int, length: int) -> bool:
    return offset // PAGE_SIZE != (offset + length - 1) // PAGE_SIZE


def bulk_prepare(direction: Direction, segments: Sequence[tuple[int, int]],
                 strict_page_mode: bool = False,
                 image_size: int | None = None) -> BulkDescriptor:
    segs = tuple((int(off), int(length)) for off, length in segments)
    if not segs:
        raise BadFrame("empty segment list")
    for off, length in segs:
        if length <= 0 or off < 0:
            raise BadFrame(f"bad segment ({off}, {length})")
        if image_size is not None and off + length > image_size:
            raise BadFrame(f"segment ({off}, {length}) outside guest image")
    ordered = sorted(segs)
    for (a_off, a_len), (b_off, _) in zip(ordered, ordered[1:]):
        if a_off + a_len > b_off:
            raise BadFrame(f"overlapping segments at {b_off}")
    if strict_page_mode:
        for off, length in segs:
            if crosses_page(off, length):
                raise CrossesPageBoundary(f"segment ({off}, {length}) spans a page boundary")
    return BulkDescriptor(direction, segs, sum(n for _, n in segs), strict_page_mode)


def gather(desc: BulkDescriptor, image) -> bytes:
    return b"".join(bytes(image[off:off + n]) for off, n in desc.segments)


def scatter(desc: BulkDescriptor, image, data: bytes) -> int:
    """Write ``data`` into the segments in order; returns bytes placed."""
    view = memoryview(data)
    pos = 0
    for off, n in desc.segments:
        if pos >= len(view):
            break
        chunk = view[pos:pos + n]
        image[off:off + len(chunk)] = chunk
        pos += len(chunk)
    return pos


class BulkLink(Protocol):
    """Transport side of one rendezvous.

    Push: ``deliver`` hands the gathered bytes over, then ``wait_ack`` blocks
    until the receiver acknowledges. Pull: ``receive`` returns the incoming
    bytes, ``acknowledge`` releases the sender.
    """

    def deliver(self, data: bytes) -> None: ...

    def wait_ack(self, timeout: float | None) -> bool: ...

    def receive(self, timeout: float | None) -> bytes: ...

    def acknowledge(self) -> None: ...


def bulk_transfer(desc: BulkDescriptor, image, link: BulkLink,
                  timeout: float | None = DEFAULT_ACK_TIMEOUT) -> int:
    if desc.direction is Direction.PUSH:
        link.deliver(gather(desc, image))
        if not link.wait_ack(timeout):
            raise KernelTimeout(f"no bulk acknowledgment within {timeout}s")
        return desc.total_len
    data = link.receive(timeout)
    placed = scatter(desc, image, data)
    link.acknowledge()
    return placed


class LoopbackLink:
    """In-memory rendezvous between two threads (or a test and itself).

    ``deliver``/``wait_ack`` form the sending end, ``receive``/``acknowledge``
    the receiving end.
    """

    def __init__(self):
        self._data: queue.Queue[bytes] = queue.Queue()
        self._ack = threading.Semaphore(0)
        self._closed = threading.Event()
        self.deliveries = 0

    def deliver(self, data: bytes) -> None:
        self.deliveries += 1
        self._data.put(data)

    def wait_ack(self, timeout: float | None) -> bool:
        return self._ack.acquire(timeout=timeout)

    def receive(self, timeout: float | None) -> bytes:
        try:
            return self._data.get(timeout=timeout)
        except queue.Empty:
            if self._closed.is_set():
                raise VmTerminated("link closed") from None
            raise KernelTimeout(f"no bulk data within {timeout}s") from None

    def acknowledge(self) -> None:
        self._ack.release()

    def close(self) -> None:
        self._closed.set()
