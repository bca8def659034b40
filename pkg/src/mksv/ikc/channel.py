"""Frame channel between one guest context and its peer.

All control traffic crosses the channel as encoded frames. Guest-bound
frames are announced through the control page: the producer side grants one
credit per frame, the guest poll loop consumes one credit per frame it takes.
Bulk payloads travel through a keyed staging area (the transport buffers)
next to the frame queues.
"""

from __future__ import annotations

import collections
import logging
import queue
import struct
import threading
import time
from typing import Callable

from mksv.errors import KernelError, KernelTimeout, STATUS_OK, UnknownCall, VmTerminated
from mksv.ikc.bulk import DEFAULT_ACK_TIMEOUT
from mksv.ikc.flow import ControlPage, credit_produce
from mksv.ikc.frames import CallId, FrameKind, IkcFrame, decode_frame, encode_frame

log = logging.getLogger(__name__)

TO_PEER = "to_peer"
TO_GUEST = "to_guest"

_U32 = struct.Struct("<I")

FrameDump = Callable[[str, bytes], None]


class Channel:
    def __init__(self, page: ControlPage | None = None, dump: FrameDump | None = None):
        self.page = page or ControlPage()
        self._to_peer: queue.Queue[bytes | None] = queue.Queue()
        self._to_guest: collections.deque[bytes] = collections.deque()
        self._staged: dict[tuple, bytes] = {}
        self._cv = threading.Condition()
        self._dump = dump
        self.counts: collections.Counter = collections.Counter()
        self.closed = False

    # -- accounting -------------------------------------------------------

    def _account(self, direction: str, frame: IkcFrame, raw: bytes) -> None:
        with self._cv:
            self.counts[(direction, frame.kind, frame.call_id)] += 1
        if self._dump is not None:
            self._dump(direction, raw)

    @property
    def frame_count(self) -> int:
        with self._cv:
            return sum(self.counts.values())

    def count(self, direction: str | None = None, kind: FrameKind | None = None,
              call_id: CallId | None = None) -> int:
        with self._cv:
            return sum(n for (d, k, c), n in self.counts.items()
                       if (direction is None or d == direction)
                       and (kind is None or k == kind)
                       and (call_id is None or c == call_id))

    # -- guest side -------------------------------------------------------

    def guest_send(self, frame: IkcFrame) -> None:
        if self.closed:
            raise VmTerminated("channel closed")
        raw = encode_frame(frame)
        self._account(TO_PEER, frame, raw)
        self._to_peer.put(raw)

    def guest_take(self) -> IkcFrame:
        """Pop the next guest-bound frame; the caller already holds its credit."""
        return decode_frame(self._to_guest.popleft())

    # -- peer side --------------------------------------------------------

    def peer_next(self, timeout: float | None = None) -> IkcFrame | None:
        """Next guest-originated frame, or None once the channel is closed."""
        raw = self._to_peer.get(timeout=timeout)
        if raw is None:
            self._to_peer.put(None)
            return None
        return decode_frame(raw)

    def peer_send(self, frame: IkcFrame) -> bool:
        if self.closed:
            return False
        raw = encode_frame(frame)
        self._account(TO_GUEST, frame, raw)
        self._to_guest.append(raw)
        credit_produce(self.page)
        return True

    # -- transport buffers ------------------------------------------------

    def stage(self, key: tuple, data: bytes) -> None:
        with self._cv:
            self._staged[key] = data
            self._cv.notify_all()

    def take_staged(self, key: tuple, timeout: float | None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while key not in self._staged:
                if self.closed:
                    raise VmTerminated("channel closed")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise KernelTimeout(f"no staged bulk data for {key}")
                self._cv.wait(remaining)
            return self._staged.pop(key)

    def close(self) -> None:
        with self._cv:
            if self.closed:
                return
            self.closed = True
            self._cv.notify_all()
        self._to_peer.put(None)
        self.page.teardown()


def u32(value: int) -> bytes:
    return _U32.pack(value)


def split_u32(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 4:
        return 0, payload
    return _U32.unpack_from(payload)[0], payload[4:]


def status_payload(exc: KernelError) -> bytes:
    return u32(exc.errno) if exc.errno is not None else b""


class PeerSession:
    """Peer end of a channel: reads guest frames and serves remote calls.

    ``on_request`` receives every CallRequest (from the reader thread) and is
    responsible for scheduling ``serve`` somewhere. BulkComplete frames from
    the guest release pull senders blocked in ``serve``. Command frames go to
    ``on_command`` if given.
    """

    def __init__(self, channel: Channel, uvm_id: int,
                 on_request: Callable[[IkcFrame], None],
                 ack_timeout: float = DEFAULT_ACK_TIMEOUT, name: str = "peer",
                 on_command: Callable[[IkcFrame], None] | None = None):
        self.channel = channel
        self.uvm_id = uvm_id
        self.on_request = on_request
        self.on_command = on_command
        self.ack_timeout = ack_timeout
        self._acks: dict[tuple[int, int], threading.Event] = {}
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader-{uvm_id}",
                                        daemon=True)

    def start(self) -> "PeerSession":
        self._reader.start()
        return self

    def join(self, timeout: float | None = None) -> None:
        self._reader.join(timeout)

    def _ack_event(self, key: tuple[int, int]) -> threading.Event:
        with self._lock:
            return self._acks.setdefault(key, threading.Event())

    def _read_loop(self) -> None:
        while True:
            frame = self.channel.peer_next()
            if frame is None:
                break
            if frame.kind == FrameKind.CALL_REQUEST:
                self.on_request(frame)
            elif frame.kind == FrameKind.BULK_COMPLETE:
                self._ack_event((frame.thread_id, frame.seq)).set()
            elif frame.kind == FrameKind.COMMAND and self.on_command is not None:
                self.on_command(frame)
            else:
                log.warning("peer ignoring %s frame from uvm %d", frame.kind.name, frame.uvm_id)
        with self._lock:
            for ev in self._acks.values():
                ev.set()

    def respond(self, req: IkcFrame, status: int = STATUS_OK, payload: bytes = b"",
                kind: FrameKind = FrameKind.CALL_RESPONSE) -> None:
        self.channel.peer_send(IkcFrame(kind, req.uvm_id, req.thread_id, req.call_id,
                                        req.seq, status, payload))

    def serve(self, req: IkcFrame, execute) -> None:
        """Run one remote call through ``execute(call_id, header, data, capacity)``.

        ``execute`` returns the response payload (or, for pull, the bytes to
        transfer) and raises KernelError on failure.
        """
        try:
            payload = self._serve(req, execute)
        except KernelError as exc:
            self.respond(req, int(exc.code), status_payload(exc))
        else:
            self.respond(req, STATUS_OK, payload)

    def _serve(self, req: IkcFrame, execute) -> bytes:
        cid = req.call_id
        if cid in (CallId.SEND, CallId.RECV):
            return execute(cid, req.payload, None, None)
        if cid == CallId.PUSH:
            _total, header = split_u32(req.payload)
            data = self.channel.take_staged((TO_PEER, req.thread_id, req.seq), self.ack_timeout)
            # receipt acknowledged before execution: the guest sender is released
            self.respond(req, kind=FrameKind.BULK_COMPLETE)
            return execute(cid, header, data, None)
        if cid == CallId.PULL:
            capacity, header = split_u32(req.payload)
            data = execute(cid, header, None, capacity)[:capacity]
            key = (req.thread_id, req.seq)
            ack = self._ack_event(key)
            self.channel.stage((TO_GUEST, req.thread_id, req.seq), data)
            self.respond(req, payload=u32(len(data)), kind=FrameKind.BULK_READY)
            ok = ack.wait(self.ack_timeout)
            with self._lock:
                self._acks.pop(key, None)
            if self.channel.closed:
                raise VmTerminated("channel closed during pull")
            if not ok:
                raise KernelTimeout("guest did not acknowledge pull")
            return u32(len(data))
        raise UnknownCall(f"call {cid.name} is not remote")
