"""Guest micro-kernel: thread table, local kernel calls, remote call forwarding.

Guest threads are host threads that take turns on a single virtual CPU.
Every kernel call is a preemption point; blocking calls give the CPU up
until they are woken. Remote calls are encoded as frames on the context's
channel and complete when the poll loop hands back the matching response.
"""

from __future__ import annotations

import collections
import enum
import errno
import itertools
import logging
import mmap
import queue
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable

from mksv.errors import (BackendFailure, GuestError, KernelError, KernelTimeout,
                         PayloadTooLarge, UnknownCall, VmTerminated, error_for_status)
from mksv.ikc.bulk import (DEFAULT_ACK_TIMEOUT, BulkDescriptor, Direction, bulk_prepare,
                           bulk_transfer)
from mksv.ikc.channel import TO_GUEST, TO_PEER, Channel, split_u32, u32
from mksv.ikc.flow import ControlPage, credit_consume
from mksv.ikc.frames import INLINE_CAPACITY, PAGE_SIZE, CallId, FrameKind, IkcFrame

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BYTES = 16 * 1024 * 1024
KERNEL_BASE = 0x100000
INITRD_BASE = 0x300000
HEAP_BASE = 0x400000

PROT_READ = 0x1
PROT_WRITE = 0x2
PROT_RW = PROT_READ | PROT_WRITE

EXIT_TERMINATED = -1
EXIT_CRASHED = 1


class ThreadState(enum.Enum):
    RUNNABLE = "runnable"
    BLOCKED = "blocked"
    EXITED = "exited"
    JOINED = "joined"


@dataclass(frozen=True)
class MemRegion:
    base: int
    length: int
    prot: int = PROT_RW
    kind: str = "anon"

    @property
    def end(self) -> int:
        return self.base + self.length

    def covers(self, addr: int, n: int) -> bool:
        return self.base <= addr and addr + n <= self.end


@dataclass
class GuestThread:
    tid: int
    entry: Callable | None = None
    arg: Any = None
    state: ThreadState = ThreadState.RUNNABLE
    waiting_on: tuple | None = None
    exit_value: Any = None
    tls: int = 0
    seq: int = 0
    joiners: list = field(default_factory=list)
    wake: threading.Event | None = None
    host: threading.Thread | None = None


class _ThreadExit(BaseException):
    def __init__(self, value):
        self.value = value


class _ProcessExit(BaseException):
    def __init__(self, status):
        self.status = status


class _Terminated:
    pass


TERMINATED = _Terminated()


class VCpu:
    """The guest's single CPU, handed over in FIFO order."""

    def __init__(self):
        self._cv = threading.Condition()
        self._queue: collections.deque[int] = collections.deque()
        self.owner: int | None = None

    def acquire(self, tid: int) -> None:
        with self._cv:
            self._queue.append(tid)
            while self.owner is not None or self._queue[0] != tid:
                self._cv.wait()
            self._queue.popleft()
            self.owner = tid

    def release(self) -> None:
        with self._cv:
            self.owner = None
            self._cv.notify_all()

    @property
    def contended(self) -> bool:
        return bool(self._queue)


class _Mutex:
    __slots__ = ("owner", "waiters")

    def __init__(self):
        self.owner: int | None = None
        self.waiters: collections.deque[GuestThread] = collections.deque()


class GuestContext:
    """One user VM: memory image, threads, capabilities, control page."""

    _uvm_ids = itertools.count(1)

    def __init__(self, uvm_id: int | None = None, *, memory_bytes: int = DEFAULT_MEMORY_BYTES,
                 channel: Channel | None = None, strict_page_mode: bool = False,
                 bulk_timeout: float = DEFAULT_ACK_TIMEOUT, segment_bytes: int = 64 * 1024):
        if memory_bytes < HEAP_BASE + PAGE_SIZE:
            raise ValueError(f"guest memory must be at least {HEAP_BASE + PAGE_SIZE} bytes")
        self.uvm_id = next(self._uvm_ids) if uvm_id is None else uvm_id
        self.image = mmap.mmap(-1, memory_bytes)
        self.memory_bytes = memory_bytes
        self.channel = channel
        self.control_page = channel.page if channel is not None else ControlPage()
        self.strict_page_mode = strict_page_mode
        self.bulk_timeout = bulk_timeout
        self.segment_bytes = segment_bytes
        self.capabilities: set = set()
        self.regions: list[MemRegion] = []
        self.threads: dict[int, GuestThread] = {}
        self.cpu = VCpu()
        self.clock_base_ns = time.monotonic_ns()
        self.exit_status: int | None = None
        self.error: str | None = None
        self.terminated = False
        self.debug_log: list[str] = []
        self.recorded: list[tuple] = []  # (call, args) of recorded no-op calls
        self.call_counts: collections.Counter = collections.Counter()
        self.pmio_ports: dict[int, int] = {}
        self.bulk_log: list[tuple[Direction, int, int]] = []
        self._next_tid = itertools.count(0)
        self._mutexes: dict[int, _Mutex] = {}
        self._conds: dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self._pending: dict[tuple[int, int], queue.Queue] = {}
        self._pending_lock = threading.Lock()
        self._done = threading.Event()
        self._live = 0
        self._poller: threading.Thread | None = None
        self._handlers = self._build_handlers()

    # -- lifecycle --------------------------------------------------------

    def new_thread(self, entry: Callable, arg: Any = None) -> GuestThread:
        th = GuestThread(next(self._next_tid), entry, arg)
        self.threads[th.tid] = th
        self._live += 1
        th.host = threading.Thread(target=self._thread_main, args=(th,),
                                   name=f"uvm{self.uvm_id}-t{th.tid}", daemon=True)
        return th

    def start_poller(self) -> None:
        if self.channel is not None and self._poller is None:
            self._poller = threading.Thread(target=self._poll_loop,
                                            name=f"uvm{self.uvm_id}-poll", daemon=True)
            self._poller.start()

    def start(self, entry: Callable, arg: Any = None) -> GuestThread:
        """Spawn the initial user thread (tid 0) and the poll loop."""
        main = self.new_thread(entry, arg)
        self.start_poller()
        main.host.start()
        return main

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def run(self, entry: Callable, arg: Any = None, timeout: float | None = None) -> int:
        self.start(entry, arg)
        if not self.wait(timeout):
            self.terminate("run timeout")
            self.wait(5.0)
        self.shutdown()
        return self.exit_status

    def shutdown(self) -> None:
        """Tear the context down after its threads are gone."""
        if self.channel is not None:
            self.channel.close()
        else:
            self.control_page.teardown()
        if self._poller is not None:
            self._poller.join(5.0)

    def close(self) -> None:
        self.shutdown()
        if not self.image.closed:
            self.image.close()

    def terminate(self, reason: str = "terminated") -> None:
        """Abort the whole context; blocked calls fail with VmTerminated."""
        if self.terminated:
            return
        self.terminated = True
        if self.exit_status is None:
            self.exit_status = EXIT_TERMINATED
            self.error = self.error or "VmTerminated"
        log.debug("uvm %d terminated: %s", self.uvm_id, reason)
        for th in list(self.threads.values()):
            if th.wake is not None:
                th.wake.set()
        with self._pending_lock:
            for q in self._pending.values():
                q.put(TERMINATED)

    def _thread_main(self, th: GuestThread) -> None:
        self.cpu.acquire(th.tid)
        value = None
        try:
            if self.terminated:
                raise VmTerminated()
            from mksv.runtime.sys import GuestSys
            value = th.entry(GuestSys(self, th.tid), th.arg)
        except _ThreadExit as e:
            value = e.value
        except _ProcessExit:
            pass
        except VmTerminated:
            pass
        except KernelError as e:
            self._crash(type(e).__name__)
        except GuestError as e:
            self._crash(f"GuestError(errno={e.errno})")
        except Exception:
            self._crash(traceback.format_exc(limit=3))
        finally:
            th.state = ThreadState.EXITED
            th.exit_value = value
            th.waiting_on = None
            for joiner in th.joiners:
                joiner.wake.set()
            th.joiners.clear()
            if th.seq and not self.terminated:
                self._notify_retire(th)
            if th.tid == 0 and not self.terminated:
                # returning from main ends the process
                if self.exit_status is None:
                    self.exit_status = value if isinstance(value, int) else 0
                self.terminate("main returned")
            self._live -= 1
            last = self._live == 0
            self.cpu.release()
            if last:
                self._done.set()

    def _notify_retire(self, th: GuestThread) -> None:
        # only threads that talked to the peer announce their exit
        try:
            self.channel.guest_send(IkcFrame(FrameKind.COMMAND, self.uvm_id, th.tid,
                                             CallId.EXIT_THREAD, th.seq + 1))
        except VmTerminated:
            pass

    def _crash(self, what: str) -> None:
        if self.error is None:
            self.error = what
        if self.exit_status is None:
            self.exit_status = EXIT_CRASHED
        self.terminate("crash")

    # -- scheduling helpers ----------------------------------------------

    def _current(self, tid: int) -> GuestThread:
        th = self.threads.get(tid)
        if th is None or th.state is not ThreadState.RUNNABLE:
            raise GuestError(errno.ESRCH, f"tid {tid} is not runnable")
        if self.cpu.owner != tid:
            raise GuestError(errno.EPERM, f"tid {tid} does not hold the vcpu")
        return th

    def _block(self, th: GuestThread, reason: tuple, wait: Callable[[], Any]) -> Any:
        th.state = ThreadState.BLOCKED
        th.waiting_on = reason
        self.cpu.release()
        try:
            return wait()
        finally:
            self.cpu.acquire(th.tid)
            th.state = ThreadState.RUNNABLE
            th.waiting_on = None
            if self.terminated:
                raise VmTerminated()

    def _sleep_on_event(self, th: GuestThread, reason: tuple, timeout: float | None = None) -> bool:
        ev = th.wake = threading.Event()
        try:
            return self._block(th, reason, lambda: ev.wait(timeout))
        finally:
            th.wake = None

    def _preempt(self, th: GuestThread) -> None:
        if self.cpu.contended:
            self.cpu.release()
            self.cpu.acquire(th.tid)
            if self.terminated:
                raise VmTerminated()

    # -- kernel call entry ------------------------------------------------

    def kcall(self, tid: int, call_id: int, *args):
        if self.terminated:
            raise VmTerminated()
        th = self._current(tid)
        handler = self._handlers.get(call_id)
        if handler is None:
            raise UnknownCall(f"call 0x{int(call_id):04x}")
        self.call_counts[call_id] += 1
        result = handler(th, *args)
        self._preempt(th)
        return result

    def _build_handlers(self) -> dict[int, Callable]:
        C = CallId
        return {
            C.GETPID: lambda th: self.uvm_id,
            C.GETTID: lambda th: th.tid,
            C.EXIT: self._k_exit,
            C.EXIT_THREAD: self._k_exit_thread,
            C.JOIN_THREAD: self._k_join,
            C.CREATE_THREAD: self._k_create,
            C.YIELD: self._k_yield,
            C.SLEEP: self._k_sleep,
            C.MUTEX_LOCK: self._k_mutex_lock,
            C.MUTEX_UNLOCK: self._k_mutex_unlock,
            C.COND_WAIT: self._k_cond_wait,
            C.COND_SIGNAL: self._k_cond_signal,
            C.RESUME: self._k_resume,
            C.MMAP: self._k_mmap,
            C.MUNMAP: self._k_munmap,
            C.MCTRL: self._record(C.MCTRL),
            C.MCOPY: self._k_mcopy,
            C.CAPCTL: self._k_capctl,
            C.TERMINATE: self._k_terminate,
            C.SET_THREAD_DATA_AREA: self._k_set_tls,
            C.GET_THREAD_DATA_AREA: lambda th: th.tls,
            C.GETTIME: self._k_gettime,
            C.DEBUG: self._k_debug,
            C.MMIO_ALLOC: self._k_mmio_alloc,
            C.MMIO_FREE: self._k_mmio_free,
            C.MMIO_INFO: self._record(C.MMIO_INFO),
            C.PMIO_ALLOC: self._k_pmio_alloc,
            C.PMIO_FREE: self._k_pmio_free,
            C.PMIO_READ: self._k_pmio_read,
            C.PMIO_WRITE: self._k_pmio_write,
            C.SEND: self._k_send,
            C.RECV: self._k_recv,
            C.PUSH: self._k_push,
            C.PULL: self._k_pull,
        }

    def _record(self, call: CallId) -> Callable:
        def handler(th, *args):
            self.recorded.append((call, args))
            return 0
        return handler

    # -- process / thread -------------------------------------------------

    def _k_exit(self, th, status: int = 0):
        self.exit_status = status
        self.terminate("exit")
        raise _ProcessExit(status)

    def _k_exit_thread(self, th, value=None):
        raise _ThreadExit(value)

    def _k_create(self, th, entry: Callable, arg: Any = None) -> int:
        if not callable(entry):
            raise GuestError(errno.EINVAL, "thread entry is not callable")
        child = self.new_thread(entry, arg)
        child.host.start()
        return child.tid

    def _k_join(self, th, target: int):
        t = self.threads.get(target)
        if t is None or t.state is ThreadState.JOINED or target == th.tid:
            raise GuestError(errno.ESRCH if t is None else errno.EINVAL, f"cannot join {target}")
        while t.state is not ThreadState.EXITED:
            t.joiners.append(th)
            self._sleep_on_event(th, ("join", target))
        t.state = ThreadState.JOINED
        return t.exit_value

    # -- scheduling / sync ------------------------------------------------

    def _k_yield(self, th) -> int:
        self.cpu.release()
        self.cpu.acquire(th.tid)
        return 0

    def _k_sleep(self, th, nanoseconds: int) -> int:
        deadline = time.monotonic() + nanoseconds / 1e9
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return 0
            if self._sleep_on_event(th, ("sleep", deadline), remaining):
                return 0  # resumed early

    def _k_resume(self, th, target: int) -> int:
        t = self.threads.get(target)
        if t is None:
            raise GuestError(errno.ESRCH, f"no thread {target}")
        if t.waiting_on is None or t.waiting_on[0] != "sleep":
            raise GuestError(errno.EINVAL, f"thread {target} is not sleeping")
        t.wake.set()
        return 0

    def _mutex(self, mid: int) -> _Mutex:
        m = self._mutexes.get(mid)
        if m is None:
            m = self._mutexes[mid] = _Mutex()
        return m

    def _lock_mutex(self, th, mid: int) -> None:
        m = self._mutex(mid)
        if m.owner is None:
            m.owner = th.tid
            return
        if m.owner == th.tid:
            raise GuestError(errno.EDEADLK, f"mutex {mid} already held")
        m.waiters.append(th)
        while m.owner != th.tid:
            self._sleep_on_event(th, ("mutex", mid))

    def _unlock_mutex(self, th, mid: int) -> None:
        m = self._mutexes.get(mid)
        if m is None or m.owner != th.tid:
            raise GuestError(errno.EPERM, f"mutex {mid} not held")
        if m.waiters:
            nxt = m.waiters.popleft()
            m.owner = nxt.tid  # direct FIFO handoff
            nxt.wake.set()
        else:
            m.owner = None

    def _k_mutex_lock(self, th, mid: int) -> int:
        self._lock_mutex(th, mid)
        return 0

    def _k_mutex_unlock(self, th, mid: int) -> int:
        self._unlock_mutex(th, mid)
        return 0

    def _k_cond_wait(self, th, cid: int, mid: int) -> int:
        self._unlock_mutex(th, mid)
        entry = [th, False]
        self._conds[cid].append(entry)
        while not entry[1]:
            self._sleep_on_event(th, ("cond", cid))
        self._lock_mutex(th, mid)
        return 0

    def _k_cond_signal(self, th, cid: int) -> int:
        waiters = self._conds.get(cid)
        if waiters:
            entry = waiters.popleft()
            entry[1] = True
            entry[0].wake.set()
        return 0

    # -- memory -----------------------------------------------------------

    def _region_at(self, addr: int, n: int) -> MemRegion | None:
        for r in self.regions:
            if r.covers(addr, n):
                return r
        return None

    def check_access(self, addr: int, n: int, write: bool = False) -> MemRegion:
        r = self._region_at(addr, max(n, 1))
        if r is None:
            raise GuestError(errno.EFAULT, f"[{addr:#x}, +{n}) is not mapped")
        if write and not r.prot & PROT_WRITE:
            raise GuestError(errno.EACCES, f"region at {r.base:#x} is read-only")
        return r

    def map_region(self, length: int, prot: int = PROT_RW, kind: str = "anon") -> MemRegion:
        if length <= 0:
            raise GuestError(errno.EINVAL, "mmap length must be positive")
        length = -(-length // PAGE_SIZE) * PAGE_SIZE
        cursor = HEAP_BASE
        for r in sorted(self.regions, key=lambda r: r.base):
            if r.base - cursor >= length:
                break
            cursor = max(cursor, r.end)
        if cursor + length > self.memory_bytes:
            raise GuestError(errno.ENOMEM, f"no room for {length} bytes")
        region = MemRegion(cursor, length, prot, kind)
        self.regions.append(region)
        return region

    def _discard(self, r: MemRegion) -> None:
        self.regions.remove(r)
        # the image is a shared anonymous mapping, where DONTNEED keeps the
        # contents; REMOVE frees the backing pages so they read back as zero
        self.image.madvise(mmap.MADV_REMOVE, r.base, r.length)

    def _k_mmap(self, th, length: int, prot: int = PROT_RW) -> int:
        return self.map_region(length, prot).base

    def _k_munmap(self, th, base: int, length: int) -> int:
        length = -(-length // PAGE_SIZE) * PAGE_SIZE
        for r in self.regions:
            if r.base == base and r.length == length and r.kind == "anon":
                self._discard(r)
                return 0
        raise GuestError(errno.EINVAL, f"no mapping at {base:#x} of {length} bytes")

    def _k_mcopy(self, th, dst: int, src: int, n: int) -> int:
        self.check_access(src, n)
        self.check_access(dst, n, write=True)
        self.image[dst:dst + n] = self.image[src:src + n]
        return n

    # -- capabilities / process control ----------------------------------

    def _k_capctl(self, th, code: int = 0, arg: Any = None) -> int:
        self.recorded.append((CallId.CAPCTL, (code, arg)))
        self.capabilities.add((code, arg))
        return 0

    def _k_terminate(self, th, status: int = EXIT_TERMINATED):
        self.exit_status = status
        self.error = self.error or "VmTerminated"
        self.terminate("terminate call")
        raise VmTerminated("terminated by guest")

    # -- TLS / time / debug ----------------------------------------------

    def _k_set_tls(self, th, value: int) -> int:
        th.tls = value
        return 0

    def pv_clock_ns(self) -> int:
        now = time.monotonic_ns() - self.clock_base_ns
        # monotonic source, but keep the page value from ever going backwards
        now = max(now, self.control_page.pv_clock_ns)
        self.control_page.pv_clock_ns = now
        return now

    def _k_gettime(self, th) -> int:
        return self.pv_clock_ns()

    def _k_debug(self, th, message: str) -> int:
        self.debug_log.append(str(message))
        return 0

    # -- device I/O -------------------------------------------------------

    def _k_mmio_alloc(self, th, length: int) -> int:
        return self.map_region(length, PROT_RW, kind="mmio").base

    def _k_mmio_free(self, th, base: int) -> int:
        for r in self.regions:
            if r.base == base and r.kind == "mmio":
                self._discard(r)
                return 0
        raise GuestError(errno.EINVAL, f"no mmio window at {base:#x}")

    def _k_pmio_alloc(self, th, port: int) -> int:
        if not 0 <= port <= 0xFFFF or port in self.pmio_ports:
            raise GuestError(errno.EBUSY, f"port {port:#x} unavailable")
        self.pmio_ports[port] = 0
        return port

    def _k_pmio_free(self, th, port: int) -> int:
        if self.pmio_ports.pop(port, None) is None:
            raise GuestError(errno.EINVAL, f"port {port:#x} not allocated")
        return 0

    def _k_pmio_read(self, th, port: int) -> int:
        if port not in self.pmio_ports:
            raise GuestError(errno.EINVAL, f"port {port:#x} not allocated")
        return self.pmio_ports[port]

    def _k_pmio_write(self, th, port: int, value: int) -> int:
        if port not in self.pmio_ports:
            raise GuestError(errno.EINVAL, f"port {port:#x} not allocated")
        self.pmio_ports[port] = value & 0xFFFFFFFF
        return 0

    # -- remote calls -----------------------------------------------------

    def _poll_loop(self) -> None:
        while True:
            try:
                credit_consume(self.control_page)
            except VmTerminated:
                break
            frame = self.channel.guest_take()
            with self._pending_lock:
                q = self._pending.get((frame.thread_id, frame.seq))
            if q is None:
                log.warning("uvm %d: unmatched %s seq %d", self.uvm_id, frame.kind.name, frame.seq)
                continue
            q.put(frame)

    def _open_call(self, th: GuestThread, call_id: CallId, payload: bytes) -> tuple[int, queue.Queue]:
        if self.channel is None:
            raise BackendFailure(f"{call_id.name.lower()} needs a peer", errno=errno.ENOSYS)
        th.seq += 1
        seq = th.seq
        q: queue.Queue = queue.Queue()
        with self._pending_lock:
            self._pending[(th.tid, seq)] = q
        try:
            self.channel.guest_send(IkcFrame(FrameKind.CALL_REQUEST, self.uvm_id, th.tid,
                                             call_id, seq, 0, payload))
        except Exception:
            self._close_call(th, seq)
            raise
        return seq, q

    def _close_call(self, th: GuestThread, seq: int) -> None:
        with self._pending_lock:
            self._pending.pop((th.tid, seq), None)

    def _await(self, th: GuestThread, seq: int, q: queue.Queue, kind: FrameKind,
               timeout: float | None = None) -> IkcFrame:
        def wait():
            try:
                return q.get(timeout=timeout)
            except queue.Empty:
                return None
        item = self._block(th, ("remote", seq), wait)
        if item is TERMINATED:
            raise VmTerminated("terminated during remote call")
        if item is None:
            raise KernelTimeout(f"no {kind.name} for seq {seq}")
        if item.kind != kind:
            if item.kind == FrameKind.CALL_RESPONSE and item.status:
                raise self._status_error(item)
            raise KernelError(f"expected {kind.name}, got {item.kind.name}")
        return item

    @staticmethod
    def _status_error(frame: IkcFrame) -> KernelError:
        errno_value = split_u32(frame.payload)[0] if len(frame.payload) >= 4 else None
        return error_for_status(frame.status, f"remote {frame.call_id.name.lower()} failed",
                                errno_value)

    def _finish(self, th: GuestThread, seq: int, q: queue.Queue) -> bytes:
        try:
            resp = self._await(th, seq, q, FrameKind.CALL_RESPONSE)
        finally:
            self._close_call(th, seq)
        if resp.status:
            raise self._status_error(resp)
        return resp.payload

    def _k_send(self, th, payload: bytes) -> bytes:
        if len(payload) > INLINE_CAPACITY:
            raise PayloadTooLarge(f"send payload {len(payload)} > {INLINE_CAPACITY}")
        seq, q = self._open_call(th, CallId.SEND, bytes(payload))
        return self._finish(th, seq, q)

    def _k_recv(self, th, max_len: int = INLINE_CAPACITY) -> bytes:
        seq, q = self._open_call(th, CallId.RECV, u32(min(max_len, INLINE_CAPACITY)))
        return self._finish(th, seq, q)

    def _descriptor(self, direction: Direction, segments) -> BulkDescriptor:
        desc = bulk_prepare(direction, segments, self.strict_page_mode, self.memory_bytes)
        self.bulk_log.append((direction, len(desc.segments), desc.total_len))
        for off, n in desc.segments:
            self.check_access(off, n, write=direction is Direction.PULL)
        return desc

    def _k_push(self, th, segments, header: bytes = b"") -> bytes:
        desc = self._descriptor(Direction.PUSH, segments)
        seq, q = self._open_call(th, CallId.PUSH, u32(desc.total_len) + header)
        link = _GuestLink(self, th, seq, q)
        try:
            bulk_transfer(desc, self.image, link, self.bulk_timeout)
        except BaseException:
            self._close_call(th, seq)
            raise
        return self._finish(th, seq, q)

    def _k_pull(self, th, segments, header: bytes = b"") -> int:
        desc = self._descriptor(Direction.PULL, segments)
        seq, q = self._open_call(th, CallId.PULL, u32(desc.total_len) + header)
        link = _GuestLink(self, th, seq, q)
        try:
            placed = bulk_transfer(desc, self.image, link, self.bulk_timeout)
        except BaseException:
            self._close_call(th, seq)
            raise
        self._finish(th, seq, q)
        return placed


class _GuestLink:
    """Guest end of a bulk rendezvous, carried over the context's channel."""

    def __init__(self, ctx: GuestContext, th: GuestThread, seq: int, q: queue.Queue):
        self.ctx, self.th, self.seq, self.q = ctx, th, seq, q

    def deliver(self, data: bytes) -> None:
        self.ctx.channel.stage((TO_PEER, self.th.tid, self.seq), data)

    def wait_ack(self, timeout: float | None) -> bool:
        try:
            self.ctx._await(self.th, self.seq, self.q, FrameKind.BULK_COMPLETE, timeout)
        except KernelTimeout:
            return False
        return True

    def receive(self, timeout: float | None) -> bytes:
        ready = self.ctx._await(self.th, self.seq, self.q, FrameKind.BULK_READY, timeout)
        n, _ = split_u32(ready.payload)
        data = self.ctx.channel.take_staged((TO_GUEST, self.th.tid, self.seq), timeout)
        assert len(data) == n
        return data

    def acknowledge(self) -> None:
        self.ctx.channel.guest_send(IkcFrame(FrameKind.BULK_COMPLETE, self.ctx.uvm_id,
                                             self.th.tid, CallId.PULL, self.seq))


def kcall(ctx: GuestContext, tid: int, call_id: int, args=()):
    """Functional entry point: ``ctx.kcall(tid, call_id, *args)``."""
    return ctx.kcall(tid, call_id, *args)
