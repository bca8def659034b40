"""User-VM boot path, guest program registry and the standalone stdio peer.

A boot walks ten timed phases and runs the program to completion. The phase
names are fixed so reports from different modes line up.
"""

from __future__ import annotations

import errno
import functools
import logging
import queue
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from mksv import ops
from mksv.errors import BackendFailure, BadFrame
from mksv.ikc.bulk import DEFAULT_ACK_TIMEOUT
from mksv.ikc.channel import Channel, FrameDump, PeerSession, u32
from mksv.ikc.frames import PAGE_SIZE, CallId, IkcFrame
from mksv.runtime.kernel import (DEFAULT_MEMORY_BYTES, INITRD_BASE, KERNEL_BASE, PROT_READ,
                                 GuestContext, MemRegion)
from mksv.runtime.posix import STDIN, STDOUT

log = logging.getLogger(__name__)

PHASES = (
    "channel_setup", "partition_create", "vmem_create", "vcpu_create", "kernel_load",
    "initrd_load", "vcpu_reset", "thread_spawn", "guest_exec", "exit_handling",
)

KERNEL_IMAGE_BYTES = int(1.3 * 1024 * 1024)
DEFAULT_INITRD_BYTES = 45 * 1024
MAX_INITRD_BYTES = 64 * 1024
STACK_BYTES = 64 * 1024

STDIO_MODES = ("gateway", "inline", "none")
MODES = ("standalone", "attached")


class ImageError(BadFrame):
    """Program image failed validation."""


@dataclass
class BootPhaseReport:
    phases: list[tuple[str, float]] = field(default_factory=list)

    @property
    def total_us(self) -> float:
        return sum(us for _, us in self.phases)

    def names(self) -> list[str]:
        return [name for name, _ in self.phases]

    def to_dict(self) -> dict:
        return {"phases": [{"name": n, "us": us} for n, us in self.phases],
                "total_us": self.total_us}


# -- program images --------------------------------------------------------

@dataclass(frozen=True)
class ProgramManifest:
    name: str
    entry: str = "main"
    argv: tuple[str, ...] = ()
    stdio: str = "gateway"


@dataclass(frozen=True)
class ProgramImage:
    manifest: ProgramManifest
    payload: Callable
    initrd: bytes = b""


Program = Callable  # (GuestSys, arg) -> exit value

_PROGRAMS: dict[str, Program] = {}
_PARAMETRIC: list[tuple[re.Pattern, Callable[..., Program]]] = []


def register_program(name: str):
    def deco(fn):
        _PROGRAMS[name] = fn
        return fn
    return deco


def resolve_program(name: str) -> Program:
    if name in _PROGRAMS:
        return _PROGRAMS[name]
    for pattern, factory in _PARAMETRIC:
        m = pattern.fullmatch(name)
        if m:
            return factory(*m.groups())
    raise ImageError(f"no program named {name!r}")


def program_names() -> list[str]:
    return sorted(_PROGRAMS) + [p.pattern for p, _ in _PARAMETRIC]


def load_image(manifest: ProgramManifest | str, initrd: bytes | None = None) -> ProgramImage:
    if isinstance(manifest, str):
        manifest = ProgramManifest(manifest)
    if not manifest.name:
        raise ImageError("manifest has no name")
    if manifest.stdio not in STDIO_MODES:
        raise ImageError(f"unknown stdio mode {manifest.stdio!r}")
    if manifest.entry != "main":
        raise ImageError(f"entry symbol {manifest.entry!r} not found")
    if initrd is None:
        initrd = _blob(DEFAULT_INITRD_BYTES)
    if len(initrd) > MAX_INITRD_BYTES:
        raise ImageError(f"initrd of {len(initrd)} bytes exceeds {MAX_INITRD_BYTES}")
    return ProgramImage(manifest, resolve_program(manifest.name), bytes(initrd))


@functools.lru_cache(maxsize=4)
def _blob(size: int) -> bytes:
    pattern = bytes(range(256))
    return (pattern * (size // 256 + 1))[:size]


# -- built-in programs -----------------------------------------------------

@register_program("echo")
def echo(sys, arg=None) -> int:
    """Copy stdin to stdout until EOF."""
    px = sys.posix
    buf = sys.alloc(PAGE_SIZE)
    while True:
        n = px.read(STDIN, buf, PAGE_SIZE)
        if n == 0:
            return 0
        px.write(STDOUT, buf, n)


@register_program("echo-framed")
def echo_framed(sys, arg=None) -> int:
    """Echo length-prefixed messages: u32 length then that many bytes."""
    px = sys.posix
    hdr = sys.alloc(PAGE_SIZE)
    buf, cap = 0, 0
    while True:
        if px.read_exact(STDIN, hdr, 4) < 4:
            return 0
        (length,) = struct.unpack("<I", sys.load(hdr, 4))
        if length > cap:
            if cap:
                sys.kcall(CallId.MUNMAP, buf, cap)
            cap = -(-length // PAGE_SIZE) * PAGE_SIZE
            buf = sys.alloc(cap)
        got = px.read_exact(STDIN, buf, length)
        px.write(STDOUT, hdr, 4)
        if got:
            px.write(STDOUT, buf, got)
        if got < length:
            return 0


def _sleep_program(ms: str) -> Program:
    delay_ns = int(ms) * 1_000_000

    def sleep(sys, arg=None) -> int:
        sys.posix.nanosleep(delay_ns)
        return 0
    return sleep


_PARAMETRIC.append((re.compile(r"sleep-(\d+)"), _sleep_program))


@register_program("io-heavy")
def io_heavy(sys, arg=None) -> int:
    """Write, read back and verify a 64 KiB file under /tenant."""
    px = sys.posix
    size = 64 * 1024
    src, dst = sys.alloc(size), sys.alloc(size)
    sys.store(src, _blob(size))
    fd = px.open(f"/tenant/io-{sys.kcall(CallId.GETPID)}.dat",
                 ops.O_RDWR | ops.O_CREAT | ops.O_TRUNC)
    px.write(fd, src, size)
    px.lseek(fd, 0)
    got = px.read_exact(fd, dst, size)
    px.close(fd)
    ok = got == size and sys.load(dst, size) == sys.load(src, size)
    msg = b"ok\n" if ok else b"mismatch\n"
    sys.store(src, msg)
    px.write(STDOUT, src, len(msg))
    return 0 if ok else 3


@register_program("hello")
def hello(sys, arg=None) -> int:
    msg = b"hello\n"
    buf = sys.alloc(len(msg))
    sys.store(buf, msg)
    sys.posix.write(STDOUT, buf, len(msg))
    return 0


# -- standalone supervisor peer -------------------------------------------

class StdioBridge(Protocol):
    def read(self, n: int) -> bytes: ...

    def write(self, data: bytes) -> int: ...


class BufferBridge:
    """Stdin from a byte string, stdout/stderr collected in memory."""

    def __init__(self, stdin: bytes = b""):
        self._stdin = memoryview(bytes(stdin))
        self._pos = 0
        self.output = bytearray()
        self.first_output_ns: int | None = None

    def read(self, n: int) -> bytes:
        chunk = bytes(self._stdin[self._pos:self._pos + n])
        self._pos += len(chunk)
        return chunk

    def write(self, data: bytes) -> int:
        if self.first_output_ns is None:
            self.first_output_ns = time.perf_counter_ns()
        self.output += data
        return len(data)


def serve_stdio(bridge: StdioBridge, call_id: CallId, header: bytes,
                data: bytes | None, capacity: int | None) -> bytes:
    """Execute a remote call that may only touch standard I/O."""
    if call_id == CallId.RECV:
        (n,) = struct.unpack("<I", header[:4])
        return bridge.read(n)
    req = ops.decode(header)
    if req.op is ops.Op.WRITE and req.fd in (1, 2):
        return u32(bridge.write(req.data if data is None else data))
    if req.op is ops.Op.READ and req.fd == STDIN:
        n = req.count if capacity is None else min(req.count, capacity)
        return bridge.read(n)
    if req.op is ops.Op.CLOCK:
        return struct.pack("<Q", time.time_ns())
    raise BackendFailure(f"{req.op.name.lower()} needs a system service", errno=errno.ENOSYS)


class StdioEndpoint:
    """Peer for a standalone user VM: stdio only, one worker per guest thread."""

    def __init__(self, channel: Channel, uvm_id: int, bridge: StdioBridge,
                 ack_timeout: float = DEFAULT_ACK_TIMEOUT):
        self.bridge = bridge
        self.session = PeerSession(channel, uvm_id, self._on_request, ack_timeout, "stdio",
                                   on_command=lambda frame: None)
        self._queues: dict[int, queue.Queue] = {}
        self._lock = threading.Lock()

    def start(self) -> "StdioEndpoint":
        self.session.start()
        return self

    def _on_request(self, frame: IkcFrame) -> None:
        with self._lock:
            q = self._queues.get(frame.thread_id)
            if q is None:
                q = self._queues[frame.thread_id] = queue.Queue()
                threading.Thread(target=self._worker, args=(q,), daemon=True,
                                 name=f"stdio-{frame.uvm_id}-{frame.thread_id}").start()
        q.put(frame)

    def _worker(self, q: queue.Queue) -> None:
        while True:
            frame = q.get()
            if frame is None:
                return
            self.session.serve(frame, functools.partial(serve_stdio, self.bridge))

    def stop(self) -> None:
        with self._lock:
            for q in self._queues.values():
                q.put(None)
        self.session.join(5.0)


# -- boot -----------------------------------------------------------------

@dataclass
class BootOptions:
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    kernel_bytes: int = KERNEL_IMAGE_BYTES
    strict_page_mode: bool = False
    segment_bytes: int = 64 * 1024
    bulk_timeout: float = DEFAULT_ACK_TIMEOUT
    run_timeout: float | None = 60.0


# attach(uvm_id, channel) is called during channel_setup and must start a peer
Attach = Callable[[int, Channel], object]


class _Clock:
    def __init__(self, report: BootPhaseReport):
        self.report = report
        self.t = time.perf_counter_ns()

    def lap(self, name: str) -> None:
        now = time.perf_counter_ns()
        self.report.phases.append((name, (now - self.t) / 1000.0))
        self.t = now


def boot(image: ProgramImage | ProgramManifest | str, mode: str = "standalone", *,
         attach: Attach | None = None, bridge: StdioBridge | None = None,
         options: BootOptions | None = None, uvm_id: int | None = None,
         dump: FrameDump | None = None, arg=None,
         on_context: Callable[[GuestContext], None] | None = None
         ) -> tuple[GuestContext, BootPhaseReport]:
    """Create a user VM through the ten phases and run its program to completion.

    ``standalone`` serves stdio from ``bridge`` (default: empty stdin, output
    kept in memory). ``attached`` hands the channel to ``attach``, which is
    expected to register it with a system service.
    """
    if mode not in MODES:
        raise ValueError(f"unknown boot mode {mode!r}")
    if mode == "attached" and attach is None:
        raise ValueError("attached boot needs an attach callback")
    if not isinstance(image, ProgramImage):
        image = load_image(image)
    opts = options or BootOptions()
    if uvm_id is None:
        uvm_id = next(GuestContext._uvm_ids)

    report = BootPhaseReport()
    clock = _Clock(report)

    channel = Channel(dump=dump)
    endpoint = None
    if mode == "standalone":
        endpoint = StdioEndpoint(channel, uvm_id, bridge or BufferBridge(),
                                 opts.bulk_timeout).start()
    else:
        attach(uvm_id, channel)
    clock.lap("channel_setup")

    ctx = GuestContext(uvm_id, memory_bytes=opts.memory_bytes, channel=channel,
                       strict_page_mode=opts.strict_page_mode, bulk_timeout=opts.bulk_timeout,
                       segment_bytes=opts.segment_bytes)
    ctx.argv = list(image.manifest.argv)
    ctx.stdio_endpoint = endpoint
    if on_context is not None:
        on_context(ctx)
    clock.lap("partition_create")

    kernel_len = -(-opts.kernel_bytes // PAGE_SIZE) * PAGE_SIZE
    if KERNEL_BASE + kernel_len > INITRD_BASE:
        raise ImageError("kernel image overlaps the initrd window")
    ctx.regions.append(MemRegion(KERNEL_BASE, kernel_len, PROT_READ, "kernel"))
    if image.initrd:
        ctx.regions.append(MemRegion(INITRD_BASE, MAX_INITRD_BYTES, PROT_READ, "initrd"))
    clock.lap("vmem_create")

    ctx.start_poller()
    clock.lap("vcpu_create")

    ctx.image[KERNEL_BASE:KERNEL_BASE + opts.kernel_bytes] = _blob(opts.kernel_bytes)
    clock.lap("kernel_load")

    ctx.image[INITRD_BASE:INITRD_BASE + len(image.initrd)] = image.initrd
    clock.lap("initrd_load")

    ctx.clock_base_ns = time.monotonic_ns()
    ctx.control_page.pv_clock_ns = 0
    ctx.map_region(STACK_BYTES, kind="stack")
    clock.lap("vcpu_reset")

    main = ctx.new_thread(image.payload, arg)
    clock.lap("thread_spawn")

    main.host.start()
    if not ctx.wait(opts.run_timeout):
        ctx.error = ctx.error or "Timeout"
        ctx.terminate("run timeout")
        ctx.wait(5.0)
    clock.lap("guest_exec")

    ctx.shutdown()
    if endpoint is not None:
        endpoint.stop()
    clock.lap("exit_handling")
    return ctx, report
