import errno
import struct

import pytest
from hypothesis import given, settings, strategies as st

from mksv import ops
from mksv.errors import BadFrame
from mksv.ikc.frames import PAGE_SIZE, CallId
from mksv.runtime.boot import PHASES, BufferBridge, ImageError, ProgramManifest, boot, \
    load_image, program_names
from mksv.runtime.kernel import EXIT_CRASHED, EXIT_TERMINATED, HEAP_BASE, GuestContext
from mksv.runtime.posix import segments

from conftest import run_attached


def run_local(entry, arg=None, **kw):
    ctx = GuestContext(**kw)
    ctx.run(entry, arg, timeout=20)
    ctx.close()
    return ctx


# -- process and thread lifecycle -----------------------------------------

def test_main_return_value_is_exit_status():
    assert run_local(lambda sys, a: 7).exit_status == 7


def test_exit_call_ends_every_thread():
    def prog(sys, _):
        sys.posix.pthread_create(lambda s, a: s.kcall(CallId.SLEEP, 10**10))
        sys.kcall(CallId.EXIT, 3)
        return 99

    ctx = run_local(prog)
    assert ctx.exit_status == 3 and ctx.error is None


def test_terminate_call():
    ctx = run_local(lambda sys, a: sys.kcall(CallId.TERMINATE))
    assert ctx.exit_status == EXIT_TERMINATED and ctx.error == "VmTerminated"


def test_unknown_call_crashes_the_guest():
    ctx = run_local(lambda sys, a: sys.kcall(0x7F))
    assert ctx.exit_status == EXIT_CRASHED and ctx.error == "UnknownCall"


def test_join_returns_thread_value_and_exit_thread_value():
    def prog(sys, _):
        a = sys.posix.pthread_create(lambda s, x: x * 2, 21)
        b = sys.posix.pthread_create(lambda s, x: s.kcall(CallId.EXIT_THREAD, "early"))
        return 0 if (sys.posix.pthread_join(a), sys.posix.pthread_join(b)) == (42, "early") else 1

    assert run_local(prog).exit_status == 0


def test_join_twice_is_an_error():
    def prog(sys, _):
        t = sys.posix.pthread_create(lambda s, a: 0)
        sys.posix.pthread_join(t)
        sys.posix.pthread_join(t)

    assert run_local(prog).error == f"GuestError(errno={errno.EINVAL})"


def test_mutex_serializes_and_hands_off_fifo():
    order = []

    def worker(sys, k):
        for _ in range(50):
            sys.posix.pthread_mutex_lock(1)
            v = sys.ctx.counter
            sys.kcall(CallId.YIELD)
            sys.ctx.counter = v + 1
            order.append(k)
            sys.posix.pthread_mutex_unlock(1)
        return 0

    def prog(sys, _):
        sys.ctx.counter = 0
        tids = [sys.posix.pthread_create(worker, k) for k in range(4)]
        for t in tids:
            sys.posix.pthread_join(t)
        return 0 if sys.ctx.counter == 200 else 1

    assert run_local(prog).exit_status == 0
    assert len(order) == 200


def test_unlock_of_unheld_mutex_is_eperm():
    ctx = run_local(lambda sys, a: sys.posix.pthread_mutex_unlock(5))
    assert ctx.error == f"GuestError(errno={errno.EPERM})"


def test_cond_wait_and_signal():
    def waiter(sys, _):
        px = sys.posix
        px.pthread_mutex_lock(1)
        while not sys.ctx.flag:
            px.pthread_cond_wait(9, 1)
        px.pthread_mutex_unlock(1)
        return "woke"

    def prog(sys, _):
        px = sys.posix
        sys.ctx.flag = False
        t = px.pthread_create(waiter)
        px.nanosleep(5_000_000)
        px.pthread_mutex_lock(1)
        sys.ctx.flag = True
        px.pthread_cond_signal(9)
        px.pthread_mutex_unlock(1)
        return 0 if px.pthread_join(t) == "woke" else 1

    assert run_local(prog).exit_status == 0


def test_resume_wakes_a_sleeper_early():
    def sleeper(sys, _):
        t0 = sys.kcall(CallId.GETTIME)
        sys.kcall(CallId.SLEEP, 30 * 10**9)
        return sys.kcall(CallId.GETTIME) - t0

    def prog(sys, _):
        t = sys.posix.pthread_create(sleeper)
        while sys.ctx.threads[t].waiting_on is None:
            sys.kcall(CallId.YIELD)
        sys.kcall(CallId.RESUME, t)
        return 0 if sys.posix.pthread_join(t) < 5 * 10**9 else 1

    assert run_local(prog).exit_status == 0


def test_clock_is_monotonic():
    def prog(sys, _):
        last = -1
        for _ in range(1000):
            now = sys.kcall(CallId.GETTIME)
            if now < last:
                return 1
            last = now
        return 0

    assert run_local(prog).exit_status == 0


# -- memory -----------------------------------------------------------------

def test_mmap_layout_and_munmap_zeroes():
    def prog(sys, _):
        a = sys.kcall(CallId.MMAP, 1)
        b = sys.kcall(CallId.MMAP, PAGE_SIZE + 1)
        sys.store(a, b"dirty")
        sys.kcall(CallId.MUNMAP, a, 1)
        c = sys.kcall(CallId.MMAP, PAGE_SIZE)
        return (a, b, c, sys.load(c, 5))

    box = []
    run_local(lambda sys, arg: box.append(prog(sys, arg)))
    a, b, c, data = box[0]
    assert b == a + PAGE_SIZE and c == a and data == b"\0" * 5
    assert a >= HEAP_BASE and a % PAGE_SIZE == 0


def test_unmapped_access_faults():
    ctx = run_local(lambda sys, a: sys.load(0x10, 4))
    assert ctx.error == f"GuestError(errno={errno.EFAULT})"


def test_kernel_region_is_read_only_after_boot():
    def prog(sys, _):
        sys.store(0x100000, b"x")

    ctx, _ = boot(load_image("hello"), "standalone", bridge=BufferBridge())
    ctx.close()
    from mksv.runtime.kernel import PROT_READ
    assert any(r.kind == "kernel" and r.prot == PROT_READ for r in ctx.regions)


def test_out_of_memory():
    ctx = run_local(lambda sys, a: sys.kcall(CallId.MMAP, 1 << 30))
    assert ctx.error == f"GuestError(errno={errno.ENOMEM})"


def test_mcopy_and_pmio_and_capctl_and_debug():
    def prog(sys, _):
        a = sys.alloc(PAGE_SIZE)
        sys.store(a, b"abc")
        sys.kcall(CallId.MCOPY, a + 100, a, 3)
        port = sys.kcall(CallId.PMIO_ALLOC, 0x3F8)
        sys.kcall(CallId.PMIO_WRITE, port, 0x1_0000_0041)
        sys.kcall(CallId.CAPCTL, 2, "net")
        sys.kcall(CallId.DEBUG, "hi")
        return 0 if sys.load(a + 100, 3) == b"abc" and sys.kcall(CallId.PMIO_READ, port) == 0x41 \
            else 1

    ctx = run_local(prog)
    assert ctx.exit_status == 0
    assert (2, "net") in ctx.capabilities and ctx.debug_log == ["hi"]


def test_local_calls_without_channel_need_no_peer():
    ctx = run_local(lambda sys, a: [sys.kcall(CallId.GETPID) for _ in range(100)] and 0)
    assert ctx.exit_status == 0 and ctx.channel is None


def test_remote_call_without_channel_fails():
    ctx = run_local(lambda sys, a: sys.kcall(CallId.SEND, b"x"))
    assert ctx.exit_status == EXIT_CRASHED and ctx.error == "BackendFailure"


# -- segmenting and marshaling ---------------------------------------------

@given(st.integers(0, 1 << 20), st.integers(1, 300_000), st.integers(1, 70_000))
def test_segments_tile_the_buffer(addr, count, seg):
    segs = segments(addr, count, seg)
    assert sum(n for _, n in segs) == count
    assert segs[0][0] == addr
    assert all(a + n == b for (a, n), (b, _) in zip(segs, segs[1:]))
    assert all(0 < n <= seg for _, n in segs)


requests = st.one_of(
    st.builds(ops.Request, op=st.just(ops.Op.OPEN), flags=st.integers(0, 2**32 - 1),
              mode=st.integers(0, 2**32 - 1), path=st.text(max_size=40)),
    st.builds(ops.Request, op=st.sampled_from([ops.Op.READ, ops.Op.SOCK_RECV]),
              fd=st.integers(0, 2**32 - 1), count=st.integers(0, 2**32 - 1)),
    st.builds(ops.Request, op=st.sampled_from([ops.Op.WRITE, ops.Op.SOCK_SEND]),
              fd=st.integers(0, 2**32 - 1), data=st.binary(max_size=64)),
    st.builds(ops.Request, op=st.just(ops.Op.CLOSE), fd=st.integers(0, 2**32 - 1)),
    st.builds(ops.Request, op=st.just(ops.Op.LSEEK), fd=st.integers(0, 2**32 - 1),
              offset=st.integers(-2**63, 2**63 - 1), whence=st.integers(0, 2)),
    st.builds(ops.Request, op=st.just(ops.Op.CLOCK), clock_id=st.integers(0, 7)),
    st.builds(ops.Request, op=st.just(ops.Op.CONNECT), port=st.integers(0, 65535),
              host=st.text(max_size=30)),
)


@given(requests)
def test_op_marshaling_roundtrip(req):
    assert ops.decode(ops.encode(req)) == req


@pytest.mark.parametrize("raw", [b"", b"\x00", b"\x0a", b"\x01\x00", b"\x05\x01\x00\x00\x00",
                                 b"\x01" + struct.pack("<IIH", 0, 0, 10) + b"short"])
def test_op_decode_rejects_garbage(raw):
    with pytest.raises(BadFrame):
        ops.decode(raw)


# -- standalone boot and the POSIX shim ------------------------------------

@pytest.mark.parametrize("size", [0, 1, 192, 4096, 70_000])
def test_standalone_echo(size):
    data = bytes((i * 13) & 0xFF for i in range(size))
    bridge = BufferBridge(data)
    ctx, report = boot("echo", "standalone", bridge=bridge)
    ctx.close()
    assert ctx.exit_status == 0, ctx.error
    assert bytes(bridge.output) == data
    assert report.names() == list(PHASES)
    assert report.total_us == pytest.approx(sum(us for _, us in report.phases))


def test_standalone_echo_framed_uses_bulk_above_inline_size():
    msg = b"z" * 5000
    bridge = BufferBridge(struct.pack("<I", len(msg)) + msg)
    ctx, _ = boot("echo-framed", "standalone", bridge=bridge)
    ctx.close()
    assert bytes(bridge.output)[4:] == msg
    assert ctx.bulk_log, "a 5000-byte message should travel through push/pull"


def test_standalone_file_io_is_enosys():
    ctx, _ = boot("io-heavy", "standalone", bridge=BufferBridge())
    ctx.close()
    assert ctx.exit_status == EXIT_CRASHED and ctx.error == "BackendFailure"


def test_sleep_program_is_parametric():
    ctx, report = boot("sleep-20", "standalone")
    ctx.close()
    assert dict(report.phases)["guest_exec"] >= 20_000
    assert "sleep-(\\d+)" in program_names()


@pytest.mark.parametrize("manifest", [
    ProgramManifest("no-such-program"), ProgramManifest(""),
    ProgramManifest("echo", entry="start"), ProgramManifest("echo", stdio="tty"),
])
def test_image_validation(manifest):
    with pytest.raises(ImageError):
        load_image(manifest)


def test_oversized_initrd_rejected():
    with pytest.raises(ImageError):
        load_image("echo", initrd=b"\0" * (64 * 1024 + 1))


def test_unsupported_posix_call_is_enosys():
    ctx = run_local(lambda sys, a: sys.posix.call("fork"))
    assert ctx.error == f"GuestError(errno={errno.ENOSYS})"


# -- attached to a service --------------------------------------------------

def _posix_roundtrip(sys, n):
    px = sys.posix
    buf = sys.alloc(max(n, 1))
    sys.store(buf, bytes(range(256)) * (n // 256) + bytes(range(n % 256)))
    return 0 if px.write(1, buf, n) == n else 1


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 20_000))
def test_attached_write_is_inline_or_bulk_by_marshaled_size(tmp_path_factory, n):
    from mksv.service.service import TenantService
    svc = TenantService(backend="host").overlay("t-prop", tmp_path_factory.mktemp("svc"))
    try:
        ctx, _ = run_attached(svc, _posix_roundtrip, n)
        ctx.close()
    finally:
        svc.shutdown()
    assert ctx.exit_status == 0, ctx.error
    inline = ops.DATA_HEADER_LEN + n <= 192
    assert bool(ctx.bulk_log) is not inline
    assert ctx.call_counts[CallId.SEND if inline else CallId.PUSH] == 1
