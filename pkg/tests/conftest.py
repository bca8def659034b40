import pytest

from mksv.ikc.channel import Channel
from mksv.runtime.kernel import GuestContext
from mksv.service.service import TenantService

_ACCEPTANCE_LINES: list[str] = []


def run_attached(service: TenantService, entry, arg=None, *, timeout: float = 60.0,
                 dump=None, unregister: bool = True, **ctx_kw):
    """Run ``entry`` in a fresh guest context registered with ``service``.

    Returns (ctx, handle). The context is shut down but its image stays open
    so callers can inspect guest memory; call ``ctx.close()`` when done.
    """
    channel = Channel(dump=dump)
    ctx = GuestContext(channel=channel, **ctx_kw)
    handle, _port = service.register_uvm(ctx.uvm_id, channel)
    ctx.run(entry, arg, timeout)
    if unregister:
        service.unregister_uvm(ctx.uvm_id)
    return ctx, handle


@pytest.fixture
def echo_service():
    svc = TenantService(backend="echo", trace=True).overlay("t-echo")
    yield svc
    svc.shutdown()


@pytest.fixture
def host_service(tmp_path):
    svc = TenantService(backend="host").overlay("t-host", tmp_path / "svc")
    yield svc
    svc.shutdown()


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    label = props.get("criterion")
    if label is None:
        return
    verdict = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE_LINES.append(f"[{verdict}] {label}: {props.get('detail', '')}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
