"""Lifecycle manager: tenant services, user-VM spawning, deployment modes."""

from __future__ import annotations

import enum
import itertools
import logging
import math
import shutil
import socket
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from mksv.config import Settings
from mksv.control.pools import NamespaceToken, PoolEmpty, ResourcePool, namespace_factory
from mksv.runtime.boot import (PHASES, BootOptions, BootPhaseReport, BufferBridge, boot,
                               load_image)
from mksv.runtime.kernel import GuestContext
from mksv.service.admin import AdminServer
from mksv.service.filter import FilterPolicy
from mksv.service.gateway import Gateway
from mksv.service.service import TenantService

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    SHARED = "shared"
    ONE_TO_ONE = "one-to-one"
    STANDALONE = "standalone"


class PlaneClosed(Exception):
    pass


@dataclass(frozen=True)
class InvocationRequest:
    tenant_id: str
    function: str
    mode: Mode = Mode.SHARED
    payload: bytes | None = None  # None: the client talks to the gateway port
    argv: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.tenant_id:
            raise ValueError("tenant_id must be non-empty")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass
class InvocationResult:
    request_id: int
    tenant_id: str
    function: str
    mode: Mode
    uvm_id: int | None = None
    exit_status: int | None = None
    error: str | None = None
    output: bytes | None = None
    port: int | None = None
    service_acquire_ms: float = 0.0
    uvm_boot_ms: float = 0.0
    first_byte_ms: float | None = None
    completion_ms: float = 0.0
    service_created: bool = False
    acquire_work: dict = field(default_factory=dict)
    boot: BootPhaseReport | None = None
    frames: int = 0
    bulk_log: list = field(default_factory=list)  # (direction, segments, bytes) per bulk transfer

    @property
    def ok(self) -> bool:
        return self.error is None and self.exit_status == 0

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "tenant_id": self.tenant_id,
            "function": self.function,
            "mode": self.mode.value,
            "uvm_id": self.uvm_id,
            "exit_status": self.exit_status,
            "error": self.error,
            "port": self.port,
            "output": None if self.output is None else self.output.decode("utf-8", "replace"),
            "output_len": None if self.output is None else len(self.output),
            "phases": {"service_acquire_ms": self.service_acquire_ms,
                       "uvm_boot_ms": self.uvm_boot_ms,
                       "first_byte_ms": self.first_byte_ms,
                       "completion_ms": self.completion_ms},
            "service_created": self.service_created,
            "acquire_work": dict(self.acquire_work),
            "boot": self.boot.to_dict() if self.boot else None,
            "frames": self.frames,
            "bulk_transfers": len(self.bulk_log),
        }


@dataclass
class TenantSlot:
    tenant_id: str
    service: TenantService | None = None
    admin: AdminServer | None = None
    token: NamespaceToken | None = None
    live_uvms: int = 0
    deadline: float = math.inf
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def live(self) -> bool:
        return self.service is not None


_NO_WORK = {"services_constructed": 0, "templates_acquired": 0, "tokens_acquired": 0,
            "refills_triggered": 0}


class _Client(threading.Thread):
    """Feeds an inline payload through a gateway and collects the reply."""

    def __init__(self, port: int, payload: bytes, host: str = "127.0.0.1"):
        super().__init__(name=f"inline-client-{port}", daemon=True)
        self.addr = (host, port)
        self.payload = payload
        self.output = bytearray()
        self.first_byte_ns: int | None = None
        self.error: str | None = None

    def run(self) -> None:
        try:
            with socket.create_connection(self.addr, timeout=30) as s:
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                if self.payload:
                    s.sendall(self.payload)
                s.shutdown(socket.SHUT_WR)
                while True:
                    chunk = s.recv(65536)
                    if not chunk:
                        break
                    if self.first_byte_ns is None:
                        self.first_byte_ns = time.perf_counter_ns()
                    self.output += chunk
        except OSError as exc:
            self.error = f"gateway client: {exc}"


class ControlPlane:
    """Places invocations on tenant services according to their deployment mode.

    Shared mode keeps one service per tenant alive across invocations until
    it has been idle past its keep-alive deadline; ``reap`` retires such
    services. One-to-one builds and destroys a private service per
    invocation. Standalone boots the user VM with no service at all.
    """

    def __init__(self, settings: Settings | None = None, *,
                 policy: FilterPolicy | None = None, prefill: bool = True):
        self.settings = s = settings or Settings()
        self.policy = policy or FilterPolicy()
        self._owns_root = not s.scratch_root
        self.scratch_root = Path(s.scratch_root or tempfile.mkdtemp(prefix="mksv-plane-"))
        self.scratch_root.mkdir(parents=True, exist_ok=True)
        self.namespaces: ResourcePool[NamespaceToken] = ResourcePool(
            "namespace", namespace_factory(), s.namespace_pool, s.namespace_low_water,
            s.pool_refill)
        self.templates: ResourcePool[TenantService] = ResourcePool(
            "service_template", self._build_template, s.template_pool, s.template_low_water,
            s.pool_refill)
        if prefill:
            self.namespaces.prefill()
            self.templates.prefill()
        self.slots: dict[str, TenantSlot] = {}
        self.live_contexts: dict[int, GuestContext] = {}
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._ids = itertools.count(1)
        self._svc_dirs = itertools.count(1)
        self.inflight = 0
        self.closing = False
        self.counters = {"invocations": 0, "services_created": 0, "services_retired": 0,
                         "errors": 0}

    # -- services ---------------------------------------------------------

    def _build_template(self) -> TenantService:
        s = self.settings
        return TenantService(self.policy, backend=s.backend, worker_cap=s.worker_cap,
                             gateway_host=s.host, ack_timeout=s.bulk_timeout_s)

    def _instantiate(self, tenant_id: str) -> tuple[TenantService, AdminServer,
                                                    NamespaceToken, dict]:
        ns_before = self.namespaces.refills_started
        tpl_before = self.templates.refills_started
        token = self.namespaces.acquire()
        try:
            service = self.templates.acquire()
        except PoolEmpty:
            self.namespaces.release(token)
            raise
        service.overlay(tenant_id, self.scratch_root / f"svc-{next(self._svc_dirs)}")
        admin = AdminServer(service, self.settings.host).start()
        with self._lock:
            self.counters["services_created"] += 1
        work = {"services_constructed": 1, "templates_acquired": 1, "tokens_acquired": 1,
                "refills_triggered": (self.namespaces.refills_started - ns_before)
                + (self.templates.refills_started - tpl_before)}
        return service, admin, token, work

    def _destroy(self, admin: AdminServer, token: NamespaceToken) -> None:
        admin.stop(wait=False)
        root = admin.service.root
        if root is not None:
            shutil.rmtree(root, ignore_errors=True)
        self.namespaces.release(token)
        with self._lock:
            self.counters["services_retired"] += 1

    def _slot(self, tenant_id: str) -> TenantSlot:
        with self._lock:
            slot = self.slots.get(tenant_id)
            if slot is None:
                slot = self.slots[tenant_id] = TenantSlot(tenant_id)
            return slot

    def ensure_service(self, tenant_id: str, *,
                       hold: bool = False) -> tuple[TenantSlot, float, dict]:
        """Return the tenant's live service slot, creating the service if needed.

        The second value is the creation latency in seconds (exactly 0 on
        reuse). With ``hold`` the slot's live-uvm count is raised under the
        same lock, so a concurrent ``reap`` cannot retire it.
        """
        slot = self._slot(tenant_id)
        with slot.lock:
            if slot.service is not None:
                if hold:
                    slot.live_uvms += 1
                return slot, 0.0, dict(_NO_WORK)
            t0 = time.perf_counter()
            slot.service, slot.admin, slot.token, work = self._instantiate(tenant_id)
            elapsed = time.perf_counter() - t0
            slot.deadline = time.monotonic() + self.settings.keep_alive_s
            if hold:
                slot.live_uvms += 1
            return slot, elapsed, work

    def reap(self, now: float | None = None) -> int:
        """Retire idle services whose keep-alive deadline is before ``now``."""
        now = time.monotonic() if now is None else now
        retired = 0
        with self._lock:
            slots = list(self.slots.values())
        for slot in slots:
            with slot.lock:
                if slot.service is None or slot.live_uvms > 0 or not slot.deadline < now:
                    continue
                admin, token = slot.admin, slot.token
                slot.service = slot.admin = slot.token = None
                slot.deadline = math.inf
                self._destroy(admin, token)
                retired += 1
        return retired

    def tokens_held(self) -> int:
        return self.namespaces.acquired - self.namespaces.released

    # -- invocation -------------------------------------------------------

    def _boot_options(self) -> BootOptions:
        s = self.settings
        return BootOptions(memory_bytes=s.memory_mib * 1024 * 1024,
                           strict_page_mode=s.strict_page_mode,
                           bulk_timeout=s.bulk_timeout_s, run_timeout=s.invoke_timeout_s)

    def invoke(self, req: InvocationRequest,
               on_ready: Callable[[int], None] | None = None) -> InvocationResult:
        """Run one invocation to completion; the user VM is gone on return.

        ``on_ready(port)`` fires once the gateway port exists when the request
        carries no inline payload.
        """
        image = load_image(req.function)
        with self._lock:
            if self.closing:
                raise PlaneClosed("control plane is shutting down")
            self.inflight += 1
            self.counters["invocations"] += 1
        result = InvocationResult(next(self._ids), req.tenant_id, req.function, req.mode)
        t0 = time.perf_counter_ns()
        slot = private = None
        service = None
        client: _Client | None = None
        standalone_gw: Gateway | None = None
        ctx_box: list[GuestContext] = []
        try:
            if req.mode is Mode.SHARED:
                slot, acquire_s, work = self.ensure_service(req.tenant_id, hold=True)
                service = slot.service
            elif req.mode is Mode.ONE_TO_ONE:
                t = time.perf_counter()
                private = self._instantiate(req.tenant_id)
                acquire_s, work = time.perf_counter() - t, private[3]
                service = private[0]
            else:
                acquire_s, work = 0.0, dict(_NO_WORK)
            result.service_acquire_ms = acquire_s * 1e3
            result.service_created = work["services_constructed"] > 0
            result.acquire_work = work

            def attach(uvm_id, channel):
                nonlocal client
                _, port = service.register_uvm(uvm_id, channel, group=req.tenant_id)
                result.port = port
                if req.payload is not None:
                    client = _Client(port, req.payload, self.settings.host)
                    client.start()
                elif on_ready is not None:
                    on_ready(port)

            def track(ctx):
                ctx_box.append(ctx)
                with self._lock:
                    self.live_contexts[ctx.uvm_id] = ctx

            if req.mode is Mode.STANDALONE:
                if req.payload is not None:
                    bridge = BufferBridge(req.payload)
                else:
                    bridge = standalone_gw = Gateway(self.settings.host).start()
                    result.port = standalone_gw.port
                    if on_ready is not None:
                        on_ready(standalone_gw.port)
                ctx, report = boot(image, "standalone", bridge=bridge,
                                   options=self._boot_options(), on_context=track)
                if req.payload is not None:
                    result.output = bytes(bridge.output)
                    first = bridge.first_output_ns
                else:
                    first = standalone_gw.first_output_ns
                    standalone_gw.close()
            else:
                ctx, report = boot(image, "attached", attach=attach,
                                   options=self._boot_options(), on_context=track)
                gw_first = service.handles[ctx.uvm_id].gateway.first_output_ns
                service.unregister_uvm(ctx.uvm_id)
                first = gw_first
                if client is not None:
                    client.join(30)
                    result.output = bytes(client.output)
                    first = client.first_byte_ns
                    if client.error and result.error is None:
                        result.error = client.error
            result.uvm_id = ctx.uvm_id
            result.exit_status = ctx.exit_status
            result.error = ctx.error or result.error
            result.boot = report
            result.frames = ctx.channel.frame_count
            result.bulk_log = list(ctx.bulk_log)
            result.uvm_boot_ms = sum(us for name, us in report.phases
                                     if name not in ("guest_exec", "exit_handling")) / 1e3
            if first is not None:
                result.first_byte_ms = (first - t0) / 1e6
            ctx.close()
        except Exception as exc:
            log.exception("invocation %d failed", result.request_id)
            result.error = result.error or f"{type(exc).__name__}: {exc}"
            for ctx in ctx_box:
                ctx.terminate("invoke failure")
                ctx.close()
            if standalone_gw is not None:
                standalone_gw.close()
        finally:
            for ctx in ctx_box:
                with self._lock:
                    self.live_contexts.pop(ctx.uvm_id, None)
            if slot is not None:
                with slot.lock:
                    slot.live_uvms -= 1
                    slot.deadline = time.monotonic() + self.settings.keep_alive_s
            if private is not None:
                self._destroy(private[1], private[2])
            result.completion_ms = (time.perf_counter_ns() - t0) / 1e6
            with self._lock:
                if not result.ok:
                    self.counters["errors"] += 1
                self.inflight -= 1
                self._idle.notify_all()
        return result

    # -- lifecycle --------------------------------------------------------

    def drain(self, timeout: float = 10.0) -> int:
        """Stop admitting work and wait for live invocations.

        Invocations still running at the deadline are terminated; returns how
        many had to be terminated.
        """
        with self._lock:
            self.closing = True
            done = self._idle.wait_for(lambda: self.inflight == 0, timeout)
            stragglers = [] if done else list(self.live_contexts.values())
        for ctx in stragglers:
            ctx.terminate("drain")
        with self._lock:
            self._idle.wait_for(lambda: self.inflight == 0, 10.0)
        return len(stragglers)

    def shutdown(self, timeout: float = 10.0) -> None:
        self.drain(timeout)
        self.reap(math.inf)
        self.namespaces.wait_idle(5.0)
        self.templates.wait_idle(5.0)
        for svc in self.templates.drain():
            svc.shutdown()
        if self._owns_root:
            shutil.rmtree(self.scratch_root, ignore_errors=True)

    def stats(self) -> dict:
        with self._lock:
            slots = {t: {"live": s.live, "live_uvms": s.live_uvms,
                         "token": s.token.ident if s.token else None}
                     for t, s in self.slots.items()}
            counters = dict(self.counters)
            inflight = self.inflight
            live = len(self.live_contexts)
        return {"counters": counters, "inflight": inflight, "live_uvms": live,
                "slots": slots, "tokens_held": self.tokens_held(),
                "pools": [self.namespaces.stats(), self.templates.stats()],
                "phases": list(PHASES)}
