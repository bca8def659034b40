"""Per-tenant system service: multiplexes remote calls from many user VMs.

Every (uvm, thread) pair is bound to its own worker thread the first time it
issues a call, so calls from one guest thread execute strictly in order.
Workers are created lazily up to ``worker_cap``; pairs that arrive beyond
the cap wait in a backlog until a binding is retired.
"""

from __future__ import annotations

import collections
import errno
import itertools
import json
import logging
import queue
import shutil
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from mksv import ops
from mksv.errors import BackendFailure, ErrorCode, FilterDenied, UnknownCall
from mksv.ikc.bulk import DEFAULT_ACK_TIMEOUT
from mksv.ikc.channel import Channel, PeerSession
from mksv.ikc.frames import CallId, FrameKind, IkcFrame, is_remote
from mksv.service.backend import Backend, Call, make_backend
from mksv.service.filter import FilterPolicy, Verdict, apply_filter
from mksv.service.gateway import Gateway

log = logging.getLogger(__name__)

DEFAULT_WORKER_CAP = 256


class RegistrationError(Exception):
    pass


@dataclass
class HandleStats:
    calls: int = 0
    bytes_in: int = 0
    bytes_out: int = 0


@dataclass
class UserVmHandle:
    uvm_id: int
    channel: Channel
    gateway: Gateway
    root: Path
    group: str = "default"
    session: PeerSession | None = None
    stats: HandleStats = field(default_factory=HandleStats)
    closed: bool = False
    _fds: dict = field(default_factory=dict)
    _next_fd: int = 3
    _mailboxes: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def port(self) -> int:
        return self.gateway.port

    def add_fd(self, resource) -> int:
        with self._lock:
            fd = self._next_fd
            self._next_fd += 1
            self._fds[fd] = resource
            return fd

    def get_fd(self, fd: int):
        with self._lock:
            try:
                return self._fds[fd]
            except KeyError:
                raise BackendFailure(f"bad fd {fd}", errno=errno.EBADF) from None

    def pop_fd(self, fd: int):
        res = self.get_fd(fd)
        with self._lock:
            del self._fds[fd]
        return res

    def drain_fds(self) -> list:
        with self._lock:
            out = list(self._fds.values())
            self._fds.clear()
            return out

    @property
    def fd_table(self) -> dict:
        with self._lock:
            return dict(self._fds)

    def mailbox(self, tid: int) -> queue.Queue:
        with self._lock:
            box = self._mailboxes.get(tid)
            if box is None:
                box = self._mailboxes[tid] = queue.Queue()
            return box


class _Worker:
    def __init__(self, index: int, service: "TenantService", key: tuple[int, int]):
        self.index = index
        self.key = key
        self.queue: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._loop, args=(service,),
                                       name=f"svc-worker-{index}", daemon=True)

    def _loop(self, service: "TenantService") -> None:
        service._worker_started(self)
        while True:
            item = self.queue.get()
            if item is None:
                return
            handle, frame = item
            service._run(handle, frame, self.index)


class TenantService:
    """Multiplexer state for one tenant.

    A fresh instance carries no tenant identity; ``overlay`` assigns the tenant
    and its scratch root. Two fresh instances built from the same arguments
    have identical ``fingerprint()`` bytes.
    """

    def __init__(self, policy: FilterPolicy | None = None, *, backend: str = "host",
                 worker_cap: int = DEFAULT_WORKER_CAP, gateway_host: str = "127.0.0.1",
                 ack_timeout: float = DEFAULT_ACK_TIMEOUT,
                 group_hook: Callable[[str, int], None] | None = None,
                 trace: bool = False):
        if worker_cap < 1:
            raise ValueError("worker_cap must be at least 1")
        self.policy = policy or FilterPolicy()
        self.backend_kind = backend
        self.backend: Backend = make_backend(backend)
        self.worker_cap = worker_cap
        self.gateway_host = gateway_host
        self.ack_timeout = ack_timeout
        self.group_hook = group_hook
        self.tenant_id: str | None = None
        self.root: Path | None = None
        self._owns_root = False
        self.handles: dict[int, UserVmHandle] = {}
        self.retired_ids: set[int] = set()
        self.bindings: dict[tuple[int, int], int] = {}
        self.workers: dict[int, _Worker] = {}
        self._worker_ids = itertools.count()
        self._backlog: collections.OrderedDict[tuple[int, int], list] = collections.OrderedDict()
        self._lock = threading.RLock()
        self.backend_calls = 0
        self.denied = 0
        self.workers_created = 0
        self.trace: list[tuple[int, int, int, int]] | None = [] if trace else None
        self.closed = False

    # -- identity ---------------------------------------------------------

    def overlay(self, tenant_id: str, root: Path | str | None = None) -> "TenantService":
        """Bind this generic instance to a tenant and a scratch root."""
        if self.tenant_id is not None:
            raise RegistrationError(f"service already belongs to {self.tenant_id!r}")
        self.tenant_id = str(tenant_id)
        if root is None:
            root = tempfile.mkdtemp(prefix=f"mksv-{self.tenant_id}-")
            self._owns_root = True
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def fingerprint(self) -> bytes:
        with self._lock:
            state = {
                "tenant_id": self.tenant_id,
                "root": str(self.root) if self.root else None,
                "policy": self.policy.to_dict(),
                "backend": self.backend_kind,
                "worker_cap": self.worker_cap,
                "ack_timeout": self.ack_timeout,
                "handles": sorted(self.handles),
                "retired": sorted(self.retired_ids),
                "bindings": sorted(self.bindings.items()),
                "backlog": list(self._backlog),
                "counters": [self.backend_calls, self.denied, self.workers_created],
            }
        return json.dumps(state, sort_keys=True).encode()

    # -- registration -----------------------------------------------------

    def register_uvm(self, uvm_id: int, channel: Channel,
                     group: str = "default") -> tuple[UserVmHandle, int]:
        if self.closed:
            raise RegistrationError("service is shut down")
        if self.root is None:
            raise RegistrationError("service has no tenant overlay")
        with self._lock:
            if uvm_id in self.handles or uvm_id in self.retired_ids:
                raise RegistrationError(f"uvm id {uvm_id} already used")
            try:
                gateway = Gateway(self.gateway_host).start()
            except OSError as exc:
                raise RegistrationError(f"cannot bind gateway port: {exc}") from exc
            handle = UserVmHandle(uvm_id, channel, gateway, self.root / f"uvm-{uvm_id}", group)
            handle.session = PeerSession(channel, uvm_id, self.dispatch, self.ack_timeout,
                                         name="svc", on_command=self._on_command)
            self.handles[uvm_id] = handle
        handle.session.start()
        return handle, gateway.port

    def unregister_uvm(self, uvm_id: int) -> None:
        with self._lock:
            handle = self.handles.pop(uvm_id, None)
            if handle is None:
                return
            self.retired_ids.add(uvm_id)
            handle.closed = True
            for key in [k for k in self.bindings if k[0] == uvm_id]:
                self._retire(key)
            for key in [k for k in self._backlog if k[0] == uvm_id]:
                del self._backlog[key]
        handle.channel.close()
        handle.gateway.close()
        if handle.session is not None:
            handle.session.join(5.0)
        self.backend.release(handle)

    @property
    def live_uvms(self) -> int:
        with self._lock:
            return len(self.handles)

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, frame: IkcFrame) -> IkcFrame | None:
        """Route a CallRequest to the worker bound to its (uvm, thread).

        Returns the immediate error response when the frame cannot be routed.
        """
        if frame.kind != FrameKind.CALL_REQUEST:
            raise UnknownCall(f"cannot dispatch a {frame.kind.name} frame")
        with self._lock:
            handle = self.handles.get(frame.uvm_id)
            if handle is None:
                return IkcFrame(FrameKind.CALL_RESPONSE, frame.uvm_id, frame.thread_id,
                                frame.call_id, frame.seq, ErrorCode.VM_TERMINATED)
            if not is_remote(frame.call_id):
                resp = IkcFrame(FrameKind.CALL_RESPONSE, frame.uvm_id, frame.thread_id,
                                frame.call_id, frame.seq, ErrorCode.UNKNOWN_CALL)
                handle.channel.peer_send(resp)
                return resp
            key = (frame.uvm_id, frame.thread_id)
            idx = self.bindings.get(key)
            if idx is None:
                if key in self._backlog or len(self.workers) >= self.worker_cap:
                    self._backlog.setdefault(key, []).append((handle, frame))
                    return None
                idx = self._bind(key)
            self.workers[idx].queue.put((handle, frame))
        return None

    def _bind(self, key: tuple[int, int]) -> int:
        idx = next(self._worker_ids)
        worker = _Worker(idx, self, key)
        self.workers[idx] = worker
        self.bindings[key] = idx
        self.workers_created += 1
        worker.thread.start()
        return idx

    def _worker_started(self, worker: _Worker) -> None:
        if self.group_hook is not None:
            handle = self.handles.get(worker.key[0])
            if handle is not None:
                self.group_hook(handle.group, threading.get_native_id())

    def _retire(self, key: tuple[int, int]) -> None:
        idx = self.bindings.pop(key, None)
        if idx is None:
            return
        self.workers.pop(idx).queue.put(None)
        while self._backlog and len(self.workers) < self.worker_cap:
            waiting, items = self._backlog.popitem(last=False)
            new_idx = self._bind(waiting)
            for item in items:
                self.workers[new_idx].queue.put(item)

    def release_thread(self, uvm_id: int, tid: int) -> None:
        """Retire the worker bound to (uvm, tid); a later call binds afresh."""
        with self._lock:
            self._retire((uvm_id, tid))

    def _on_command(self, frame: IkcFrame) -> None:
        if frame.call_id == CallId.EXIT_THREAD:
            # queued behind any calls the thread still has in flight
            with self._lock:
                idx = self.bindings.get((frame.uvm_id, frame.thread_id))
                if idx is not None:
                    self.workers[idx].queue.put((None, frame))

    # -- execution --------------------------------------------------------

    def _run(self, handle: UserVmHandle | None, frame: IkcFrame, worker: int) -> None:
        if handle is None:
            self.release_thread(frame.uvm_id, frame.thread_id)
            return
        if self.trace is not None:
            self.trace.append((frame.uvm_id, frame.thread_id, frame.seq, worker))
        handle.stats.calls += 1
        handle.stats.bytes_in += len(frame.payload)
        handle.session.serve(frame, lambda cid, header, data, capacity:
                             self._execute(handle, frame, cid, header, data, capacity))

    def _execute(self, handle: UserVmHandle, frame: IkcFrame, call_id: CallId,
                 header: bytes, data: bytes | None, capacity: int | None) -> bytes:
        request = None
        if self.backend.marshaled and call_id != CallId.RECV:
            request = ops.decode(header)
        if apply_filter(self.policy, call_id, request) is Verdict.DENY:
            with self._lock:
                self.denied += 1
            raise FilterDenied(f"{call_id.name.lower()} denied")
        call = Call(call_id, frame.thread_id, header, request, data, capacity)
        with self._lock:
            self.backend_calls += 1
        # the only path into a backend
        out = self.backend.execute(handle, call)
        handle.stats.bytes_in += len(data or b"")
        handle.stats.bytes_out += len(out)
        return out

    # -- reporting / teardown ---------------------------------------------

    def stats(self) -> dict:
        with self._lock:
            return {
                "tenant_id": self.tenant_id,
                "live_uvms": len(self.handles),
                "retired_uvms": len(self.retired_ids),
                "workers": len(self.workers),
                "workers_created": self.workers_created,
                "backlog": sum(len(v) for v in self._backlog.values()),
                "backend_calls": self.backend_calls,
                "denied": self.denied,
                "handles": {uid: {"port": h.port, "group": h.group, "calls": h.stats.calls,
                                  "bytes_in": h.stats.bytes_in, "bytes_out": h.stats.bytes_out}
                            for uid, h in self.handles.items()},
            }

    def shutdown(self) -> None:
        with self._lock:
            self.closed = True
            ids = list(self.handles)
        for uid in ids:
            self.unregister_uvm(uid)
        with self._lock:
            for key in list(self.bindings):
                self._retire(key)
        if self._owns_root and self.root is not None:
            shutil.rmtree(self.root, ignore_errors=True)
