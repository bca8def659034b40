"""The interface a guest program sees: kernel calls, its memory, POSIX."""

from __future__ import annotations

from typing import TYPE_CHECKING

from mksv.ikc.frames import CallId

if TYPE_CHECKING:
    from mksv.runtime.kernel import GuestContext


class GuestSys:
    def __init__(self, ctx: "GuestContext", tid: int):
        self.ctx = ctx
        self.tid = tid
        self._posix = None

    def kcall(self, call_id: CallId, *args):
        return self.ctx.kcall(self.tid, call_id, *args)

    @property
    def posix(self):
        if self._posix is None:
            from mksv.runtime.posix import Posix
            self._posix = Posix(self)
        return self._posix

    @property
    def argv(self) -> list[str]:
        return list(getattr(self.ctx, "argv", []))

    def alloc(self, n: int) -> int:
        return self.kcall(CallId.MMAP, n)

    def load(self, addr: int, n: int) -> bytes:
        self.ctx.check_access(addr, n)
        return bytes(self.ctx.image[addr:addr + n])

    def store(self, addr: int, data: bytes) -> None:
        self.ctx.check_access(addr, len(data), write=True)
        self.ctx.image[addr:addr + len(data)] = data
