"""Credit-based flow control over a shared control page.

The consumer (guest kernel poll loop) and the producer (supervisor credit
thread) each run a tiny state machine whose transitions are the atomic
operations on the page. ``ControlPage`` runs those transitions under a lock,
releasing it between steps, so a model checker can drive the very same
functions one step at a time (see ``explore``).
"""

from __future__ import annotations

import dataclasses
import enum
import threading
import time
from dataclasses import dataclass

from mksv.errors import VmTerminated


@dataclass
class PageCells:
    """Raw control-page contents plus the wake channel bookkeeping."""

    credits: int = 0
    halted: bool = False
    irq_pending: int = 0
    pv_clock_ns: int = 0
    # wake notifications delivered but not yet observed by the consumer
    wake_tokens: int = 0
    wakes: int = 0
    halt_transitions: int = 0
    consumed: int = 0
    produced: int = 0


class CPc(enum.Enum):
    """Consumer program counter."""

    TAKE = "take"
    HALT = "halt"
    RECHECK = "recheck"
    WAIT = "wait"
    DONE = "done"


class PPc(enum.Enum):
    """Producer program counter."""

    ADD = "add"
    CHECK = "check"
    WAKE = "wake"
    DONE = "done"


def _take(cells: PageCells) -> bool:
    if cells.credits > 0:
        cells.credits -= 1
        cells.consumed += 1
        return True
    return False


def consumer_enabled(cells: PageCells, pc: CPc) -> bool:
    if pc is CPc.WAIT:
        return cells.wake_tokens > 0
    return pc is not CPc.DONE


def consumer_step(cells: PageCells, pc: CPc) -> CPc:
    """Run one atomic consumer transition and return the next pc."""
    if pc is CPc.TAKE:
        return CPc.DONE if _take(cells) else CPc.HALT
    if pc is CPc.HALT:
        cells.halted = True
        cells.halt_transitions += 1
        return CPc.RECHECK
    if pc is CPc.RECHECK:
        # closes the window between the failed take and the halt store
        if _take(cells):
            cells.halted = False
            return CPc.DONE
        return CPc.WAIT
    if pc is CPc.WAIT:
        assert cells.wake_tokens > 0
        cells.wake_tokens -= 1
        return CPc.TAKE
    raise ValueError(f"consumer already done: {pc}")


def producer_step(cells: PageCells, pc: PPc) -> PPc:
    if pc is PPc.ADD:
        cells.credits += 1
        cells.produced += 1
        return PPc.CHECK
    if pc is PPc.CHECK:
        if cells.halted:
            cells.halted = False
            return PPc.WAKE
        return PPc.DONE
    if pc is PPc.WAKE:
        cells.wake_tokens += 1
        cells.wakes += 1
        return PPc.DONE
    raise ValueError(f"producer already done: {pc}")


class ControlPage:
    """Control page shared by one consumer and one producer.

    Single-process realization: the cells live in a plain object guarded by a
    condition variable. Each transition holds the lock only for its own step.
    """

    def __init__(self, credits: int = 0):
        self.cells = PageCells(credits=credits)
        self._cv = threading.Condition()
        self._torn_down = False

    @property
    def credits(self) -> int:
        return self.cells.credits

    @property
    def halted(self) -> bool:
        return self.cells.halted

    @property
    def irq_pending(self) -> int:
        return self.cells.irq_pending

    @property
    def pv_clock_ns(self) -> int:
        return self.cells.pv_clock_ns

    @pv_clock_ns.setter
    def pv_clock_ns(self, value: int) -> None:
        self.cells.pv_clock_ns = value

    @property
    def torn_down(self) -> bool:
        return self._torn_down

    def teardown(self) -> None:
        with self._cv:
            self._torn_down = True
            self._cv.notify_all()

    def snapshot(self) -> PageCells:
        with self._cv:
            return dataclasses.replace(self.cells)


def credit_consume(page: ControlPage, timeout: float | None = None) -> None:
    """Take one credit, halting until woken when none are available.

    Raises VmTerminated if the page is torn down while blocked, and
    TimeoutError if ``timeout`` elapses first.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    pc = CPc.TAKE
    cells = page.cells
    while pc is not CPc.DONE:
        with page._cv:
            if pc is CPc.WAIT:
                while cells.wake_tokens == 0:
                    if page._torn_down:
                        raise VmTerminated("control page torn down")
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        # leave the page consistent: stop advertising halt
                        cells.halted = False
                        raise TimeoutError("credit_consume timed out")
                    page._cv.wait(remaining)
            elif page._torn_down and cells.credits == 0:
                raise VmTerminated("control page torn down")
            pc = consumer_step(cells, pc)


def credit_produce(page: ControlPage) -> bool:
    """Grant one credit; returns True when a halted consumer was woken."""
    pc = PPc.ADD
    woke = False
    cells = page.cells
    while pc is not PPc.DONE:
        with page._cv:
            pc = producer_step(cells, pc)
            if pc is PPc.WAKE:
                woke = True
            elif woke:
                page._cv.notify_all()
    return woke
