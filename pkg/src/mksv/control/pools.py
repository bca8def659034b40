"""Pre-initialized resource pools with low-water refill."""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Generic, TypeVar

log = logging.getLogger(__name__)

T = TypeVar("T")


class PoolEmpty(Exception):
    pass


@dataclass(frozen=True)
class NamespaceToken:
    """Abstract stand-in for a pre-created network namespace."""

    ident: int


def namespace_factory() -> Callable[[], NamespaceToken]:
    ids = itertools.count(1)
    return lambda: NamespaceToken(next(ids))


class ResourcePool(Generic[T]):
    """Free list of ready items.

    ``acquire`` pops a ready item; when that leaves fewer than ``low_water``
    items, a background refill tops the pool back up to ``target``. If the
    pool is empty, ``acquire`` builds an item inline when refill is enabled
    (counted in ``inline_builds``) and raises PoolEmpty otherwise.
    """

    def __init__(self, kind: str, factory: Callable[[], T], target: int, low_water: int,
                 refill: bool = True):
        if not 0 <= low_water <= target:
            raise ValueError(f"{kind}: need 0 <= low_water <= target")
        self.kind = kind
        self.factory = factory
        self.target = target
        self.low_water = low_water
        self.refill_enabled = refill
        self._free: list[T] = []
        self._cv = threading.Condition()
        self._refilling = False
        self._refiller: threading.Thread | None = None
        self.built = 0
        self.inline_builds = 0
        self.acquired = 0
        self.released = 0
        self.refills_started = 0

    def prefill(self) -> "ResourcePool[T]":
        while len(self._free) < self.target:
            item = self.factory()
            with self._cv:
                self.built += 1
                self._free.append(item)
        return self

    def __len__(self) -> int:
        with self._cv:
            return len(self._free)

    def acquire(self) -> T:
        with self._cv:
            if self._free:
                item = self._free.pop()
                self.acquired += 1
                self._maybe_refill()
                return item
            if not self.refill_enabled:
                raise PoolEmpty(f"{self.kind} pool is empty and refill is disabled")
            self.acquired += 1
            self.inline_builds += 1
            self.built += 1
            self._maybe_refill()
        return self.factory()

    def release(self, item: T) -> None:
        with self._cv:
            self.released += 1
            self._free.append(item)
            self._cv.notify_all()

    def _maybe_refill(self) -> None:
        if self.refill_enabled and not self._refilling and len(self._free) < self.low_water:
            self._refilling = True
            self.refills_started += 1
            self._refiller = threading.Thread(target=self._refill, name=f"refill-{self.kind}",
                                              daemon=True)
            self._refiller.start()

    def _refill(self) -> None:
        try:
            while True:
                with self._cv:
                    if len(self._free) >= self.target:
                        return
                item = self.factory()
                with self._cv:
                    self.built += 1
                    self._free.append(item)
                    self._cv.notify_all()
        except Exception:
            log.exception("%s refill failed", self.kind)
        finally:
            with self._cv:
                self._refilling = False
                self._cv.notify_all()

    def wait_idle(self, timeout: float | None = None) -> bool:
        """Block until no refill is running."""
        with self._cv:
            return self._cv.wait_for(lambda: not self._refilling, timeout)

    def drain(self) -> list[T]:
        with self._cv:
            items, self._free = self._free, []
            return items

    def stats(self) -> dict:
        with self._cv:
            return {"kind": self.kind, "free": len(self._free), "target": self.target,
                    "low_water": self.low_water, "built": self.built,
                    "inline_builds": self.inline_builds, "acquired": self.acquired,
                    "released": self.released, "refills_started": self.refills_started}
