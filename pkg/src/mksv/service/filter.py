"""System-call filter applied to every forwarded call before the backend."""

from __future__ import annotations

import enum
import posixpath
from dataclasses import dataclass, field
from typing import Mapping

from mksv import ops
from mksv.ikc.frames import CallId


class Verdict(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class FilterPolicy:
    """Default verdict, per-call and per-op overrides, optional open() path allow-list."""

    default: Verdict = Verdict.ALLOW
    calls: Mapping[CallId, Verdict] = field(default_factory=dict)
    ops: Mapping[str, Verdict] = field(default_factory=dict)
    path_prefixes: tuple[str, ...] | None = None

    @classmethod
    def allow_all(cls) -> "FilterPolicy":
        return cls()

    @classmethod
    def deny_all(cls) -> "FilterPolicy":
        return cls(default=Verdict.DENY)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "FilterPolicy":
        def verdict(v):
            return Verdict(str(v).lower())
        prefixes = raw.get("path_prefixes")
        return cls(
            default=verdict(raw.get("default", "allow")),
            calls={CallId[str(k).upper()]: verdict(v) for k, v in raw.get("calls", {}).items()},
            ops={str(k).lower(): verdict(v) for k, v in raw.get("ops", {}).items()},
            path_prefixes=tuple(prefixes) if prefixes is not None else None,
        )

    def to_dict(self) -> dict:
        return {
            "default": self.default.value,
            "calls": {c.name.lower(): v.value for c, v in sorted(self.calls.items())},
            "ops": {k: v.value for k, v in sorted(self.ops.items())},
            "path_prefixes": list(self.path_prefixes) if self.path_prefixes is not None else None,
        }


def _path_allowed(path: str, prefixes: tuple[str, ...]) -> bool:
    norm = posixpath.normpath("/" + path.lstrip("/"))
    for prefix in prefixes:
        p = posixpath.normpath("/" + prefix.lstrip("/"))
        if norm == p or norm.startswith(p.rstrip("/") + "/"):
            return True
    return False


def apply_filter(policy: FilterPolicy, call_id: CallId,
                 args: ops.Request | None = None) -> Verdict:
    """Pure verdict for one call and its decoded arguments (if any)."""
    verdict = policy.calls.get(call_id, policy.default)
    if args is not None:
        verdict = policy.ops.get(args.op.name.lower(), verdict)
        if (verdict is Verdict.ALLOW and args.op is ops.Op.OPEN
                and policy.path_prefixes is not None
                and not _path_allowed(args.path, policy.path_prefixes)):
            verdict = Verdict.DENY
    return verdict
