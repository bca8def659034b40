"""Error codes carried in frame status fields and the matching exceptions."""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    # 0 is reserved for OK and never names an error
    BAD_FRAME = 1
    PAYLOAD_TOO_LARGE = 2
    CROSSES_PAGE_BOUNDARY = 3
    FILTER_DENIED = 4
    UNKNOWN_CALL = 5
    BACKEND_FAILURE = 6
    VM_TERMINATED = 7
    TIMEOUT = 8


STATUS_OK = 0


class KernelError(Exception):
    """Base for every error that can travel in a frame status."""

    code: ErrorCode

    def __init__(self, message: str = "", *, errno: int | None = None):
        super().__init__(message or self.code.name)
        self.errno = errno


class BadFrame(KernelError):
    code = ErrorCode.BAD_FRAME


class PayloadTooLarge(KernelError):
    code = ErrorCode.PAYLOAD_TOO_LARGE


class CrossesPageBoundary(KernelError):
    code = ErrorCode.CROSSES_PAGE_BOUNDARY


class FilterDenied(KernelError):
    code = ErrorCode.FILTER_DENIED


class UnknownCall(BadFrame):
    # decode treats an unknown call id as a malformed frame
    code = ErrorCode.UNKNOWN_CALL


class BackendFailure(KernelError):
    code = ErrorCode.BACKEND_FAILURE


class VmTerminated(KernelError):
    code = ErrorCode.VM_TERMINATED


class KernelTimeout(KernelError):
    code = ErrorCode.TIMEOUT


_BY_CODE = {
    cls.code: cls
    for cls in (BadFrame, PayloadTooLarge, CrossesPageBoundary, FilterDenied,
                UnknownCall, BackendFailure, VmTerminated, KernelTimeout)
}


def error_for_status(status: int, message: str = "", errno: int | None = None) -> KernelError:
    """Build the exception matching a non-zero frame status."""
    try:
        cls = _BY_CODE[ErrorCode(status)]
    except ValueError:
        return BadFrame(f"unknown status {status}")
    return cls(message, errno=errno)


class GuestError(Exception):
    """Per-call failure inside the guest kernel (bad argument, unmapped region, ...).

    Carries a POSIX errno value. These never cross the channel.
    """

    def __init__(self, errno: int, message: str = ""):
        import os
        super().__init__(message or os.strerror(errno))
        self.errno = errno


class ConfigError(Exception):
    """Invalid configuration key or value; the message names the key."""
