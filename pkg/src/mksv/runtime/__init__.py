"""Guest-side micro-kernel runtime."""

from mksv.runtime.boot import (PHASES, BootOptions, BootPhaseReport, BufferBridge, ImageError,
                               ProgramImage, ProgramManifest, StdioEndpoint, boot, load_image,
                               register_program, resolve_program)
from mksv.runtime.kernel import GuestContext, MemRegion, ThreadState, kcall
from mksv.runtime.posix import Posix, posix_shim
from mksv.runtime.sys import GuestSys

__all__ = [
    "PHASES", "BootOptions", "BootPhaseReport", "BufferBridge", "GuestContext", "GuestSys",
    "ImageError", "MemRegion", "Posix", "ProgramImage", "ProgramManifest", "StdioEndpoint",
    "ThreadState", "boot", "kcall", "load_image", "posix_shim", "register_program",
    "resolve_program",
]
