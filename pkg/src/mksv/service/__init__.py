"""Per-tenant system service."""

from mksv.service.admin import AdminServer
from mksv.service.backend import Call, EchoBackend, HostBackend
from mksv.service.filter import FilterPolicy, Verdict, apply_filter
from mksv.service.gateway import Gateway
from mksv.service.service import RegistrationError, TenantService, UserVmHandle

__all__ = [
    "AdminServer", "Call", "EchoBackend", "FilterPolicy", "Gateway", "HostBackend",
    "RegistrationError", "TenantService", "UserVmHandle", "Verdict", "apply_filter",
]
