"""Host control plane: service pooling, deployment modes, daemon."""

from mksv.control.daemon import Daemon
from mksv.control.plane import (ControlPlane, InvocationRequest, InvocationResult, Mode,
                                PlaneClosed, TenantSlot)
from mksv.control.pools import NamespaceToken, PoolEmpty, ResourcePool

__all__ = [
    "ControlPlane", "Daemon", "InvocationRequest", "InvocationResult", "Mode",
    "NamespaceToken", "PlaneClosed", "PoolEmpty", "ResourcePool", "TenantSlot",
]
