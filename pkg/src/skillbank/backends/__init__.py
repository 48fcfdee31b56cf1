"""Oracle backends: shared interfaces, a simulated world, scripted doubles, HTTP."""

from .base import (
    CallContext,
    GateUnavailable,
    MalformedResponse,
    OracleError,
    OracleUnavailable,
    Oracles,
    Task,
    VerdictDraft,
)

__all__ = [
    "CallContext",
    "GateUnavailable",
    "MalformedResponse",
    "OracleError",
    "OracleUnavailable",
    "Oracles",
    "Task",
    "VerdictDraft",
]
