"""One-sided, bulk-synchronous communication with per-primitive cost guarantees."""

from lpf.core import (
    MAX_P, MSG_DEFAULT, NO_ARGS, ROOT_PID, SYNC_DEFAULT, Args, Config, Context, MemSlot,
    MsgAttr, Scope, SyncAttr, resolve_symbol, root_context, symbol,
)
from lpf.errors import ErrorCode, FatalError, LPFError, MitigableError, OutOfCapacity, OutOfMemory
from lpf.machine import MachineParams

__all__ = [
    "MAX_P", "MSG_DEFAULT", "NO_ARGS", "ROOT_PID", "SYNC_DEFAULT", "Args", "Config",
    "Context", "ErrorCode", "FatalError", "LPFError", "MachineParams", "MemSlot",
    "MitigableError", "MsgAttr", "OutOfCapacity", "OutOfMemory", "Scope", "SyncAttr",
    "hook", "resolve_symbol", "root", "symbol",
]


def root() -> Context:
    return root_context()


def hook(init, spmd, args=NO_ARGS):
    from lpf.tcp import hook as _hook

    return _hook(init, spmd, args)
