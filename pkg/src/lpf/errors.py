"""Error model: every primitive either succeeds, fails in a way the caller can
mitigate locally (no side effects), or fails fatally."""

from __future__ import annotations

import enum


class ErrorCode(enum.Enum):
    SUCCESS = 0
    MITIGABLE = 1
    FATAL = 2


class LPFError(Exception):
    code = ErrorCode.FATAL


class MitigableError(LPFError):
    """Raised before any state is touched; retrying after mitigation is safe."""

    code = ErrorCode.MITIGABLE


class OutOfCapacity(MitigableError):
    pass


class OutOfMemory(MitigableError):
    pass


class FatalError(LPFError):
    code = ErrorCode.FATAL
