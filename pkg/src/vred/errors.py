"""Exception hierarchy.

User-facing failures (bad files, bad configs, corrupt streams) derive from
``VredError``; broken internal invariants derive from ``InternalError`` so the
CLI can map them to a distinct exit code.
"""


class VredError(Exception):
    """Base class for recoverable, user-attributable errors."""


class ShapeError(VredError, ValueError):
    pass


class DomainError(VredError, ValueError):
    pass


class ConfigError(VredError, ValueError):
    pass


class FormatError(VredError, ValueError):
    pass


class DigestMismatchError(FormatError):
    pass


class DegenerateCorpusError(VredError, ValueError):
    pass


class SignalError(VredError, ValueError):
    """Audio input that cannot be processed (too short, multichannel, ...)."""


class InternalError(Exception):
    """An invariant the code itself is responsible for was violated."""


class NonFiniteError(InternalError, FloatingPointError):
    pass


class FreezeViolation(InternalError):
    pass
