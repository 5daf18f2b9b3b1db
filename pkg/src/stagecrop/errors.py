"""Exception hierarchy. Backend errors are split by kind so callers can map
them to exit codes or retry policies."""


class BackendError(RuntimeError):
    """Base class for anything that goes wrong talking to a model backend."""

    kind = "backend"


class BackendTimeout(BackendError):
    kind = "timeout"


class BackendUnavailable(BackendError):
    kind = "unavailable"


class BackendStatusError(BackendError):
    kind = "status"


class SchemaViolation(BackendError):
    kind = "schema"


class GridMismatch(BackendError):
    kind = "grid_mismatch"


class GroundingError(RuntimeError):
    """A grounding episode failed part-way; ``trace`` holds the stages that completed."""

    def __init__(self, message, trace=None, kind="backend"):
        super().__init__(message)
        self.trace = trace
        self.kind = kind
