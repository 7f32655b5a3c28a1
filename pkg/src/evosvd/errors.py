"""Exception hierarchy.

Three marker bases map onto CLI exit codes: ConfigError -> 2,
NumericalError -> 3, TransportError -> 4.
"""


class EvoSvdError(Exception):
    """Base class for all package errors."""


class ConfigError(EvoSvdError):
    """Bad configuration or input files (exit code 2)."""


class NumericalError(EvoSvdError):
    """Numerical or state failure (exit code 3)."""


class TransportError(EvoSvdError):
    """Transport/cluster failure (exit code 4)."""


# --- config / input ---------------------------------------------------------

class InvalidConfig(ConfigError):
    pass


class InvalidCluster(ConfigError):
    pass


class SplitOverlap(ConfigError):
    pass


class ConfigMismatch(ConfigError):
    """Coordinator and worker disagree on model/adapters/fitness/layout."""


class CorruptCheckpoint(ConfigError):
    pass


# --- numerical / state ------------------------------------------------------

class InvalidMatrix(NumericalError):
    pass


class DecompositionFailed(NumericalError):
    pass


class NotDecomposed(NumericalError):
    pass


class LayoutMismatch(NumericalError):
    pass


class InvalidCandidate(NumericalError):
    pass


class ShapeError(NumericalError):
    pass


class ProtocolViolation(NumericalError):
    """ask/tell called out of order."""


class NumericalBreakdown(NumericalError):
    """Covariance factorization failed; carries a state snapshot.

    ``state_bytes`` holds the optimizer checkpoint taken just before the
    failure so callers can persist it.
    """

    def __init__(self, message, state_bytes=None):
        super().__init__(message)
        self.state_bytes = state_bytes


class IncompleteGeneration(NumericalError):
    pass


class AdapterMismatch(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    pass


class AlreadyQuantized(NumericalError):
    pass


# --- transport / cluster ----------------------------------------------------

class FrameCorrupt(TransportError):
    """Frame failed CRC or structural validation."""


class GenerationFailed(TransportError):
    """A generation could not be completed even after the retry pass."""


class WorkerUnreachable(TransportError):
    pass


EXIT_CODES = {ConfigError: 2, NumericalError: 3, TransportError: 4}


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented CLI exit code (1 if unknown)."""
    for base, code in EXIT_CODES.items():
        if isinstance(exc, base):
            return code
    return 1
