"""
Exception hierarchy shared by the numerical core, the CLI and the run store.
"""
from typing import Optional


class BridgesError(Exception):
    """Base class for every error raised by interacting_bridges."""


class DimensionError(BridgesError, ValueError):
    """Array shapes do not match the vertex count."""


class ParameterError(BridgesError, ValueError):
    """A precondition on an argument is violated."""


class GraphError(ParameterError):
    """The conductance matrix breaks one of its invariants."""


class SingularMatrixError(BridgesError):
    """A factorization or solve met a singular matrix."""


class AdmissibilityError(SingularMatrixError):
    """A simulated replica left the admissible region."""

    def __init__(self, message: str, replica: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.replica = replica
        self.step = step


class UnabsorbedError(BridgesError):
    """A coordinate has no finite hitting time where one is required."""


class QuadratureError(BridgesError):
    """Adaptive quadrature did not converge or the dimension is too large."""


class ConfigError(BridgesError):
    """Invalid configuration; ``key`` names the offending dotted key."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None or key in message else f"{key}: {message}")
        self.key = key


class UnknownSuiteError(BridgesError, KeyError):
    """Unknown verification suite identifier."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown suite"
