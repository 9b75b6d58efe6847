"""
Simulation and verification toolkit for interacting Brownian bridges on a
conductance graph: the X system and its absorption times, the Lamperti
time-changed (rho, T) system, the beta potential nu and the checks that tie
them together.
"""
from .errors import (
    AdmissibilityError,
    BridgesError,
    ConfigError,
    DimensionError,
    GraphError,
    ParameterError,
    QuadratureError,
    SingularMatrixError,
    UnabsorbedError,
    UnknownSuiteError,
)
from .graph_linalg import BetaPoint, ConductanceMatrix, ModelParams, TimeVector
from .rand_dist import GigParams, RngStream

__all__ = [
    'AdmissibilityError',
    'BridgesError',
    'ConfigError',
    'DimensionError',
    'GraphError',
    'ParameterError',
    'QuadratureError',
    'SingularMatrixError',
    'UnabsorbedError',
    'UnknownSuiteError',
    'BetaPoint',
    'ConductanceMatrix',
    'ModelParams',
    'TimeVector',
    'GigParams',
    'RngStream',
]
