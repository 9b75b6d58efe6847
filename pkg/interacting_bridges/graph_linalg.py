"""
Graph and matrix machinery of the interacting-bridge model.

Conductance matrices W, the matrices H_beta = 2 diag(beta) - W and
K_t = Id - diag(t) W, positive-definiteness tests, factorized determinants, and
an exact residual check of the matrix identities used by the Girsanov mixture.

All dense, all small (n up to a few hundred). Matrices are never inverted
explicitly except W K^{-1}, which callers reuse across many evaluations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg as sla
from scipy.sparse.csgraph import connected_components

from scripts.utils.utils import get_logger
from .errors import DimensionError, GraphError, ParameterError, SingularMatrixError

logger = get_logger('graph_linalg')

# a pivot counts as positive above this fraction of the largest diagonal entry
PD_TOLERANCE = 1e-12
SYMMETRY_TOLERANCE = 1e-12
# condition number above which a solve is treated as singular
SINGULAR_CONDITION = 1e13


def _readonly(values: ArrayLike) -> NDArray[np.float64]:
    array = np.array(values, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def _vector(values: ArrayLike, n: int, name: str) -> NDArray[np.float64]:
    array = np.atleast_1d(np.asarray(values, dtype=float))
    if array.ndim != 1 or array.shape[0] != n:
        logger.error(f"{name} has shape {array.shape}, expected ({n},)")
        raise DimensionError(f"{name} must be a vector of length {n}, got shape {array.shape}")
    return array


#########################################################################
##############                Types                  ####################
#########################################################################


@dataclass(frozen=True, eq=False)
class ConductanceMatrix:
    """
    Symmetric nonnegative conductances on a connected graph.

    Self-loops (positive diagonal entries) are allowed. Connectivity is
    checked on the strictly positive off-diagonal entries.
    """
    W: NDArray[np.float64]

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
            logger.error(f"Conductance matrix with shape {W.shape}")
            raise DimensionError(f"W must be a non-empty square matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise GraphError("W must have finite entries")

        scale = max(1.0, float(np.max(np.abs(W))))
        if np.max(np.abs(W - W.T)) > SYMMETRY_TOLERANCE * scale:
            logger.error("Rejected asymmetric conductance matrix")
            raise GraphError("W must be symmetric")
        if np.any(W < 0):
            logger.error("Rejected conductance matrix with negative entries")
            raise GraphError("W entries must be nonnegative")

        W = 0.5 * (W + W.T)
        adjacency = W > 0
        np.fill_diagonal(adjacency, False)
        n_components, _ = connected_components(adjacency, directed=False)
        if n_components != 1:
            logger.error(f"Conductance graph has {n_components} connected components")
            raise GraphError(f"the conductance graph must be connected, found {n_components} components")

        object.__setattr__(self, 'W', _readonly(W))

    @property
    def n(self) -> int:
        return int(self.W.shape[0])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.W)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[float]]) -> "ConductanceMatrix":
        """Build W from ``[i, j, w]`` triples with 0-based indices; ``[i, i, w]`` is a self-loop."""
        if int(n) != n or n < 1:
            raise DimensionError(f"n must be a positive integer, got {n}")
        n = int(n)
        W = np.zeros((n, n))
        for edge in edges:
            if len(edge) != 3:
                raise GraphError(f"edge {edge!r} must be [i, j, w]")
            i, j, w = int(edge[0]), int(edge[1]), float(edge[2])
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge {edge!r} references a vertex outside 0..{n - 1}")
            if w < 0:
                raise GraphError(f"edge {edge!r} has a negative conductance")
            W[i, j] = w
            W[j, i] = w
        return cls(W)

    def edges(self) -> List[List[float]]:
        n = self.n
        return [[i, j, float(self.W[i, j])] for i in range(n) for j in range(i, n) if self.W[i, j] > 0]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """The triple (W, theta, eta) indexing every SDE and density of the model."""
    W: ConductanceMatrix
    theta: NDArray[np.float64]
    eta: NDArray[np.float64]

    def __post_init__(self) -> None:
        W = self.W if isinstance(self.W, ConductanceMatrix) else ConductanceMatrix(np.asarray(self.W))
        theta = _vector(self.theta, W.n, "theta")
        eta = _vector(self.eta, W.n, "eta")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            logger.error(f"Invalid theta {theta}")
            raise ParameterError("theta must have strictly positive finite entries")
        if not np.all(np.isfinite(eta)) or np.any(eta < 0):
            logger.error(f"Invalid eta {eta}")
            raise ParameterError("eta must have nonnegative finite entries")
        object.__setattr__(self, 'W', W)
        object.__setattr__(self, 'theta', _readonly(theta))
        object.__setattr__(self, 'eta', _readonly(eta))

    @property
    def n(self) -> int:
        return self.W.n

    @property
    def weights(self) -> NDArray[np.float64]:
        return self.W.W

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelParams":
        """
        Parse the graph JSON object ``{"n", "edges", "theta", "eta"}``.

        A dense ``"W"`` matrix may replace ``"edges"``.
        """
        allowed = {"n", "edges", "W", "theta", "eta"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ParameterError(f"unknown model key(s): {', '.join(unknown)}")
        for key in ("theta", "eta"):
            if key not in data:
                raise ParameterError(f"model is missing '{key}'")

        if "W" in data:
            W = ConductanceMatrix(np.asarray(data["W"], dtype=float))
            if "n" in data and int(data["n"]) != W.n:
                raise DimensionError(f"n={data['n']} does not match W of size {W.n}")
        else:
            if "n" not in data:
                raise ParameterError("model is missing 'n'")
            W = ConductanceMatrix.from_edges(data["n"], data.get("edges", []))
        return cls(W, np.asarray(data["theta"], dtype=float), np.asarray(data["eta"], dtype=float))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "edges": self.W.edges(),
            "theta": self.theta.tolist(),
            "eta": self.eta.tolist(),
        }


@dataclass(frozen=True, eq=False)
class TimeVector:
    """Per-vertex times; entries are nonnegative or +inf."""
    t: NDArray[np.float64]

    def __post_init__(self) -> None:
        t = np.atleast_1d(np.asarray(self.t, dtype=float))
        if t.ndim != 1:
            raise DimensionError(f"time vector must be 1-D, got shape {t.shape}")
        if np.any(np.isnan(t)) or np.any(t < 0):
            raise ParameterError("time vector entries must be >= 0 or +inf")
        object.__setattr__(self, 't', _readonly(t))

    @property
    def n(self) -> int:
        return int(self.t.shape[0])

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.t)))

    def clamp(self, other: Union["TimeVector", ArrayLike]) -> "TimeVector":
        """Entrywise minimum t ∧ other."""
        return TimeVector(np.minimum(self.t, as_time_array(other, self.n, allow_inf=True)))

    @classmethod
    def coerce(cls, value: Union["TimeVector", ArrayLike]) -> "TimeVector":
        return value if isinstance(value, TimeVector) else cls(np.asarray(value, dtype=float))


def as_time_array(value: Union[TimeVector, ArrayLike], n: int, allow_inf: bool = False) -> NDArray[np.float64]:
    """Validated float array for a time vector of length n."""
    t = TimeVector.coerce(value).t
    if t.shape[0] != n:
        raise DimensionError(f"time vector must have length {n}, got {t.shape[0]}")
    if not allow_inf and not np.all(np.isfinite(t)):
        logger.error("Infinite entry in a time vector that must be clamped first")
        raise ParameterError("infinite time entries are not allowed here; clamp with t ∧ T0 first")
    return np.array(t)


@dataclass(frozen=True, eq=False)
class BetaPoint:
    """A point of {H_beta > 0} with the Cholesky factor of H_beta as certificate."""
    beta: NDArray[np.float64]
    h_beta: NDArray[np.float64]
    pd_certificate: NDArray[np.float64]

    @classmethod
    def from_beta(cls, params: ModelParams, beta: ArrayLike) -> "BetaPoint":
        beta = _vector(beta, params.n, "beta")
        H = h_beta(params, beta)
        factor = pd_factor(H)
        if factor is None:
            raise ParameterError(f"H_beta is not positive definite at beta={beta.tolist()}")
        return cls(_readonly(beta), _readonly(H), _readonly(factor))

    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.pd_certificate))))

    def solve(self, rhs: ArrayLike) -> NDArray[np.float64]:
        return sla.cho_solve((self.pd_certificate, True), np.asarray(rhs, dtype=float))


#########################################################################
##############              Operations               ####################
#########################################################################


def h_beta(params: ModelParams, beta: ArrayLike) -> NDArray[np.float64]:
    """H_beta = 2 diag(beta) - W (no positivity requirement)."""
    beta = _vector(beta, params.n, "beta")
    return 2.0 * np.diag(beta) - params.weights


def k_t(params: ModelParams, t: Union[TimeVector, ArrayLike]) -> NDArray[np.float64]:
    """K_t = Id - diag(t) W. Not symmetric for non-constant t."""
    t = as_time_array(t, params.n)
    return np.eye(params.n) - t[:, None] * params.weights


def symmetrized_k(params: ModelParams, t: Union[TimeVector, ArrayLike]) -> NDArray[np.float64]:
    """Id - sqrt(t) W sqrt(t): symmetric, similar to K_t when t > 0."""
    root = np.sqrt(as_time_array(t, params.n))
    return np.eye(params.n) - root[:, None] * params.weights * root[None, :]


def det_k_t(params: ModelParams, t: Union[TimeVector, ArrayLike]) -> float:
    """det K_t from the LU pivots."""
    lu, piv = sla.lu_factor(k_t(params, t), check_finite=True)
    sign = -1.0 if np.count_nonzero(piv != np.arange(piv.shape[0])) % 2 else 1.0
    return float(sign * np.prod(np.diag(lu)))


def pd_factor(M: ArrayLike) -> Optional[NDArray[np.float64]]:
    """Lower Cholesky factor of M if every pivot clears the tolerance, else None."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return None
    scale = float(np.max(np.abs(np.diag(M)))) if M.size else 0.0
    if scale == 0.0:
        return None
    try:
        L = sla.cholesky(M, lower=True, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return None
    if np.min(np.diag(L)) ** 2 <= PD_TOLERANCE * scale:
        return None
    return L


def is_positive_definite(M: ArrayLike) -> bool:
    """True iff the symmetric matrix M factors with strictly positive pivots."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOLERANCE * scale:
        raise ParameterError("is_positive_definite needs a symmetric matrix")
    return pd_factor(M) is not None


def solve_checked(A: NDArray[np.float64], b: NDArray[np.float64], what: str) -> NDArray[np.float64]:
    """np.linalg.solve that reports singular or ill-conditioned systems as SingularMatrixError."""
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{what} is singular") from exc
    if not np.all(np.isfinite(x)) or np.linalg.cond(A) > SINGULAR_CONDITION:
        raise SingularMatrixError(f"{what} is numerically singular")
    return x


@dataclass(frozen=True)
class MixtureResiduals:
    """Max-norm residuals of the three Girsanov-mixture identities."""
    factorization: float
    drift: float
    quadratic_form: float

    @property
    def max(self) -> float:
        return max(self.factorization, self.drift, self.quadratic_form)

    def as_dict(self) -> Dict[str, float]:
        return {
            "factorization": self.factorization,
            "drift": self.drift,
            "quadratic_form": self.quadratic_form,
        }


def _mixture_setup(params: ModelParams, beta: Union[BetaPoint, ArrayLike],
                   T_u: Union[TimeVector, ArrayLike]) -> Tuple[BetaPoint, NDArray[np.float64]]:
    point = beta if isinstance(beta, BetaPoint) else BetaPoint.from_beta(params, beta)
    T = as_time_array(T_u, params.n)
    half_inverse = 1.0 / (2.0 * np.asarray(point.beta))
    if np.any(T <= 0) or np.any(T >= half_inverse):
        logger.error(f"Clock {T.tolist()} outside (0, 1/(2 beta)) = (0, {half_inverse.tolist()})")
        raise ParameterError("T_u must lie entrywise in (0, 1/(2 beta))")
    return point, T


def mixture_transforms(params: ModelParams,
                       T_u: Union[TimeVector, ArrayLike]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Wt = W K_u^{-1} and etat = Wt T eta + eta for the clock T(u)."""
    T = as_time_array(T_u, params.n)
    K_u = np.eye(params.n) - T[:, None] * params.weights
    W_tilde = solve_checked(K_u.T, params.weights.T, "K^(u)").T
    eta_tilde = W_tilde @ (T * params.eta) + params.eta
    return W_tilde, eta_tilde


def mixture_residuals(params: ModelParams, beta: Union[BetaPoint, ArrayLike],
                      T_u: Union[TimeVector, ArrayLike], W_tilde: ArrayLike,
                      eta_tilde: ArrayLike) -> MixtureResiduals:
    """
    Residuals of the mixture identities for a given pair (Wt, etat).

    Each side is computed independently: H_u^{-1} eta comes from a solve against H_u,
    never from K_u, so a wrong etat or Wt shows up as a nonzero residual.

    Raises:
        ParameterError: T outside (0, 1/(2 beta)) or H_beta not positive definite.
        SingularMatrixError: H_u or Ht singular.
    """
    point, T = _mixture_setup(params, beta, T_u)
    half_inverse = 1.0 / (2.0 * np.asarray(point.beta))
    W = params.weights
    eta = params.eta
    eye = np.eye(params.n)
    W_tilde = np.asarray(W_tilde, dtype=float)
    eta_tilde = np.asarray(eta_tilde, dtype=float)

    K_u = eye - T[:, None] * W
    T_tilde = half_inverse - T
    H_tilde = 2.0 * np.diag(1.0 / (2.0 * T_tilde)) - W_tilde
    K_tilde = eye - T_tilde[:, None] * W_tilde
    K_half = eye - half_inverse[:, None] * W
    factorization = float(np.max(np.abs(K_half - K_tilde @ K_u)))

    H_u = 2.0 * np.diag(1.0 / (2.0 * T)) - W
    H_u_eta = solve_checked(H_u, eta, "H^(u)")
    drift = float(np.max(np.abs(eta_tilde - H_u_eta / T)))

    lhs = float(eta_tilde @ solve_checked(H_tilde, eta_tilde, "H~^(u)"))
    rhs = float(eta @ point.solve(eta)) - float(eta @ H_u_eta)
    quadratic_form = abs(lhs - rhs)

    residuals = MixtureResiduals(factorization, drift, quadratic_form)
    logger.debug(f"Mixture identity residuals {residuals.as_dict()}")
    return residuals


def check_mixture_identities(params: ModelParams, beta: Union[BetaPoint, ArrayLike],
                             T_u: Union[TimeVector, ArrayLike]) -> MixtureResiduals:
    """
    Residuals of the identities tying H_beta to the time-changed system at clock T(u).

    With beta_u = 1/(2T), H_u = 2 beta_u - W, Wt = W K_u^{-1}, etat = Wt T eta + eta,
    Tt = 1/(2 beta) - T, Ht = 2/(2 Tt) - Wt and Kt = Id - Tt Wt:

    - factorization: K_{1/(2 beta)} = Kt K_u
    - drift: etat = T^{-1} H_u^{-1} eta
    - quadratic_form: <etat, Ht^{-1} etat> = <eta, H_beta^{-1} eta> - <eta, H_u^{-1} eta>

    Raises:
        ParameterError: T outside (0, 1/(2 beta)) or H_beta not positive definite.
        SingularMatrixError: K_u, H_u or Ht singular.
    """
    point, T = _mixture_setup(params, beta, T_u)
    W_tilde, eta_tilde = mixture_transforms(params, T)
    return mixture_residuals(params, point, T, W_tilde, eta_tilde)
