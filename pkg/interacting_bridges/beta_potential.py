"""
The random beta potential nu^{W,theta,eta}: density, quadrature normalization on
small graphs, a random-walk Metropolis oracle, the bridge beta = 1/(2 T0) to the
SDE, and the pathwise martingale quantities E_i, D(u) and their stochastic
exponentials.

nu has density on {H_beta > 0}

    (2/pi)^{n/2} exp(-<theta, H_beta theta>/2 - <eta, H_beta^{-1} eta>/2 + <eta, theta>)
        prod(theta_i) / sqrt(det H_beta).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, stats

from scripts.utils.utils import get_logger, get_section
from .errors import DimensionError, ParameterError, QuadratureError
from .graph_linalg import BetaPoint, ModelParams, TimeVector, pd_factor
from .parallel import run_chunked
from .rand_dist import RandomSource, RngStream, as_generator
from .sde_engine import RhoBatch, TimeChangedPath

logger = get_logger('beta_potential')

# exp(-27.6) ~ 1e-12: the Gaussian factor of the density is negligible beyond lower + 27.6 / theta^2
GAUSSIAN_TAIL = 27.6
QUADRATURE_MAX_DIM = 3
PD_EIGEN_TOLERANCE = 1e-12
_LOG_TWO_OVER_PI = math.log(2.0 / math.pi)


#########################################################################
##############                Types                  ####################
#########################################################################


@dataclass(frozen=True, eq=False)
class NuDensityParams:
    """Parameter triple (W, theta, eta) of nu."""
    params: ModelParams

    def __post_init__(self) -> None:
        if not isinstance(self.params, ModelParams):
            raise ParameterError(f"expected ModelParams, got {type(self.params).__name__}")

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def W(self) -> NDArray[np.float64]:
        return self.params.weights

    @property
    def theta(self) -> NDArray[np.float64]:
        return self.params.theta

    @property
    def eta(self) -> NDArray[np.float64]:
        return self.params.eta


NuLike = Union[NuDensityParams, ModelParams]


def _as_nu(p: NuLike) -> NuDensityParams:
    return p if isinstance(p, NuDensityParams) else NuDensityParams(p)


@dataclass(frozen=True)
class McmcConfig:
    """
    Random-walk Metropolis settings.

    ``walkers`` independent walkers advance together; each contributes
    n_samples / walkers thinned draws after its own burn-in.
    """
    n_samples: int
    burn_in: int
    thinning: int
    proposal_scale: float
    seed: RngStream
    walkers: int = 1
    tune_interval: int = 50

    def __post_init__(self) -> None:
        if self.n_samples < 0 or self.burn_in < 0:
            raise ParameterError("n_samples and burn_in must be >= 0")
        if self.thinning < 1:
            raise ParameterError(f"thinning must be >= 1, got {self.thinning}")
        if not self.proposal_scale > 0:
            raise ParameterError(f"proposal_scale must be positive, got {self.proposal_scale}")
        if self.walkers < 1 or self.tune_interval < 1:
            raise ParameterError("walkers and tune_interval must be >= 1")
        if not isinstance(self.seed, RngStream):
            object.__setattr__(self, 'seed', RngStream(int(self.seed)))

    @classmethod
    def from_defaults(cls, n_samples: int, seed: Union[int, RngStream], **overrides: Any) -> "McmcConfig":
        """Settings from the ``verification:`` section of config.yaml."""
        section = get_section('verification')
        values = {
            'burn_in': int(section.get('mcmc_burn_in', 2000)),
            'thinning': int(section.get('mcmc_thinning', 10)),
            'proposal_scale': float(section.get('mcmc_proposal_scale', 0.5)),
            'walkers': int(section.get('mcmc_walkers', 50)),
        }
        values.update(overrides)
        stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
        return cls(n_samples=int(n_samples), seed=stream, **values)


@dataclass(eq=False)
class McmcResult:
    samples: NDArray[np.float64]
    acceptance_rate: NDArray[np.float64]
    proposal_scale: NDArray[np.float64]
    seed: RngStream

    def as_dict(self) -> Dict[str, Any]:
        return {
            'n_samples': int(self.samples.shape[0]),
            'acceptance_rate': self.acceptance_rate.tolist(),
            'proposal_scale': self.proposal_scale.tolist(),
            'seed': self.seed.as_dict(),
        }


@dataclass(frozen=True)
class MarginalLaw:
    """
    Law of 1/(2 beta_i - W_ii) under nu.

    ``kind == "inverse_gaussian"``: IG(mu, lam). ``kind == "reciprocal_gamma"``: the
    zero-drift limit, 1/(2 gamma) with gamma ~ Gamma(1/2, rate lam/2), i.e. Levy(scale lam);
    mu is inf.
    """
    kind: str
    mu: float
    lam: float

    def distribution(self):
        if self.kind == "inverse_gaussian":
            return stats.invgauss(self.mu / self.lam, scale=self.lam)
        return stats.levy(scale=self.lam)

    def as_tuple(self) -> Tuple[float, float]:
        return self.mu, self.lam


#########################################################################
##############               Density                 ####################
#########################################################################


def nu_log_density(p: NuLike, beta: ArrayLike) -> float:
    """
    log density of nu at beta; -inf outside {H_beta > 0}.

    <eta, H_beta^{-1} eta> and log det H_beta both come from the Cholesky factor of H_beta.
    """
    p = _as_nu(p)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (p.n,):
        raise DimensionError(f"beta must have shape ({p.n},), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        return -math.inf
    try:
        point = BetaPoint.from_beta(p.params, beta)
    except ParameterError:
        return -math.inf

    theta, eta = p.theta, p.eta
    quadratic = float(theta @ point.h_beta @ theta)
    drift = float(eta @ point.solve(eta)) if np.any(eta) else 0.0
    return (0.5 * p.n * _LOG_TWO_OVER_PI - 0.5 * quadratic - 0.5 * drift + float(eta @ theta)
            + float(np.sum(np.log(theta))) - 0.5 * point.log_det())


def _log_density_batch(W: NDArray[np.float64], theta: NDArray[np.float64], eta: NDArray[np.float64],
                       betas: NDArray[np.float64]) -> NDArray[np.float64]:
    """nu log density for a stack of points (m, n); -inf where H_beta is not positive definite."""
    m, n = betas.shape
    H = 2.0 * betas[:, :, None] * np.eye(n)[None] - W[None]
    scale = np.max(np.abs(np.diagonal(H, axis1=1, axis2=2)), axis=1)
    finite = np.all(np.isfinite(betas), axis=1)
    H_safe = np.where(finite[:, None, None], H, np.eye(n))
    positive = finite & (np.linalg.eigvalsh(H_safe)[:, 0] > PD_EIGEN_TOLERANCE * np.maximum(scale, 1e-300))

    out = np.full(m, -np.inf)
    if not positive.any():
        return out
    Hp = H_safe[positive]
    _, log_det = np.linalg.slogdet(Hp)
    quadratic = np.einsum('i,rij,j->r', theta, Hp, theta)
    if np.any(eta):
        solved = np.linalg.solve(Hp, np.broadcast_to(eta, (Hp.shape[0], n))[..., None])[..., 0]
        drift = solved @ eta
    else:
        drift = 0.0
    out[positive] = (0.5 * n * _LOG_TWO_OVER_PI - 0.5 * quadratic - 0.5 * drift + float(eta @ theta)
                     + float(np.sum(np.log(theta))) - 0.5 * log_det)
    return out


def _domain_lower_bound(W: NDArray[np.float64], k: int, outer: Sequence[float]) -> float:
    """
    Smallest beta_k keeping the trailing block H[k:, k:] positive definite, given the
    outer coordinates beta_{k+1..n-1} (for which H[k+1:, k+1:] is positive definite).
    """
    if k == W.shape[0] - 1:
        return 0.5 * W[k, k]
    outer = np.asarray(outer, dtype=float)
    A = 2.0 * np.diag(outer) - W[k + 1:, k + 1:]
    w = W[k, k + 1:]
    factor = pd_factor(A)
    if factor is None:
        return math.inf
    y = np.linalg.solve(factor, w)
    return 0.5 * (W[k, k] + float(y @ y))


def _nested_ranges(W: NDArray[np.float64], upper_of, box: Optional[Sequence[Sequence[float]]]):
    """
    scipy nquad ranges, innermost variable first: variable k ranges over
    (max(box_lo, domain bound given beta_{k+1..}), min(box_hi, upper_of(k, lower))).
    """
    n = W.shape[0]

    def make(k):
        def bounds(*outer):
            lower = _domain_lower_bound(W, k, outer[:n - 1 - k])
            if box is not None:
                lower = max(lower, float(box[k][0]))
            upper = upper_of(k, lower)
            if box is not None:
                upper = min(upper, float(box[k][1]))
            if not (np.isfinite(lower) and upper > lower):
                return [0.0, 0.0]
            return [lower, upper]
        return bounds

    return [make(k) for k in range(n)]


def _nquad(func, ranges, tol: float, what: str) -> Tuple[float, float]:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('error', integrate.IntegrationWarning)
            value, error = integrate.nquad(func, ranges, opts={'epsabs': tol, 'epsrel': tol, 'limit': 200})
    except integrate.IntegrationWarning as exc:
        logger.error(f"{what} quadrature did not converge: {exc}")
        raise QuadratureError(f"{what} quadrature did not converge: {exc}") from exc
    return float(value), float(error)


def quadrature_normalization(p: NuLike, box: Optional[Sequence[Sequence[float]]] = None,
                             tol: float = 1e-8) -> Tuple[float, float]:
    """
    Mass of nu over ``box`` ∩ {H_beta > 0} by nested adaptive quadrature; returns (mass, error estimate).

    Without a box, coordinate k runs from its positive-definiteness bound to
    that bound + 27.6 / theta_k^2, where the Gaussian factor has decayed by 1e-12.

    Raises:
        QuadratureError: n > 3 or no convergence.
    """
    p = _as_nu(p)
    if p.n > QUADRATURE_MAX_DIM:
        raise QuadratureError(f"quadrature is limited to n <= {QUADRATURE_MAX_DIM}, got n={p.n}")
    if box is not None and len(box) != p.n:
        raise DimensionError(f"box must give bounds for {p.n} coordinates")
    W, theta, eta = np.asarray(p.W), np.asarray(p.theta), np.asarray(p.eta)

    def upper_of(k, lower):
        return lower + GAUSSIAN_TAIL / theta[k] ** 2

    def density(*beta):
        return math.exp(_log_density_batch(W, theta, eta, np.asarray(beta, dtype=float)[None, :])[0])

    mass, error = _nquad(density, _nested_ranges(W, upper_of, box), tol, "nu normalization")
    logger.info(f"nu mass {mass:.10f} (error estimate {error:.2e}) for n={p.n}")
    return mass, error


#########################################################################
##############            MCMC oracle                ####################
#########################################################################


def mcmc_start(p: NuLike) -> NDArray[np.float64]:
    """
    A point of {H_beta > 0}: beta_i = (W_ii + (eta_i + sum_{j != i} W_ij theta_j) / theta_i) / 2
    + 1 / (2 theta_i^2), for which H_beta theta = eta + 1/theta > 0 entrywise.
    """
    p = _as_nu(p)
    W, theta = p.W, p.theta
    off_diagonal = W - np.diag(np.diag(W))
    return 0.5 * (np.diag(W) + (p.eta + off_diagonal @ theta) / theta) + 0.5 / theta ** 2


def sample_nu_mcmc(p: NuLike, cfg: McmcConfig) -> McmcResult:
    """
    Per-coordinate Gaussian random-walk Metropolis targeting nu in beta-space.

    Proposals outside {H_beta > 0} have density zero and are rejected. During
    burn-in every ``tune_interval`` sweeps each coordinate's scale is multiplied by
    0.7 (acceptance < 20%) or 1.4 (acceptance > 40%).
    """
    p = _as_nu(p)
    gen = cfg.seed.generator()
    W, theta, eta = np.asarray(p.W), np.asarray(p.theta), np.asarray(p.eta)
    n, walkers = p.n, cfg.walkers

    per_walker = -(-cfg.n_samples // walkers)
    beta = np.tile(mcmc_start(p), (walkers, 1))
    log_p = _log_density_batch(W, theta, eta, beta)
    scale = np.full(n, cfg.proposal_scale) / theta ** 2

    window = np.zeros(n)
    accepted = np.zeros(n)
    draws = np.empty((per_walker, walkers, n))
    total_sweeps = cfg.burn_in + per_walker * cfg.thinning

    for sweep in range(total_sweeps):
        for i in range(n):
            proposal = beta.copy()
            proposal[:, i] += scale[i] * gen.standard_normal(walkers)
            log_q = _log_density_batch(W, theta, eta, proposal)
            accept = np.log(gen.random(walkers)) < log_q - log_p
            beta[accept] = proposal[accept]
            log_p[accept] = log_q[accept]
            if sweep < cfg.burn_in:
                window[i] += accept.mean()
            else:
                accepted[i] += accept.mean()

        if sweep < cfg.burn_in and (sweep + 1) % cfg.tune_interval == 0:
            rate = window / cfg.tune_interval
            scale = np.where(rate < 0.2, 0.7 * scale, np.where(rate > 0.4, 1.4 * scale, scale))
            window[:] = 0.0
        elif sweep >= cfg.burn_in and (sweep - cfg.burn_in + 1) % cfg.thinning == 0:
            draws[(sweep - cfg.burn_in) // cfg.thinning] = beta

    sampling_sweeps = total_sweeps - cfg.burn_in
    acceptance = accepted / sampling_sweeps if sampling_sweeps else np.full(n, np.nan)
    samples = draws.transpose(1, 0, 2).reshape(-1, n)[:cfg.n_samples]
    logger.info(f"MCMC for nu (n={n}): {samples.shape[0]} samples, acceptance {np.round(acceptance, 3).tolist()}, "
                f"scale {np.round(scale, 4).tolist()}, stream {cfg.seed.as_dict()}")
    if np.any((acceptance < 0.1) | (acceptance > 0.6)):
        logger.warning(f"MCMC acceptance {acceptance.tolist()} outside the tuned range")
    return McmcResult(samples=samples, acceptance_rate=acceptance, proposal_scale=scale, seed=cfg.seed)


def _chain_task(params, cfg, count, stream):
    chain_cfg = McmcConfig(cfg.n_samples, cfg.burn_in, cfg.thinning, cfg.proposal_scale, stream,
                           cfg.walkers, cfg.tune_interval)
    return sample_nu_mcmc(params, chain_cfg)


def sample_nu_chains(p: NuLike, cfg: McmcConfig, n_chains: int, threads: int = 1) -> List[McmcResult]:
    """Independent chains on streams (cfg.seed.seed, cfg.seed.stream_id + c)."""
    p = _as_nu(p)
    task = partial(_chain_task, p, cfg)
    return run_chunked(task, n_chains, cfg.seed.seed, stream_base=cfg.seed.stream_id, chunk_size=1,
                       threads=threads)


#########################################################################
##############        Marginals and SDE bridge       ####################
#########################################################################


def marginal_ig_params(p: NuLike, i: int) -> MarginalLaw:
    """IG(theta_i / (eta_i + sum_{j != i} W_ij theta_j), theta_i^2), or the reciprocal-Gamma case."""
    p = _as_nu(p)
    if not 0 <= i < p.n:
        raise DimensionError(f"vertex {i} outside 0..{p.n - 1}")
    W, theta = p.W, p.theta
    denominator = float(p.eta[i] + W[i] @ theta - W[i, i] * theta[i])
    lam = float(theta[i] ** 2)
    if denominator <= 0.0:
        return MarginalLaw("reciprocal_gamma", math.inf, lam)
    return MarginalLaw("inverse_gaussian", float(theta[i]) / denominator, lam)


def beta_from_hitting(T0: Union[TimeVector, ArrayLike]) -> NDArray[np.float64]:
    """beta = 1/(2 T0) entrywise; accepts a vector or an (R, n) array."""
    T0 = np.asarray(T0.t if isinstance(T0, TimeVector) else T0, dtype=float)
    if not np.all(np.isfinite(T0)) or np.any(T0 <= 0):
        logger.error("Hitting times must be finite and positive to map to beta")
        raise ParameterError("hitting times must be finite and > 0")
    return 0.5 / T0


#########################################################################
##############       Pathwise martingales            ####################
#########################################################################


def _single_coordinate(path: TimeChangedPath) -> Tuple[NDArray, NDArray, NDArray]:
    if path.n != 1:
        raise DimensionError(f"expected a single-coordinate path, got n={path.n}")
    valid = np.isfinite(path.rho[:, 0]) & np.isfinite(path.T[:, 0])
    count = int(np.argmin(valid)) if not valid.all() else valid.size
    return path.u_grid[:count], path.rho[:count, 0], path.T[:count, 0]


def exp_martingale_check(rho_path: TimeChangedPath, beta_i: float, theta_i: float) -> float:
    """
    max_u |E_i(u) - Exp(L_i)(u)| / E_i(u) along one coordinate, where phi = 1 - 2 beta T,

        E_i(u) = exp(-theta^2 beta + beta e^{2 rho}/phi - rho/2 + u/8) phi^{3/2} sqrt(theta),
        L_i(u) = int (-1/2 + 2 beta e^{2 rho}/phi) dB_hat,   B_hat = rho - u/2 - log phi,

    with the stochastic integral taken at left points and Exp(L) = exp(L - <L>/2).

    Raises:
        ParameterError: phi <= 0 somewhere on the path.
    """
    if not (beta_i > 0 and theta_i > 0):
        raise ParameterError("beta_i and theta_i must be positive")
    u, rho, T = _single_coordinate(rho_path)
    if u.size < 2:
        raise ParameterError("the path needs at least two grid points")
    phi = 1.0 - 2.0 * beta_i * T
    if np.any(phi <= 0):
        logger.error(f"phi <= 0 along the path for beta={beta_i}")
        raise ParameterError("1 - 2 beta T(u) must stay positive; the path is inconsistent with beta")

    growth = np.exp(2.0 * rho)
    log_E = (-theta_i ** 2 * beta_i + beta_i * growth / phi - 0.5 * rho + u / 8.0 + 1.5 * np.log(phi)
             + 0.5 * math.log(theta_i))

    if rho_path.driving_increments is not None and rho_path.driving_increments.shape[0] >= u.size - 1:
        increments = rho_path.driving_increments[:u.size - 1, 0]
    else:
        increments = np.diff(rho - 0.5 * u - np.log(phi))
    integrand = -0.5 + 2.0 * beta_i * growth[:-1] / phi[:-1]
    du = np.diff(u)
    L = np.concatenate([[0.0], np.cumsum(integrand * increments)])
    bracket = np.concatenate([[0.0], np.cumsum(integrand ** 2 * du)])
    log_exponential = L - 0.5 * bracket

    discrepancy = float(np.max(np.abs(np.expm1(log_exponential - log_E))))
    logger.debug(f"E_i vs Exp(L_i): max relative discrepancy {discrepancy:.3e} (beta={beta_i}, du={du[0]:.1e})")
    return discrepancy


def girsanov_density_batch(p: NuLike, rho: ArrayLike, T: ArrayLike, u: Union[float, ArrayLike]) -> NDArray[np.float64]:
    """
    Closed-form D(u) for R states (rho(u), T(u)), arrays (R, n):

        1{H^(u) > 0} exp(-<th, Wt th>/2 - <eta, (H^(u))^{-1} eta>/2 - <etat, th>)
            prod exp(-rho_i/2 - u/8) / sqrt(det K) exp(<theta, W theta>/2 + <eta, theta>) prod sqrt(theta_i)

    with th = e^rho, K = Id - T W, Wt = W K^{-1}, etat = Wt T eta + eta and
    (H^(u))^{-1} = K^{-1} T, so T = 0 is allowed and gives D(0) = 1 at rho = log theta.
    """
    p = _as_nu(p)
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if rho.shape != T.shape or rho.shape[1] != p.n:
        raise DimensionError(f"rho and T must both be (R, {p.n})")
    if np.any(T < 0):
        raise ParameterError("T(u) must be nonnegative")
    W, theta, eta = np.asarray(p.W), np.asarray(p.theta), np.asarray(p.eta)
    R, n = rho.shape

    out = np.zeros(R)
    finite = np.all(np.isfinite(rho), axis=1) & np.all(np.isfinite(T), axis=1)
    out[~finite] = np.nan
    if not finite.any():
        return out
    rho_f, T_f = rho[finite], T[finite]
    u_f = np.broadcast_to(np.asarray(u, dtype=float), (R,))[finite]

    root = np.sqrt(T_f)
    S = np.eye(n) - root[:, :, None] * W[None] * root[:, None, :]
    positive = np.linalg.eigvalsh(S)[:, 0] > PD_EIGEN_TOLERANCE
    values = np.zeros(rho_f.shape[0])
    if positive.any():
        rho_p, T_p, S_p, u_p = rho_f[positive], T_f[positive], S[positive], u_f[positive]
        K = np.eye(n) - T_p[:, :, None] * W[None]
        th = np.exp(rho_p)
        rhs = np.stack([th, T_p * eta], axis=2)
        solved = np.linalg.solve(K, rhs)
        k_th, k_teta = solved[..., 0], solved[..., 1]
        wt_th = k_th @ W
        eta_tilde = k_teta @ W + eta
        _, log_det = np.linalg.slogdet(S_p)
        log_D = (-0.5 * np.sum(th * wt_th, axis=1) - 0.5 * (k_teta @ eta) - np.sum(eta_tilde * th, axis=1)
                 - 0.5 * np.sum(rho_p, axis=1) - n * u_p / 8.0 - 0.5 * log_det
                 + 0.5 * float(theta @ W @ theta) + float(eta @ theta) + 0.5 * float(np.sum(np.log(theta))))
        values[positive] = np.exp(log_D)
    out[finite] = values
    return out


def _grid_index(tc: TimeChangedPath, u: float) -> int:
    k = int(round(u / tc.du))
    if k < 0 or k >= tc.u_grid.size or not math.isclose(tc.u_grid[k], u, rel_tol=1e-9, abs_tol=1e-12):
        raise ParameterError(f"u={u} is not a point of the path grid")
    return k


def girsanov_density(p: NuLike, tc: TimeChangedPath, u: float) -> float:
    """
    D(u) in closed form along a (rho, T) path; 0 when H^(u) is not positive definite.

    Raises:
        ParameterError: u is not a grid point of the path.
    """
    k = _grid_index(tc, u)
    return float(girsanov_density_batch(p, tc.rho[k][None, :], tc.T[k][None, :], float(tc.u_grid[k]))[0])


def girsanov_density_path(p: NuLike, tc: TimeChangedPath) -> NDArray[np.float64]:
    """D(u) at every grid point of the path."""
    return girsanov_density_batch(p, tc.rho, tc.T, tc.u_grid)


def girsanov_density_quadrature(p: NuLike, tc: TimeChangedPath, u: float, tol: float = 1e-8) -> Tuple[float, float]:
    """
    D(u) from its defining integral of prod_i E_i(u)^{-1} against nu, over
    {H_beta > 0} ∩ {beta_i < 1/(2 T_i(u))}; returns (value, error estimate).

    Raises:
        QuadratureError: n > 3 or no convergence.
        ParameterError: some T_i(u) is not positive.
    """
    p = _as_nu(p)
    if p.n > QUADRATURE_MAX_DIM:
        raise QuadratureError(f"quadrature is limited to n <= {QUADRATURE_MAX_DIM}, got n={p.n}")
    k = _grid_index(tc, u)
    rho, T = np.asarray(tc.rho[k], dtype=float), np.asarray(tc.T[k], dtype=float)
    if not np.all(T > 0):
        raise ParameterError("the quadrature form of D(u) needs T(u) > 0 entrywise")
    u = float(tc.u_grid[k])
    W, theta, eta = np.asarray(p.W), np.asarray(p.theta), np.asarray(p.eta)
    growth = np.exp(2.0 * rho)
    ceiling = 0.5 / T

    def upper_of(i, lower):
        return ceiling[i]

    def integrand(*beta):
        beta = np.asarray(beta, dtype=float)
        phi = 1.0 - 2.0 * beta * T
        if np.any(phi <= 0):
            return 0.0
        log_nu = _log_density_batch(W, theta, eta, beta[None, :])[0]
        if not np.isfinite(log_nu):
            return 0.0
        log_inverse_E = np.sum(theta ** 2 * beta - beta * growth / phi + 0.5 * rho - u / 8.0
                               - 1.5 * np.log(phi) - 0.5 * np.log(theta))
        return math.exp(log_inverse_E + log_nu)

    return _nquad(integrand, _nested_ranges(W, upper_of, None), tol, "D(u)")


def reference_rho_paths(params: ModelParams, n_paths: int, du: float, u_max: float, rng: RandomSource, *,
                        keep_paths: bool = True) -> RhoBatch:
    """
    rho as a standard Brownian motion from log theta, T(u) = int_0^u e^{2 rho} (trapezoid):
    the reference measure under which D is a mean-one martingale.
    """
    if n_paths < 1 or not (du > 0 and u_max > 0):
        raise ParameterError("n_paths >= 1, du > 0 and u_max > 0 are required")
    gen = as_generator(rng)
    steps = int(math.ceil(u_max / du - 1e-9))
    n = params.n
    rho = np.tile(np.log(params.theta), (int(n_paths), 1))
    T = np.zeros_like(rho)
    rho_paths = T_paths = increments = None
    if keep_paths:
        rho_paths = np.empty((steps + 1, n_paths, n))
        T_paths = np.empty((steps + 1, n_paths, n))
        increments = np.empty((steps, n_paths, n))
        rho_paths[0], T_paths[0] = rho, T

    sqrt_du = math.sqrt(du)
    for k in range(steps):
        xi = gen.standard_normal(rho.shape) * sqrt_du
        rho_next = rho + xi
        T = T + 0.5 * du * (np.exp(2.0 * rho) + np.exp(2.0 * rho_next))
        rho = rho_next
        if keep_paths:
            rho_paths[k + 1], T_paths[k + 1], increments[k] = rho, T, xi

    return RhoBatch(rho_final=rho, T_final=T, failed=np.zeros(int(n_paths), dtype=bool), du=float(du),
                    u_end=steps * du, u_grid=np.arange(steps + 1) * du if keep_paths else None,
                    rho_paths=rho_paths, T_paths=T_paths, increments=increments)


def girsanov_martingale_check(p: NuLike, tc: TimeChangedPath) -> float:
    """
    max_u |D(u) - Exp(Lt)(u)| / D(u) along a (rho, T) path, with

        Lt(u) = sum_i int (-1/2 - e^{rho_i} (Wt (e^rho + T eta) + eta)_i) d rho_i

    at left points and <Lt> = sum_i int (integrand_i)^2 du. The comparison stops at
    the first grid point where D vanishes (H^(u) no longer positive definite).
    """
    p = _as_nu(p)
    if tc.n != p.n:
        raise DimensionError(f"path has {tc.n} coordinates, parameters have {p.n}")
    D = girsanov_density_path(p, tc)
    usable = np.isfinite(D) & (D > 0)
    count = int(np.argmin(usable)) if not usable.all() else usable.size
    if count < 2:
        raise ParameterError("D(u) vanishes immediately along this path")

    W, eta = np.asarray(p.W), np.asarray(p.eta)
    rho, T = tc.rho[:count], tc.T[:count]
    n = p.n
    K = np.eye(n)[None] - T[:-1, :, None] * W[None]
    th = np.exp(rho[:-1])
    solved = np.linalg.solve(K, (th + T[:-1] * eta)[..., None])[..., 0]
    integrand = -0.5 - th * (solved @ W + eta)
    increments = np.diff(rho, axis=0)
    du = np.diff(tc.u_grid[:count])[:, None]
    L = np.concatenate([[0.0], np.cumsum(np.sum(integrand * increments, axis=1))])
    bracket = np.concatenate([[0.0], np.cumsum(np.sum(integrand ** 2 * du, axis=1))])

    discrepancy = float(np.max(np.abs(np.expm1(L - 0.5 * bracket - np.log(D[:count])))))
    logger.debug(f"D(u) vs Exp(Lt): max relative discrepancy {discrepancy:.3e} over {count} points")
    return discrepancy
