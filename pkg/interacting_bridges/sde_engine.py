"""
Simulation of the interacting SDE system with absorption at 0,

    X_i(t) = theta_i + int 1{s < T0_i} dB_i - int 1{s < T0_i} ((W psi)(s) + eta)_i ds,
    psi(t) = K_{t ∧ T0}^{-1} (X(t) + (t ∧ T0) eta),

of its Lamperti time change (rho = log X(T(u)), T(u) = int e^{2 rho}), and of
the strong-Markov restart map.

Engines are batched: one call advances R replicas at once with numpy, drops
replicas from the working set as soon as all their coordinates are absorbed,
and never raises on a single bad replica (it is flagged and logged instead).
Single-replica entry points wrap the batched ones and raise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import cumulative_trapezoid

from scripts.utils.utils import get_logger, get_section
from .errors import AdmissibilityError, DimensionError, ParameterError, UnabsorbedError
from .graph_linalg import ModelParams, TimeVector, as_time_array, k_t, solve_checked
from .parallel import run_chunked
from .rand_dist import RandomSource, as_generator, sample_bessel3_bridge, sample_ig

logger = get_logger('sde_engine')

_defaults = get_section('defaults')
DT_SCALE = float(_defaults.get('dt_scale', 1e-4))
DEFAULT_DU = float(_defaults.get('du', 1e-3))
T_MAX_MEAN_MULTIPLE = float(_defaults.get('t_max_mean_multiple', 50.0))
T_MAX_HEAVY_TAIL = float(_defaults.get('t_max_heavy_tail', 200.0))
CLOCK_HALVINGS = int(_defaults.get('clock_halvings', 160))
# det K below this is treated as loss of admissibility
DET_FLOOR = 1e-12


#########################################################################
##############                Types                  ####################
#########################################################################


@dataclass(frozen=True, eq=False)
class MultiPath:
    """
    Piecewise-linear path of the X system on a uniform grid.

    ``values[k, i]`` is X_i(grid[k]); ``absorption[i]`` is the refined hitting
    time of 0 (inf when not absorbed by the end of the grid).
    """
    grid: NDArray[np.float64]
    values: NDArray[np.float64]
    absorption: NDArray[np.float64]
    brownian_increments: Optional[NDArray[np.float64]] = None

    @property
    def n(self) -> int:
        return int(self.values.shape[1])

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def is_absorbed(self) -> bool:
        return bool(np.all(np.isfinite(self.absorption)))

    def coordinate_nodes(self, i: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Grid points where X_i > 0, followed by (T0_i, 0) when absorbed."""
        positive = self.values[:, i] > 0
        times, values = self.grid[positive], self.values[positive, i]
        if np.isfinite(self.absorption[i]):
            times = np.append(times, self.absorption[i])
            values = np.append(values, 0.0)
        return times, values

    def value_at(self, i: int, t: float) -> float:
        """X_i(t) by linear interpolation; 0 from T0_i on."""
        if t >= self.absorption[i]:
            return 0.0
        if t > self.grid[-1]:
            raise ParameterError(f"t={t} lies beyond the path grid (ends at {self.grid[-1]})")
        times, values = self.coordinate_nodes(i)
        return float(np.interp(t, times, values))


@dataclass(frozen=True, eq=False)
class TimeChangedPath:
    """
    Paired (rho, T) trajectories on a uniform u-grid; arrays are (len(u_grid), n).

    NaN entries mark u values beyond a coordinate's computed clock range.
    """
    u_grid: NDArray[np.float64]
    rho: NDArray[np.float64]
    T: NDArray[np.float64]
    driving_increments: Optional[NDArray[np.float64]] = None

    @property
    def n(self) -> int:
        return int(self.rho.shape[1])

    @property
    def du(self) -> float:
        return float(self.u_grid[1] - self.u_grid[0])

    def coordinate(self, i: int) -> "TimeChangedPath":
        increments = None if self.driving_increments is None else self.driving_increments[:, i:i + 1]
        return TimeChangedPath(self.u_grid, self.rho[:, i:i + 1], self.T[:, i:i + 1], increments)


@dataclass(frozen=True, eq=False)
class RestartParams:
    """Parameters of the system restarted at the multi-time T."""
    W_tilde: NDArray[np.float64]
    X_T: NDArray[np.float64]
    eta_tilde: NDArray[np.float64]
    T_clamped: NDArray[np.float64]


@dataclass(eq=False)
class XBatch:
    """
    Result of a batched X simulation over R replicas.

    ``x_at_t[r, p, i]`` is X_i at ``t_checkpoints[p]``; ``rho_at_u`` / ``t_at_u`` hold
    log X_i(T_i(u)) and T_i(u) at ``u_checkpoints`` computed exactly as
    ``lamperti_transform`` would on the stored path (NaN when the clock of that
    coordinate never reaches u).
    """
    hitting_times: NDArray[np.float64]
    failed: NDArray[np.bool_]
    dt: float
    t_end: float
    grid: Optional[NDArray[np.float64]] = None
    values: Optional[NDArray[np.float64]] = None
    increments: Optional[NDArray[np.float64]] = None
    t_checkpoints: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    x_at_t: Optional[NDArray[np.float64]] = None
    u_checkpoints: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    rho_at_u: Optional[NDArray[np.float64]] = None
    t_at_u: Optional[NDArray[np.float64]] = None

    @property
    def n_replicas(self) -> int:
        return int(self.hitting_times.shape[0])

    @property
    def unabsorbed(self) -> NDArray[np.bool_]:
        return np.isinf(self.hitting_times) & ~self.failed[:, None]

    def path(self, r: int) -> MultiPath:
        if self.values is None or self.grid is None:
            raise ParameterError("paths were not stored; simulate with keep_paths=True")
        increments = None if self.increments is None else self.increments[:, r, :]
        return MultiPath(self.grid, self.values[:, r, :], self.hitting_times[r], increments)

    @classmethod
    def concatenate(cls, batches: Sequence["XBatch"]) -> "XBatch":
        first = batches[0]

        def cat(name):
            parts = [getattr(b, name) for b in batches]
            return None if parts[0] is None else np.concatenate(parts, axis=0)

        return cls(
            hitting_times=cat('hitting_times'),
            failed=cat('failed'),
            dt=first.dt,
            t_end=max(b.t_end for b in batches),
            t_checkpoints=first.t_checkpoints,
            x_at_t=cat('x_at_t'),
            u_checkpoints=first.u_checkpoints,
            rho_at_u=cat('rho_at_u'),
            t_at_u=cat('t_at_u'),
        )


@dataclass(eq=False)
class RhoBatch:
    """Result of a batched rho simulation; stored paths are (steps + 1, R, n)."""
    rho_final: NDArray[np.float64]
    T_final: NDArray[np.float64]
    failed: NDArray[np.bool_]
    du: float
    u_end: float
    u_grid: Optional[NDArray[np.float64]] = None
    rho_paths: Optional[NDArray[np.float64]] = None
    T_paths: Optional[NDArray[np.float64]] = None
    increments: Optional[NDArray[np.float64]] = None
    u_checkpoints: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    rho_at_u: Optional[NDArray[np.float64]] = None
    T_at_u: Optional[NDArray[np.float64]] = None

    @property
    def n_replicas(self) -> int:
        return int(self.rho_final.shape[0])

    def path(self, r: int) -> TimeChangedPath:
        if self.rho_paths is None or self.u_grid is None:
            raise ParameterError("paths were not stored; simulate with keep_paths=True")
        increments = None if self.increments is None else self.increments[:, r, :]
        return TimeChangedPath(self.u_grid, self.rho_paths[:, r, :], self.T_paths[:, r, :], increments)

    @classmethod
    def concatenate(cls, batches: Sequence["RhoBatch"]) -> "RhoBatch":
        first = batches[0]

        def cat(name):
            parts = [getattr(b, name) for b in batches]
            return None if parts[0] is None else np.concatenate(parts, axis=0)

        return cls(
            rho_final=cat('rho_final'),
            T_final=cat('T_final'),
            failed=cat('failed'),
            du=first.du,
            u_end=first.u_end,
            u_checkpoints=first.u_checkpoints,
            rho_at_u=cat('rho_at_u'),
            T_at_u=cat('T_at_u'),
        )


#########################################################################
##############               Defaults                ####################
#########################################################################


def default_dt(params: ModelParams) -> float:
    return DT_SCALE * float(np.min(params.theta)) ** 2


def default_t_max(params: ModelParams) -> float:
    """
    50 x the largest mean of the inverse Gaussian marginals of 1/(2 beta_i - W_ii),
    or 200 theta_max^2 when some marginal is in the reciprocal-Gamma (infinite mean) case.
    """
    W = params.weights
    off_diagonal = W - np.diag(np.diag(W))
    denominators = params.eta + off_diagonal @ params.theta
    if np.all(denominators > 0):
        return T_MAX_MEAN_MULTIPLE * float(np.max(params.theta / denominators))
    return T_MAX_HEAVY_TAIL * float(np.max(params.theta)) ** 2


def _resolve_steps(params: ModelParams, dt: Optional[float], t_max: Optional[float]) -> Tuple[float, float]:
    dt = default_dt(params) if dt is None else float(dt)
    t_max = default_t_max(params) if t_max is None else float(t_max)
    if not dt > 0 or not t_max > 0:
        raise ParameterError(f"dt and t_max must be positive, got dt={dt}, t_max={t_max}")
    if dt > float(np.min(params.theta)) ** 2 / 100.0:
        logger.warning(f"dt={dt} exceeds theta_min^2/100; hitting times may be biased")
    return dt, t_max


#########################################################################
##############           Step primitives             ####################
#########################################################################


def psi(params: ModelParams, x: ArrayLike, t_clamped: Union[TimeVector, ArrayLike]) -> NDArray[np.float64]:
    """Solve K_{t ∧ T0} psi = X(t) + (t ∧ T0) eta."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.n,):
        raise DimensionError(f"x must have shape ({params.n},), got {x.shape}")
    t = as_time_array(t_clamped, params.n)
    return solve_checked(k_t(params, t), x + t * params.eta, "K_{t∧T0}")


def _batched_solve(K: NDArray[np.float64], rhs: NDArray[np.float64]) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Solve a stack of systems; returns (solutions, bad) where bad flags det K <= DET_FLOOR."""
    det = np.linalg.det(K)
    bad = ~(det > DET_FLOOR)
    K_safe = np.where(bad[:, None, None], np.eye(K.shape[-1]), K)
    solution = np.linalg.solve(K_safe, rhs[..., None])[..., 0]
    bad |= ~np.all(np.isfinite(solution), axis=1)
    return solution, bad


def _batched_positive_definite(S: NDArray[np.float64]) -> NDArray[np.bool_]:
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return np.linalg.eigvalsh(S)[:, 0] > 1e-12
    return np.min(np.diagonal(L, axis1=1, axis2=2), axis=1) ** 2 > 1e-12


def _crossings(x_prev: NDArray[np.float64], x_next: NDArray[np.float64], alive: NDArray[np.bool_],
               dt: float, gen: np.random.Generator,
               bridge_correction: bool = True) -> Tuple[NDArray[np.bool_], NDArray[np.float64]]:
    """
    Absorption inside one step. A negative endpoint is a hit at the linear
    interpolation point. A positive endpoint is a hit with the Brownian-bridge
    crossing probability exp(-2 x_prev x_next / dt); the crossing time is then
    drawn from the first-passage law of the bridge, r / (dt + r) with
    r ~ IG(x_prev dt / x_next, x_prev^2).
    """
    crossed = alive & (x_next <= 0)
    with np.errstate(divide='ignore', invalid='ignore'):
        fraction = np.where(crossed, x_prev / (x_prev - x_next), 0.0)
    hit = crossed.copy()

    if bridge_correction:
        candidates = alive & ~crossed
        uniforms = gen.random(x_prev.shape)
        with np.errstate(over='ignore', under='ignore', invalid='ignore'):
            probability = np.where(candidates, np.exp(-2.0 * x_prev * x_next / dt), 0.0)
        bridge_hit = candidates & (uniforms < probability)
        if bridge_hit.any():
            start, end = x_prev[bridge_hit], x_next[bridge_hit]
            first_passage = sample_ig(start * dt / end, start * start, gen)
            fraction[bridge_hit] = first_passage / (dt + first_passage)
            hit |= bridge_hit

    return hit, np.clip(fraction, 0.0, 1.0)


def detect_hitting(x_prev: ArrayLike, x_next: ArrayLike, dt: float, rng: RandomSource):
    """
    Sub-step absorption test. Returns (hit, refined_time_fraction); both are
    arrays when the inputs are arrays. The fraction is 0 where there is no hit.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if np.any(~(x_prev > 0)):
        raise ParameterError("detect_hitting requires x_prev > 0")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    x_prev, x_next = np.broadcast_arrays(x_prev, x_next)
    scalar = x_prev.ndim == 0
    x_prev, x_next = np.atleast_1d(x_prev).astype(float), np.atleast_1d(x_next).astype(float)

    hit, fraction = _crossings(x_prev, x_next, np.ones(x_prev.shape, dtype=bool), dt, as_generator(rng))
    fraction = np.where(hit, fraction, 0.0)
    if scalar:
        return bool(hit[0]), float(fraction[0])
    return hit, fraction


#########################################################################
##############            X system engine            ####################
#########################################################################


def _integrate_x(W: NDArray[np.float64], eta: NDArray[np.float64], x0: NDArray[np.float64], dt: float,
                 t_max: float, gen: np.random.Generator, *, keep_paths: bool = False,
                 keep_increments: bool = False, t_checkpoints: Sequence[float] = (),
                 u_checkpoints: Sequence[float] = (), bridge_correction: bool = True) -> XBatch:
    """
    Euler-Maruyama for R replicas. ``W`` is (n, n) or per-replica (R, n, n),
    ``eta`` is (n,) or (R, n); coordinates with x0 == 0 start absorbed.
    """
    R, n = x0.shape
    per_replica_W = W.ndim == 3
    per_replica_eta = eta.ndim == 2
    W_zero = not np.any(W)
    n_steps = max(1, int(math.ceil(t_max / dt - 1e-9)))
    sqrt_dt = math.sqrt(dt)
    eye = np.eye(n)
    t_checkpoints = np.asarray(t_checkpoints, dtype=float)
    u_checkpoints = np.asarray(u_checkpoints, dtype=float)
    if np.any(t_checkpoints < 0) or np.any(u_checkpoints < 0):
        raise ParameterError("checkpoint times must be nonnegative")
    # step k covers (k dt, (k + 1) dt]
    checkpoint_steps = np.maximum(np.ceil(t_checkpoints / dt - 1e-9), 1).astype(int) - 1

    X = np.array(x0, dtype=float)
    T0 = np.where(X > 0, np.inf, 0.0)
    failed = np.zeros(R, dtype=bool)
    U = np.zeros((R, n))

    x_at_t = np.zeros((R, t_checkpoints.size, n))
    x_at_t[:, t_checkpoints == 0.0, :] = X[:, None, :]
    rho_at_u = np.full((R, u_checkpoints.size, n), np.nan)
    t_at_u = np.full((R, u_checkpoints.size, n), np.nan)
    if np.any(u_checkpoints == 0.0):
        with np.errstate(divide='ignore'):
            start = np.where(X > 0, np.log(np.where(X > 0, X, 1.0)), np.nan)
        rho_at_u[:, u_checkpoints == 0.0, :] = start[:, None, :]
        t_at_u[:, u_checkpoints == 0.0, :] = np.where(X > 0, 0.0, np.nan)[:, None, :]

    values = np.zeros((n_steps + 1, R, n)) if keep_paths else None
    increments = np.zeros((n_steps, R, n)) if keep_increments else None
    if keep_paths:
        values[0] = X

    rows = np.flatnonzero(np.any(np.isinf(T0), axis=1))
    steps_taken = 0
    for k in range(n_steps):
        if rows.size == 0:
            break
        t = k * dt
        Xw = X[rows]
        T0w = T0[rows]
        alive = np.isinf(T0w)
        eta_w = eta[rows] if per_replica_eta else np.broadcast_to(eta, Xw.shape)

        if W_zero:
            drift = eta_w
            bad = np.zeros(rows.size, dtype=bool)
        else:
            W_w = W[rows] if per_replica_W else W[None, :, :]
            clamped = np.where(alive, t, T0w)
            K = eye - clamped[:, :, None] * W_w
            interaction, bad = _batched_solve(K, Xw + clamped * eta_w)
            drift = np.einsum('rij,rj->ri', np.broadcast_to(W_w, K.shape), interaction) + eta_w

        dB = gen.standard_normal(Xw.shape) * sqrt_dt
        X_new = np.where(alive, Xw + dB - drift * dt, 0.0)
        hit, fraction = _crossings(Xw, X_new, alive, dt, gen, bridge_correction)
        t_hit = t + fraction * dt
        T0w = np.where(hit, t_hit, T0w)
        X_new = np.where(hit, 0.0, X_new)
        bad |= ~np.all(np.isfinite(X_new), axis=1)

        if u_checkpoints.size:
            continuing = alive & ~hit
            with np.errstate(divide='ignore', invalid='ignore'):
                increment = np.where(continuing, 0.5 * dt * (1.0 / Xw ** 2 + 1.0 / X_new ** 2), 0.0)
            U_prev = U[rows]
            U_next = U_prev + increment
            for q, u in enumerate(u_checkpoints):
                cross = continuing & (U_prev < u) & (U_next >= u)
                if cross.any():
                    weight = (u - U_prev[cross]) / (U_next[cross] - U_prev[cross])
                    value = Xw[cross] + weight * (X_new[cross] - Xw[cross])
                    r_idx, c_idx = np.nonzero(cross)
                    rho_at_u[rows[r_idx], q, c_idx] = np.log(value)
                    t_at_u[rows[r_idx], q, c_idx] = t + weight * dt
            U[rows] = U_next

        for p in np.flatnonzero(checkpoint_steps == k):
            tp = t_checkpoints[p]
            if tp > 0.0:
                weight = min(max((tp - t) / dt, 0.0), 1.0)
                value = Xw + weight * (X_new - Xw)
                with np.errstate(divide='ignore', invalid='ignore'):
                    before_hit = Xw * (1.0 - (tp - t) / (t_hit - t))
                value = np.where(hit, np.where(t_hit > tp, before_hit, 0.0), value)
                x_at_t[rows, p, :] = np.where(alive, value, 0.0)

        if bad.any():
            lost = rows[bad]
            failed[lost] = True
            X_new[bad] = np.nan
            logger.warning(f"Replica(s) {lost[:10].tolist()} left the admissible region at step {k} "
                           f"(t={t:.6g}); {lost.size} replica(s) aborted")

        X[rows] = X_new
        T0[rows] = T0w
        if keep_paths:
            values[k + 1, rows] = X_new
        if keep_increments:
            increments[k, rows] = np.where(alive, dB, 0.0)
        steps_taken = k + 1
        rows = rows[np.any(np.isinf(T0w), axis=1) & ~bad]

    t_end = steps_taken * dt
    if rows.size:
        late = (checkpoint_steps >= steps_taken) & (t_checkpoints > 0.0)
        x_at_t[np.ix_(rows, np.flatnonzero(late), np.arange(n))] = np.nan
        logger.warning(f"{rows.size} replica(s) not absorbed by t_max={t_max}")

    hitting_times = T0.copy()
    hitting_times[failed] = np.nan
    x_at_t[failed] = np.nan
    rho_at_u[failed] = np.nan
    t_at_u[failed] = np.nan

    grid = None
    if keep_paths:
        values = values[:steps_taken + 1]
        grid = np.arange(steps_taken + 1) * dt
        for r in np.flatnonzero(failed):
            bad_steps = np.any(np.isnan(values[:, r, :]), axis=1)
            if bad_steps.any():
                values[np.argmax(bad_steps):, r, :] = np.nan
    if keep_increments:
        increments = increments[:steps_taken]

    return XBatch(hitting_times=hitting_times, failed=failed, dt=dt, t_end=t_end, grid=grid, values=values,
                  increments=increments, t_checkpoints=t_checkpoints, x_at_t=x_at_t, u_checkpoints=u_checkpoints,
                  rho_at_u=rho_at_u, t_at_u=t_at_u)


def simulate_x_batch(params: ModelParams, n_replicas: int, dt: Optional[float], t_max: Optional[float],
                     rng: RandomSource, *, keep_paths: bool = False, keep_increments: bool = False,
                     t_checkpoints: Sequence[float] = (), u_checkpoints: Sequence[float] = (),
                     bridge_correction: bool = True) -> XBatch:
    """R independent replicas of the X system started at theta."""
    dt, t_max = _resolve_steps(params, dt, t_max)
    if n_replicas < 1:
        raise ParameterError(f"n_replicas must be >= 1, got {n_replicas}")
    x0 = np.tile(params.theta, (int(n_replicas), 1))
    return _integrate_x(np.asarray(params.weights), np.asarray(params.eta), x0, dt, t_max, as_generator(rng),
                        keep_paths=keep_paths, keep_increments=keep_increments, t_checkpoints=t_checkpoints,
                        u_checkpoints=u_checkpoints, bridge_correction=bridge_correction)


def simulate_x(params: ModelParams, dt: Optional[float], t_max: Optional[float], rng: RandomSource, *,
               store_increments: bool = False, bridge_correction: bool = True) -> MultiPath:
    """
    One Euler-Maruyama path with refined absorption times.

    ``dt=None`` / ``t_max=None`` select the defaults. A coordinate still alive
    at t_max keeps an infinite absorption time and is logged.

    Raises:
        AdmissibilityError: singular K or non-finite state.
    """
    batch = simulate_x_batch(params, 1, dt, t_max, rng, keep_paths=True, keep_increments=store_increments,
                             bridge_correction=bridge_correction)
    if batch.failed[0]:
        raise AdmissibilityError("the path left the admissible region (singular K or non-finite state)",
                                 replica=0)
    return batch.path(0)


def _hitting_chunk(weights, eta, theta, dt, t_max, t_checkpoints, u_checkpoints, bridge_correction, count, stream):
    x0 = np.tile(theta, (count, 1))
    return _integrate_x(weights, eta, x0, dt, t_max, stream.generator(), t_checkpoints=t_checkpoints,
                        u_checkpoints=u_checkpoints, bridge_correction=bridge_correction)


def simulate_hitting_times(params: ModelParams, n_replicas: int, dt: Optional[float], t_max: Optional[float],
                           seed: int, *, stream_base: int = 0, threads: int = 1, chunk_size: Optional[int] = None,
                           t_checkpoints: Sequence[float] = (), u_checkpoints: Sequence[float] = (),
                           bridge_correction: bool = True) -> XBatch:
    """Chunked, optionally parallel, batch of replicas (no stored paths)."""
    dt, t_max = _resolve_steps(params, dt, t_max)
    task = partial(_hitting_chunk, np.asarray(params.weights), np.asarray(params.eta), np.asarray(params.theta),
                   dt, t_max, tuple(t_checkpoints), tuple(u_checkpoints), bridge_correction)
    batch = XBatch.concatenate(run_chunked(task, n_replicas, seed, stream_base, chunk_size, threads))
    logger.info(f"Simulated {n_replicas} X replicas: {int(batch.unabsorbed.any(axis=1).sum())} unabsorbed, "
                f"{int(batch.failed.sum())} failed")
    return batch


#########################################################################
##############           rho system engine           ####################
#########################################################################


def _integrate_rho(W: NDArray[np.float64], eta: NDArray[np.float64], rho0: NDArray[np.float64], du: float,
                   u_max: float, gen: np.random.Generator, *, keep_paths: bool = False,
                   keep_until: Optional[float] = None, keep_increments: bool = False,
                   u_checkpoints: Sequence[float] = ()) -> RhoBatch:
    """
    Euler-Maruyama for the time-changed system

        d rho_i = dB_i + (-1/2 - e^{rho_i} (Wt (e^rho + T eta) + eta)_i) du,  dT_i = e^{2 rho_i} du,

    with Wt = W K_T^{-1} refactored every step; positivity of Id - sqrt(T) W sqrt(T)
    is checked every step.
    """
    R, n = rho0.shape
    W_zero = not np.any(W)
    n_steps = max(1, int(math.ceil(u_max / du - 1e-9)))
    sqrt_du = math.sqrt(du)
    eye = np.eye(n)

    u_checkpoints = np.asarray(u_checkpoints, dtype=float)
    checkpoint_steps = np.rint(u_checkpoints / du).astype(int)
    if np.any(checkpoint_steps > n_steps) or np.any(checkpoint_steps < 0):
        raise ParameterError(f"u checkpoints must lie in [0, {u_max}]")

    kept = 0
    if keep_paths:
        kept = n_steps if keep_until is None else min(n_steps, int(math.ceil(keep_until / du - 1e-9)))

    rho = np.array(rho0, dtype=float)
    T = np.zeros((R, n))
    failed = np.zeros(R, dtype=bool)
    rho_at_u = np.full((R, u_checkpoints.size, n), np.nan)
    T_at_u = np.full((R, u_checkpoints.size, n), np.nan)
    rho_at_u[:, checkpoint_steps == 0, :] = rho[:, None, :]
    T_at_u[:, checkpoint_steps == 0, :] = 0.0

    rho_paths = T_paths = increments = None
    if keep_paths:
        rho_paths = np.empty((kept + 1, R, n))
        T_paths = np.empty((kept + 1, R, n))
        rho_paths[0], T_paths[0] = rho, T
        if keep_increments:
            increments = np.empty((kept, R, n))

    rows = np.arange(R)
    for k in range(n_steps):
        if rows.size == 0:
            break
        rho_w = rho[rows]
        T_w = T[rows]
        growth = np.exp(rho_w)

        if W_zero:
            drift = -0.5 - growth * eta
            bad = np.zeros(rows.size, dtype=bool)
        else:
            root = np.sqrt(T_w)
            bad = ~_batched_positive_definite(eye - root[:, :, None] * W[None] * root[:, None, :])
            K = eye - T_w[:, :, None] * W[None]
            solved, singular = _batched_solve(K, growth + T_w * eta)
            bad |= singular
            drift = -0.5 - growth * (solved @ W + eta)

        xi = gen.standard_normal(rho_w.shape) * sqrt_du
        rho_next = rho_w + drift * du + xi
        T_next = T_w + growth * growth * du
        bad |= ~np.all(np.isfinite(rho_next), axis=1) | ~np.all(np.isfinite(T_next), axis=1)

        if bad.any():
            lost = rows[bad]
            failed[lost] = True
            logger.warning(f"Replica(s) {lost[:10].tolist()} lost positivity of K_T at step {k} "
                           f"(u={k * du:.6g}); {lost.size} replica(s) aborted")
            rho_next[bad] = np.nan
            T_next[bad] = np.nan

        rho[rows] = rho_next
        T[rows] = T_next
        if k < kept:
            rho_paths[k + 1] = rho
            T_paths[k + 1] = T
            if increments is not None:
                increments[k] = 0.0
                increments[k, rows] = xi
        for q in np.flatnonzero(checkpoint_steps == k + 1):
            rho_at_u[:, q, :] = rho
            T_at_u[:, q, :] = T
        rows = rows[~bad]

    u_grid = np.arange(kept + 1) * du if keep_paths else None
    return RhoBatch(rho_final=rho, T_final=T, failed=failed, du=du, u_end=n_steps * du, u_grid=u_grid,
                    rho_paths=rho_paths, T_paths=T_paths, increments=increments, u_checkpoints=u_checkpoints,
                    rho_at_u=rho_at_u, T_at_u=T_at_u)


def _resolve_du(du: Optional[float], u_max: float) -> float:
    du = DEFAULT_DU if du is None else float(du)
    if not du > 0:
        raise ParameterError(f"du must be positive, got {du}")
    if not (u_max > 0 and np.isfinite(u_max)):
        raise ParameterError(f"u_max must be positive and finite, got {u_max}")
    return du


def simulate_rho_batch(params: ModelParams, n_replicas: int, du: Optional[float], u_max: float,
                       rng: RandomSource, *, keep_paths: bool = False, keep_until: Optional[float] = None,
                       keep_increments: bool = False, u_checkpoints: Sequence[float] = ()) -> RhoBatch:
    du = _resolve_du(du, u_max)
    if n_replicas < 1:
        raise ParameterError(f"n_replicas must be >= 1, got {n_replicas}")
    rho0 = np.tile(np.log(params.theta), (int(n_replicas), 1))
    return _integrate_rho(np.asarray(params.weights), np.asarray(params.eta), rho0, du, float(u_max),
                          as_generator(rng), keep_paths=keep_paths, keep_until=keep_until,
                          keep_increments=keep_increments, u_checkpoints=u_checkpoints)


def simulate_rho(params: ModelParams, du: Optional[float], u_max: float, rng: RandomSource, *,
                 store_increments: bool = False) -> TimeChangedPath:
    """
    One Euler-Maruyama path of (rho, T) from (log theta, 0).

    Raises:
        AdmissibilityError: K_{T(u)} lost positive definiteness or the state blew up.
    """
    batch = simulate_rho_batch(params, 1, du, u_max, rng, keep_paths=True, keep_increments=store_increments)
    if batch.failed[0]:
        raise AdmissibilityError("K_T(u) lost positive definiteness; reduce du", replica=0)
    return batch.path(0)


def _rho_chunk(weights, eta, theta, du, u_max, u_checkpoints, count, stream):
    rho0 = np.tile(np.log(theta), (count, 1))
    return _integrate_rho(weights, eta, rho0, du, u_max, stream.generator(), u_checkpoints=u_checkpoints)


def simulate_time_changed(params: ModelParams, n_replicas: int, du: Optional[float], u_max: float, seed: int, *,
                          stream_base: int = 0, threads: int = 1, chunk_size: Optional[int] = None,
                          u_checkpoints: Sequence[float] = ()) -> RhoBatch:
    """Chunked, optionally parallel, batch of (rho, T) replicas (no stored paths)."""
    du = _resolve_du(du, u_max)
    task = partial(_rho_chunk, np.asarray(params.weights), np.asarray(params.eta), np.asarray(params.theta),
                   du, float(u_max), tuple(u_checkpoints))
    batch = RhoBatch.concatenate(run_chunked(task, n_replicas, seed, stream_base, chunk_size, threads))
    logger.info(f"Simulated {n_replicas} rho replicas to u={u_max}: {int(batch.failed.sum())} failed")
    return batch


#########################################################################
##############            Lamperti clock             ####################
#########################################################################


def lamperti_clock(path: MultiPath, i: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """(t_k, U_i(t_k)) on the grid points before absorption, U by the trapezoid rule on 1/X_i^2."""
    positive = path.values[:, i] > 0
    count = int(positive.sum())
    if count < 2 or not np.all(positive[:count]):
        raise AdmissibilityError(f"coordinate {i} is not positive on a grid prefix")
    times = path.grid[:count]
    clock = cumulative_trapezoid(1.0 / path.values[:count, i] ** 2, times, initial=0.0)
    if np.any(np.diff(clock) <= 0):
        raise AdmissibilityError(f"non-monotone clock for coordinate {i}")
    return times, clock


def lamperti_transform(path: MultiPath, u_grid: ArrayLike) -> TimeChangedPath:
    """
    rho_i(u) = log X_i(T_i(u)) where T_i inverts U_i(t) = int_0^t ds / X_i(s)^2.

    Entries with u beyond the computed range of U_i are NaN.

    Raises:
        UnabsorbedError: some coordinate has no finite hitting time.
    """
    if not path.is_absorbed:
        raise UnabsorbedError("lamperti_transform needs every coordinate absorbed")
    u_grid = np.asarray(u_grid, dtype=float)
    if u_grid.ndim != 1 or np.any(u_grid < 0) or np.any(np.diff(u_grid) <= 0):
        raise ParameterError("u_grid must be increasing and nonnegative")

    rho = np.full((u_grid.size, path.n), np.nan)
    T = np.full((u_grid.size, path.n), np.nan)
    for i in range(path.n):
        times, clock = lamperti_clock(path, i)
        within = u_grid <= clock[-1]
        T[within, i] = np.interp(u_grid[within], clock, times)
        rho[within, i] = np.log(np.interp(u_grid[within], clock, path.values[:times.size, i]))
    return TimeChangedPath(u_grid, rho, T)


def _bridge_by_time_to_go(x_end: float, gap: float, tau: NDArray[np.float64],
                          gen: np.random.Generator) -> NDArray[np.float64]:
    """
    Bessel bridge from x_end to 0 over ``gap`` read at remaining times ``tau`` (ascending, < gap).

    Reversed in time this is the norm of a 3-D Brownian bridge from the origin to
    (x_end, 0, 0); sampling it forward in tau keeps T0 - t exact for tiny tau.
    """
    end = np.array([x_end, 0.0, 0.0])
    position = np.zeros(3)
    previous = 0.0
    out = np.empty(tau.size)
    for k, current in enumerate(tau):
        h = current - previous
        remaining = gap - previous
        mean = position + (end - position) * (h / remaining)
        std = math.sqrt(h * (gap - current) / remaining)
        position = mean + std * gen.standard_normal(3)
        out[k] = math.sqrt(float(position @ position))
        previous = current
    return out


def refine_clock_to_absorption(path: MultiPath, i: int, rng: RandomSource,
                               halvings: Optional[int] = None) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    U_i(T0_i - eps) for eps = gap, gap/2, ..., gap/2^halvings, gap = T0_i - last positive grid time.

    The last interval is filled with an exact Bessel bridge from the last positive
    value to 0, on a geometric grid accumulating at T0_i. The returned clock values
    are nondecreasing as eps shrinks.
    """
    if not np.isfinite(path.absorption[i]):
        raise UnabsorbedError(f"coordinate {i} is not absorbed")
    halvings = CLOCK_HALVINGS if halvings is None else int(halvings)
    if halvings < 1:
        raise ParameterError(f"halvings must be >= 1, got {halvings}")
    times, clock = lamperti_clock(path, i)
    gap = float(path.absorption[i] - times[-1])
    if gap <= 0:
        raise AdmissibilityError(f"absorption of coordinate {i} precedes its last positive grid point")

    eps = gap * 2.0 ** (-np.arange(halvings + 1, dtype=float))
    inner = eps[1:][::-1]
    bridge = _bridge_by_time_to_go(float(path.values[times.size - 1, i]), gap, inner, as_generator(rng))
    values = np.concatenate([[path.values[times.size - 1, i]], bridge[::-1]])
    pieces = 0.5 * (eps[:-1] - eps[1:]) * (1.0 / values[:-1] ** 2 + 1.0 / values[1:] ** 2)
    return eps, clock[-1] + np.concatenate([[0.0], np.cumsum(pieces)])


def bessel_bridge_path(theta: float, t0: float, grid: ArrayLike, rng: RandomSource) -> MultiPath:
    """A one-vertex absorbed path: exact Bessel bridge from theta to 0 on ``grid`` (from 0 to t0)."""
    grid = np.asarray(grid, dtype=float)
    values = sample_bessel3_bridge(theta, t0, grid, rng)
    return MultiPath(grid, values[:, None], np.array([float(t0)]))


def sample_time_changed_bridge(theta: float, t0: float, du: float, u_max: float, rng: RandomSource, *,
                               brownian_increments: Optional[ArrayLike] = None) -> TimeChangedPath:
    """
    Time-changed Bessel bridge of one vertex, built from its driving Brownian motion:

        1/phi(u) = 1 + (theta^2 / t0) int_0^u e^{2 B(v) + v} dv,
        rho(u) = log theta + B(u) + u/2 + log phi(u),  T(u) = t0 (1 - phi(u)).
    """
    if not (theta > 0 and t0 > 0 and du > 0 and u_max > 0):
        raise ParameterError("theta, t0, du and u_max must be positive")
    steps = int(math.ceil(u_max / du - 1e-9))
    u = np.arange(steps + 1) * du
    if brownian_increments is None:
        increments = as_generator(rng).standard_normal(steps) * math.sqrt(du)
    else:
        increments = np.asarray(brownian_increments, dtype=float)
        if increments.shape != (steps,):
            raise DimensionError(f"expected {steps} increments, got shape {increments.shape}")
    brownian = np.concatenate([[0.0], np.cumsum(increments)])
    integral = cumulative_trapezoid(np.exp(2.0 * brownian + u), u, initial=0.0)
    phi = 1.0 / (1.0 + theta * theta / t0 * integral)
    rho = math.log(theta) + brownian + 0.5 * u + np.log(phi)
    T = t0 * (1.0 - phi)
    return TimeChangedPath(u, rho[:, None], T[:, None], increments[:, None])


#########################################################################
##############               Restart                 ####################
#########################################################################


def restart_params(params: ModelParams, path: MultiPath, T: Union[TimeVector, ArrayLike]) -> RestartParams:
    """
    (W K_{T∧T0}^{-1}, X(T), eta + W K_{T∧T0}^{-1} (T∧T0) eta) for a multi-time T on this path.

    Raises:
        SingularMatrixError: K_{T∧T0} singular.
    """
    T = as_time_array(T, params.n)
    clamped = np.minimum(T, path.absorption)
    K = k_t(params, clamped)
    W_tilde = solve_checked(K.T, np.asarray(params.weights).T, "K_{T∧T0}").T
    eta_tilde = params.eta + W_tilde @ (clamped * params.eta)
    X_T = np.array([path.value_at(i, T[i]) for i in range(params.n)])
    return RestartParams(W_tilde=W_tilde, X_T=X_T, eta_tilde=eta_tilde, T_clamped=clamped)


def restart_params_batch(params: ModelParams, x_T: ArrayLike, T_clamped: ArrayLike) -> RestartParams:
    """
    Stacked restart parameters for R replicas: ``x_T`` and ``T_clamped`` are (R, n),
    the result carries W_tilde of shape (R, n, n) and eta_tilde of shape (R, n).
    """
    x_T = np.asarray(x_T, dtype=float)
    clamped = np.asarray(T_clamped, dtype=float)
    if x_T.ndim != 2 or x_T.shape != clamped.shape or x_T.shape[1] != params.n:
        raise DimensionError(f"x_T and T_clamped must both be (R, {params.n})")
    W = np.asarray(params.weights)
    K = np.eye(params.n) - clamped[:, :, None] * W[None]
    det = np.linalg.det(K)
    if np.any(~(det > DET_FLOOR)):
        raise AdmissibilityError("K_{T∧T0} is singular for some replica", replica=int(np.argmin(det)))
    # W K^{-1} = (K^{-T} W)^T
    W_tilde = np.swapaxes(np.linalg.solve(np.swapaxes(K, 1, 2), np.broadcast_to(W, K.shape)), 1, 2)
    eta_tilde = params.eta + np.einsum('rij,rj->ri', W_tilde, clamped * params.eta)
    return RestartParams(W_tilde=W_tilde, X_T=x_T, eta_tilde=eta_tilde, T_clamped=clamped)


def continue_from_restart(restarts: Union[RestartParams, Sequence[RestartParams]], dt: float, t_max: float,
                          rng: RandomSource, *, n_replicas: int = 1) -> XBatch:
    """
    Run the restarted system; coordinates with X_T == 0 start absorbed.

    A single RestartParams is replicated ``n_replicas`` times, a stacked one
    (from restart_params_batch) gives one replica per row, and a sequence gives
    one replica per entry. Hitting times are measured from the restart.
    """
    if not (dt > 0 and t_max > 0):
        raise ParameterError("dt and t_max must be positive")
    if isinstance(restarts, RestartParams) and np.ndim(restarts.W_tilde) == 3:
        W, eta, x0 = restarts.W_tilde, restarts.eta_tilde, restarts.X_T
    else:
        if isinstance(restarts, RestartParams):
            restarts = [restarts] * int(n_replicas)
        if len(restarts) == 0:
            raise ParameterError("no restart parameters given")
        W = np.stack([r.W_tilde for r in restarts])
        eta = np.stack([r.eta_tilde for r in restarts])
        x0 = np.stack([r.X_T for r in restarts])
    if np.any(x0 < 0) or not np.all(np.isfinite(x0)):
        raise ParameterError("restart positions must be finite and nonnegative")
    return _integrate_x(np.asarray(W, dtype=float), np.asarray(eta, dtype=float), np.asarray(x0, dtype=float),
                        float(dt), float(t_max), as_generator(rng))


#########################################################################
##############         Opposite-drift residual       ####################
#########################################################################


def opposite_drift_residual(tc: TimeChangedPath, T0: Union[TimeVector, ArrayLike],
                            theta: ArrayLike) -> NDArray[np.float64]:
    """
    B_hat_i(u) = rho_i(u) - log theta_i - u/2 - log((T0_i - T_i(u)) / T0_i), shape (len(u_grid), n).

    Raises:
        ParameterError: T_i(u) >= T0_i somewhere on the grid.
    """
    T0 = as_time_array(T0, tc.n)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (tc.n,) or np.any(theta <= 0):
        raise ParameterError("theta must be a positive vector matching the path")
    finite = np.isfinite(tc.T)
    if np.any(tc.T[finite] >= np.broadcast_to(T0, tc.T.shape)[finite]):
        raise ParameterError("T(u) reached T0; the residual is undefined there")
    return tc.rho - np.log(theta) - 0.5 * tc.u_grid[:, None] - np.log((T0 - tc.T) / T0)
