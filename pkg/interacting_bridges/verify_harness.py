"""
Statistical machinery and the verification suites.

Every check returns a VerificationReport whose pass flag is re-derivable from
its statistics and criteria. Null-hypothesis p-value criteria are flagged as a
family; ``run_suite`` replaces their threshold by alpha / m (Bonferroni) where m
counts the family criteria of every executed check.

Suites share expensive samples through a SuiteContext cache; every random draw
comes from an RngStream whose stream id is derived from the check name, so a
rerun with the same seed reproduces every statistic bit for bit.
"""
from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from scripts.utils.helpers import ecdf_frame, qq_frame, to_builtin
from scripts.utils.utils import get_logger, get_section
from .beta_potential import (
    McmcConfig,
    McmcResult,
    exp_martingale_check,
    girsanov_density,
    girsanov_density_batch,
    girsanov_density_quadrature,
    girsanov_martingale_check,
    marginal_ig_params,
    quadrature_normalization,
    reference_rho_paths,
    sample_nu_chains,
    sample_nu_mcmc,
)
from .errors import AdmissibilityError, BridgesError, ParameterError, QuadratureError, UnknownSuiteError
from .graph_linalg import (ConductanceMatrix, ModelParams, check_mixture_identities, h_beta, is_positive_definite,
                           mixture_residuals, mixture_transforms)
from .parallel import run_chunked
from .rand_dist import (
    RandomSource,
    RngStream,
    as_generator,
    bridge_marginal_pit,
    gig_distribution,
    ig_distribution,
    matsumoto_yor_laws,
    sample_bessel3_bridge,
    sample_gig,
)
from .sde_engine import (
    DEFAULT_DU,
    MultiPath,
    XBatch,
    continue_from_restart,
    default_dt,
    default_t_max,
    lamperti_transform,
    opposite_drift_residual,
    refine_clock_to_absorption,
    restart_params_batch,
    sample_time_changed_bridge,
    simulate_hitting_times,
    simulate_rho_batch,
    simulate_time_changed,
    simulate_x,
    simulate_x_batch,
)

logger = get_logger('verify_harness')

_verification = get_section('verification')
DEFAULT_ALPHA = float(_verification.get('alpha', 0.01))
NEGATIVE_CONTROL_THRESHOLD = float(_verification.get('negative_control_threshold', 1e-6))
# half-width scale of the asymptotic 95% band of the two-sample KS statistic
KS_NOISE_COEFFICIENT = 1.36

_OPERATORS: Dict[str, Callable[[float, float], bool]] = {
    '>': lambda value, bound: value > bound,
    '>=': lambda value, bound: value >= bound,
    '<': lambda value, bound: value < bound,
    '<=': lambda value, bound: value <= bound,
}


#########################################################################
##############          Statistical primitives       ####################
#########################################################################


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n: Union[int, Tuple[int, int]]

    def as_dict(self) -> Dict[str, Any]:
        return {'statistic': self.statistic, 'p_value': self.p_value, 'n': self.n}


def _sample_array(samples: ArrayLike, name: str, minimum: int = 1) -> NDArray[np.float64]:
    values = np.asarray(samples, dtype=float).ravel()
    if values.size == 0:
        raise ParameterError(f"{name} is empty")
    if values.size < minimum:
        raise ParameterError(f"{name} needs at least {minimum} samples, got {values.size}")
    if np.any(np.isnan(values)):
        raise ParameterError(f"{name} contains NaN")
    return values


def ks_one_sample(samples: ArrayLike, cdf: Any) -> KsResult:
    """
    One-sample Kolmogorov-Smirnov test with the asymptotic p-value.

    ``cdf`` is a callable or a frozen scipy distribution.
    """
    values = _sample_array(samples, "samples", minimum=10)
    function = cdf.cdf if hasattr(cdf, 'cdf') else cdf
    result = stats.kstest(values, function, method='asymp')
    return KsResult(float(result.statistic), float(result.pvalue), int(values.size))


def ks_two_sample(a: ArrayLike, b: ArrayLike) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test; the p-value uses the effective n = nm/(n+m)."""
    first = _sample_array(a, "first sample")
    second = _sample_array(b, "second sample")
    result = stats.ks_2samp(first, second, method='asymp')
    return KsResult(float(result.statistic), float(result.pvalue), (int(first.size), int(second.size)))


def quadratic_variation(values: ArrayLike, du: float) -> Union[float, NDArray[np.float64]]:
    """Sum of squared increments along the first axis of a path sampled on a uniform grid of step du."""
    if not du > 0:
        raise ParameterError(f"du must be positive, got {du}")
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[0] < 2:
        raise ParameterError("quadratic_variation needs at least two points")
    qv = np.sum(np.diff(values, axis=0) ** 2, axis=0)
    return float(qv) if np.ndim(qv) == 0 else qv


def chi2_independence(x: ArrayLike, y: ArrayLike, bins: int = 4) -> Tuple[float, float]:
    """Chi-square test of independence on a bins x bins table of quantile bins; returns (statistic, p)."""
    x = _sample_array(x, "x")
    y = _sample_array(y, "y")
    if x.size != y.size:
        raise ParameterError("x and y must have the same length")
    x_bins = pd.qcut(x, bins, labels=False, duplicates='drop')
    y_bins = pd.qcut(y, bins, labels=False, duplicates='drop')
    table = pd.crosstab(x_bins, y_bins)
    if table.shape[0] < 2 or table.shape[1] < 2:
        raise ParameterError("not enough distinct values for a contingency table")
    statistic, p_value, _, _ = stats.chi2_contingency(table.to_numpy())
    return float(statistic), float(p_value)


def classify_failure(stat_coarse: float, stat_half: float, n: int, m: int) -> str:
    """
    "discretization-dominated" when halving the step moves a two-sample KS
    statistic by more than half the 95% noise band, else "statistical".
    """
    noise = KS_NOISE_COEFFICIENT * math.sqrt((n + m) / (n * m)) / 2.0
    return "discretization-dominated" if abs(stat_coarse - stat_half) > noise else "statistical"


#########################################################################
##############              Reports                  ####################
#########################################################################


@dataclass(frozen=True)
class Criterion:
    """``statistics[stat] <op> threshold``; family criteria share the Bonferroni budget."""
    stat: str
    op: str
    threshold: float
    family: bool = False

    def __post_init__(self) -> None:
        if self.op not in _OPERATORS:
            raise ParameterError(f"unknown comparison {self.op!r}")

    def holds(self, value: Optional[float]) -> bool:
        if value is None or not np.isfinite(value):
            return False
        return bool(_OPERATORS[self.op](float(value), float(self.threshold)))


@dataclass
class VerificationReport:
    check_id: str
    claim: str
    statistics: Dict[str, float]
    criteria: List[Criterion]
    seeds: List[RngStream] = field(default_factory=list)
    negative_control: bool = False
    runtime_s: float = 0.0
    diagnostic: Optional[str] = None
    artifacts: Dict[str, pd.DataFrame] = field(default_factory=dict)
    reference: str = ''

    def evaluate(self) -> bool:
        return bool(self.criteria) and all(c.holds(self.statistics.get(c.stat)) for c in self.criteria)

    @property
    def passed(self) -> bool:
        return self.evaluate()

    @property
    def tolerances(self) -> Dict[str, float]:
        """'<stat> <op>' -> threshold, e.g. {'ks_p >': 0.0005}."""
        return {f"{c.stat} {c.op}": float(c.threshold) for c in self.criteria}

    def to_dict(self, include_runtime: bool = False) -> Dict[str, Any]:
        out = {
            'check_id': self.check_id,
            'reference': self.reference,
            'claim': self.claim,
            'pass': self.passed,
            'negative_control': self.negative_control,
            'statistics': to_builtin(dict(sorted(self.statistics.items()))),
            'tolerances': self.tolerances,
            'seeds': [s.as_dict() for s in self.seeds],
            'diagnostic': self.diagnostic,
        }
        if include_runtime:
            out['runtime_s'] = round(float(self.runtime_s), 3)
        return out


def family_size(reports: Sequence[VerificationReport]) -> int:
    return sum(1 for r in reports for c in r.criteria if c.family)


def apply_bonferroni(reports: Sequence[VerificationReport], alpha: float) -> List[VerificationReport]:
    """Family thresholds become alpha / m; other criteria are untouched."""
    m = family_size(reports)
    if m == 0:
        return list(reports)
    adjusted = alpha / m
    logger.info(f"Bonferroni: {m} family criteria, per-criterion threshold {adjusted:.3e}")
    return [replace(r, criteria=[replace(c, threshold=adjusted) if c.family else c for c in r.criteria])
            for r in reports]


def all_passed(reports: Sequence[VerificationReport]) -> bool:
    """True when every check that is not a negative control passes."""
    return all(r.passed for r in reports if not r.negative_control)


#########################################################################
##############           Suite configuration         ####################
#########################################################################


def _default_model() -> ModelParams:
    return ModelParams(ConductanceMatrix(np.array([[0.0, 1.0], [1.0, 0.0]])), np.ones(2), np.ones(2))


@dataclass(frozen=True, eq=False)
class SuiteConfig:
    """
    Sizes and knobs of the verification suites. Defaults come from the
    ``verification:`` section of config.yaml.
    """
    model: ModelParams = field(default_factory=_default_model)
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    negative_control_threshold: float = NEGATIVE_CONTROL_THRESHOLD
    n_hitting: int = 100_000
    n_driftless: int = 20_000
    n_beta: int = 10_000
    n_mcmc: int = 10_000
    n_restart: int = 20_000
    n_clock_paths: int = 100
    n_time_change: int = 10_000
    n_opposite: int = 1_000
    n_mixture: int = 1_000
    n_matsumoto_yor: int = 100_000
    n_girsanov: int = 20_000
    n_pathwise: int = 20
    n_bridge_paths: int = 200
    dt: Optional[float] = None
    du: Optional[float] = None
    step_scale: float = 1.0
    threads: int = 1
    chunk_size: Optional[int] = None
    restart_times: Tuple[float, ...] = (0.05, 0.08)
    bridge_time: float = 0.1
    clock_bound: float = 20.0
    clock_halvings: Optional[int] = None
    compare_u: float = 1.0
    far_u: float = 10.0
    residual_u: float = 2.0
    residual_horizon: float = 20.0
    sde_samples: Optional[NDArray[np.float64]] = None
    mcmc_samples: Optional[NDArray[np.float64]] = None
    artifacts: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ParameterError(f"alpha must be in (0, 1), got {self.alpha}")
        if not self.step_scale > 0:
            raise ParameterError(f"step_scale must be positive, got {self.step_scale}")
        if len(self.restart_times) != self.model.n:
            raise ParameterError(f"restart_times needs {self.model.n} entries, got {len(self.restart_times)}")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    @classmethod
    def from_mapping(cls, values: Optional[Mapping[str, Any]] = None, **overrides: Any) -> "SuiteConfig":
        """config.yaml ``verification:`` section, then ``values``, then keyword overrides."""
        known = set(cls.__dataclass_fields__)
        merged: Dict[str, Any] = {k: v for k, v in _verification.items() if k in known}
        merged.update(values or {})
        merged.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(merged) - known
        if unknown:
            raise ParameterError(f"unknown verification settings: {sorted(unknown)}")
        if 'restart_times' in merged:
            merged['restart_times'] = tuple(float(t) for t in merged['restart_times'])
        for name in ('sde_samples', 'mcmc_samples'):
            if merged.get(name) is not None:
                merged[name] = np.atleast_2d(np.asarray(merged[name], dtype=float))
        if 'model' in merged and 'restart_times' not in merged:
            model = merged['model']
            merged['restart_times'] = tuple(np.resize(np.array(cls.restart_times), model.n).tolist())
        return cls(**merged)

    @property
    def step_dt(self) -> float:
        base = default_dt(self.model) if self.dt is None else float(self.dt)
        return base * self.step_scale

    @property
    def step_du(self) -> float:
        base = DEFAULT_DU if self.du is None else float(self.du)
        return base * self.step_scale


def stream_base(name: str) -> int:
    """Stream id offset of a named check; chunks of that check use consecutive ids after it."""
    return (zlib.crc32(name.encode('utf-8')) & 0xFFFFFF) << 16


class SuiteContext:
    """Per-run state: the configuration and the cache of samples shared between checks."""

    def __init__(self, config: SuiteConfig):
        self.config = config
        self._cache: Dict[str, Any] = {}

    def stream(self, name: str, offset: int = 0) -> RngStream:
        return RngStream(self.config.seed, stream_base(name) + offset)

    def shared(self, name: str, factory: Callable[[], Any]) -> Any:
        if name not in self._cache:
            logger.info(f"Building shared sample '{name}'")
            self._cache[name] = factory()
        return self._cache[name]

    def sde_sample(self) -> XBatch:
        """X-system replicas on the configured model, recorded at the bridge time and the compare clock."""
        cfg = self.config

        def build() -> XBatch:
            return simulate_hitting_times(cfg.model, cfg.n_beta, cfg.step_dt, None, cfg.seed,
                                          stream_base=stream_base('shared.sde'), threads=cfg.threads,
                                          chunk_size=cfg.chunk_size, t_checkpoints=(cfg.bridge_time,),
                                          u_checkpoints=(cfg.compare_u,))
        return self.shared('shared.sde', build)

    def mcmc_sample(self) -> McmcResult:
        cfg = self.config
        return self.shared('shared.mcmc', lambda: sample_nu_mcmc(
            cfg.model, McmcConfig.from_defaults(cfg.n_mcmc, self.stream('shared.mcmc'))))


def _record_ks(statistics: Dict[str, float], criteria: List[Criterion], name: str, result: KsResult,
               alpha: float) -> None:
    statistics[f"{name}_statistic"] = result.statistic
    statistics[f"{name}_p"] = result.p_value
    criteria.append(Criterion(f"{name}_p", '>', alpha, family=True))


def _usable_hitting_rows(batch: XBatch) -> NDArray[np.bool_]:
    return ~batch.failed & np.all(np.isfinite(batch.hitting_times), axis=1)


def _lost_fraction(statistics: Dict[str, float], criteria: List[Criterion], usable: NDArray[np.bool_]) -> None:
    statistics['lost_fraction'] = float(1.0 - usable.mean())
    criteria.append(Criterion('lost_fraction', '<=', 0.01))


#########################################################################
##############              hitting_law              ####################
#########################################################################


def _censored_hitting_tests(times: NDArray[np.float64], law, t_end: float) -> Tuple[KsResult, float]:
    """
    KS of the absorbed times against the law truncated to [0, t_end], and the
    binomial p-value of the absorbed count against law.cdf(t_end).
    """
    absorbed = np.isfinite(times)
    mass = float(law.cdf(t_end))
    ks = ks_one_sample(times[absorbed], lambda t: np.minimum(law.cdf(t) / mass, 1.0))
    binomial = stats.binomtest(int(absorbed.sum()), int(times.size), min(mass, 1.0)).pvalue
    return ks, float(binomial)


def _one_vertex(theta: float, eta: float) -> ModelParams:
    return ModelParams(ConductanceMatrix(np.zeros((1, 1))), np.array([theta]), np.array([eta]))


def _hitting_law_report(ctx: SuiteContext, check_id: str, theta: float, eta: float, n_samples: int,
                        t_max: Optional[float]) -> VerificationReport:
    cfg = ctx.config
    params = _one_vertex(theta, eta)
    base = stream_base(check_id)
    dt = cfg.step_dt
    batch = simulate_hitting_times(params, n_samples, dt, t_max, cfg.seed, stream_base=base,
                                   threads=cfg.threads, chunk_size=cfg.chunk_size)
    times = batch.hitting_times[~batch.failed, 0]
    law = ig_distribution(theta, eta)
    ks, binomial = _censored_hitting_tests(times, law, batch.t_end)

    statistics: Dict[str, float] = {'absorbed_fraction': float(np.isfinite(times).mean()),
                                    'model_absorbed_fraction': float(law.cdf(batch.t_end)),
                                    'binomial_p': binomial, 'dt': float(batch.dt)}
    criteria = [Criterion('binomial_p', '>', cfg.alpha, family=True)]
    _record_ks(statistics, criteria, 'ks', ks, cfg.alpha)
    artifacts = {}
    if cfg.artifacts:
        artifacts['ecdf'] = ecdf_frame(times[np.isfinite(times)], law.cdf)
    return VerificationReport(check_id, f"The hitting time of 0 by theta + B(t) - eta t has the inverse-Gaussian "
                                        f"law of the hitting-time density (theta={theta}, eta={eta})",
                              statistics, criteria, [RngStream(cfg.seed, base)], artifacts=artifacts)


def check_hitting_drifted(ctx: SuiteContext) -> VerificationReport:
    return _hitting_law_report(ctx, 'hitting_law.drifted', 1.0, 1.0, ctx.config.n_hitting, None)


def check_hitting_driftless(ctx: SuiteContext) -> VerificationReport:
    """Zero drift: heavy-tailed law censored at 20 theta^2; same step as the drifted case, fewer replicas."""
    return _hitting_law_report(ctx, 'hitting_law.driftless', 1.0, 0.0, ctx.config.n_driftless, 20.0)


#########################################################################
##############             beta_marginals            ####################
#########################################################################


def _sde_betas(ctx: SuiteContext) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    batch = ctx.sde_sample()
    usable = _usable_hitting_rows(batch)
    return 0.5 / batch.hitting_times[usable], usable


def check_beta_marginals_sde(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    betas, usable = _sde_betas(ctx)
    values = 1.0 / (2.0 * betas - np.diag(cfg.model.weights))
    statistics: Dict[str, float] = {}
    criteria: List[Criterion] = []
    _lost_fraction(statistics, criteria, usable)
    artifacts = {}
    for i in range(cfg.model.n):
        law = marginal_ig_params(cfg.model, i).distribution()
        _record_ks(statistics, criteria, f"vertex{i}", ks_one_sample(values[:, i], law), cfg.alpha)
        if cfg.artifacts:
            artifacts[f"qq_vertex{i}"] = qq_frame(values[:, i], law.ppf)
    return VerificationReport('beta_marginals.sde', "With beta = 1/(2 T0) from the SDE, each 1/(2 beta_i - W_ii) "
                                                    "has the inverse-Gaussian marginal of nu",
                              statistics, criteria, [ctx.stream('shared.sde')], artifacts=artifacts)


def check_beta_normalization(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    statistics: Dict[str, float] = {}
    criteria: List[Criterion] = []
    diagnostic = None
    cases = [('one_vertex', _one_vertex(float(cfg.model.theta[0]), float(cfg.model.eta[0])), 1e-6)]
    if 1 < cfg.model.n <= 3:
        cases.append(('model', cfg.model, 1e-3))
    for name, params, tolerance in cases:
        try:
            mass, error = quadrature_normalization(params)
        except QuadratureError as exc:
            logger.error(f"Quadrature of nu failed for {name}: {exc}")
            mass, error, diagnostic = math.nan, math.nan, str(exc)
        statistics[f"{name}_mass"] = mass
        statistics[f"{name}_mass_error"] = abs(mass - 1.0)
        statistics[f"{name}_quadrature_estimate"] = error
        criteria.append(Criterion(f"{name}_mass_error", '<', tolerance))
    return VerificationReport('beta_marginals.normalization', "nu integrates to one over {H_beta > 0}",
                              statistics, criteria, [], diagnostic=diagnostic)


def check_beta_support(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    betas, usable = _sde_betas(ctx)
    inside = np.array([is_positive_definite(h_beta(cfg.model, b)) for b in betas])
    statistics = {'pd_fraction': float(inside.mean()) if inside.size else math.nan}
    return VerificationReport('beta_marginals.support', "SDE-derived beta lies in {H_beta > 0}",
                              statistics, [Criterion('pd_fraction', '>=', 0.999)], [ctx.stream('shared.sde')])


def check_beta_marginals_mcmc(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    result = ctx.mcmc_sample()
    values = 1.0 / (2.0 * result.samples - np.diag(cfg.model.weights))
    statistics: Dict[str, float] = {f"acceptance_vertex{i}": float(a) for i, a in enumerate(result.acceptance_rate)}
    criteria: List[Criterion] = []
    for i in range(cfg.model.n):
        law = marginal_ig_params(cfg.model, i).distribution()
        _record_ks(statistics, criteria, f"vertex{i}", ks_one_sample(values[:, i], law), cfg.alpha)
    return VerificationReport('beta_marginals.mcmc', "Metropolis draws from the nu density have the "
                                                     "inverse-Gaussian marginals", statistics, criteria,
                              [result.seed])


#########################################################################
##############            beta_equivalence           ####################
#########################################################################


def check_sde_vs_mcmc(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    seeds: List[RngStream] = []
    if cfg.sde_samples is not None:
        sde = cfg.sde_samples
    else:
        sde, _ = _sde_betas(ctx)
        seeds.append(ctx.stream('shared.sde'))
    if cfg.mcmc_samples is not None:
        mcmc = cfg.mcmc_samples
    else:
        result = ctx.mcmc_sample()
        mcmc = result.samples
        seeds.append(result.seed)
    if sde.shape[1] != cfg.model.n or mcmc.shape[1] != cfg.model.n:
        raise ParameterError(f"beta samples must have {cfg.model.n} columns")

    statistics: Dict[str, float] = {'n_sde': float(sde.shape[0]), 'n_mcmc': float(mcmc.shape[0])}
    criteria: List[Criterion] = []
    artifacts = {}
    for i in range(cfg.model.n):
        _record_ks(statistics, criteria, f"vertex{i}", ks_two_sample(sde[:, i], mcmc[:, i]), cfg.alpha)
        if cfg.artifacts:
            artifacts[f"qq_vertex{i}"] = qq_frame(sde[:, i], mcmc[:, i])
    return VerificationReport('beta_equivalence.sde_vs_mcmc', "beta = 1/(2 T0) from the SDE has the law nu "
                                                              "sampled by Metropolis", statistics, criteria, seeds,
                              artifacts=artifacts)


def check_mcmc_chains(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    mcmc_cfg = McmcConfig.from_defaults(cfg.n_mcmc // 2, ctx.stream('beta_equivalence.mcmc_chains'))
    first, second = sample_nu_chains(cfg.model, mcmc_cfg, 2, threads=cfg.threads)
    statistics: Dict[str, float] = {}
    criteria: List[Criterion] = []
    for i in range(cfg.model.n):
        _record_ks(statistics, criteria, f"vertex{i}", ks_two_sample(first.samples[:, i], second.samples[:, i]),
                   cfg.alpha)
    return VerificationReport('beta_equivalence.mcmc_chains', "Independent Metropolis chains agree in law",
                              statistics, criteria, [first.seed, second.seed])


def check_bridge_marginal(ctx: SuiteContext) -> VerificationReport:
    """Given T0, X_i(s) is the marginal of a 3-d Bessel bridge from theta_i to 0 of length T0_i."""
    cfg = ctx.config
    batch = ctx.sde_sample()
    s = cfg.bridge_time
    statistics: Dict[str, float] = {}
    criteria: List[Criterion] = []
    for i in range(cfg.model.n):
        T0 = batch.hitting_times[:, i]
        value = batch.x_at_t[:, 0, i]
        keep = ~batch.failed & np.isfinite(T0) & (T0 > s) & np.isfinite(value)
        pit = bridge_marginal_pit(value[keep], cfg.model.theta[i], T0[keep], s)
        statistics[f"vertex{i}_count"] = float(keep.sum())
        _record_ks(statistics, criteria, f"vertex{i}", ks_one_sample(pit, stats.uniform), cfg.alpha)
    return VerificationReport('beta_equivalence.bridge_marginal', "Conditionally on T0 each coordinate is a "
                                                                  "3-dimensional Bessel bridge to 0",
                              statistics, criteria, [ctx.stream('shared.sde')])


#########################################################################
##############                 restart               ####################
#########################################################################


def _restart_chunk(params: ModelParams, times: NDArray[np.float64], dt: float, t_max: float,
                   count: int, stream: RngStream) -> NDArray[np.float64]:
    gen = stream.generator()
    first = simulate_x_batch(params, count, dt, float(np.max(times)), gen, t_checkpoints=tuple(times))
    out = np.full((count, params.n), np.nan)
    ok = ~first.failed
    if not ok.any():
        return out
    diagonal = np.arange(params.n)
    x_T = first.x_at_t[ok][:, diagonal, diagonal]
    hit = first.hitting_times[ok]
    clamped = np.minimum(times[None, :], hit)
    second = continue_from_restart(restart_params_batch(params, x_T, clamped), dt, t_max, gen)
    final = np.where(hit <= times[None, :], hit, times[None, :] + second.hitting_times)
    final[second.failed] = np.nan
    out[ok] = final
    return out


def restart_hitting_times(params: ModelParams, times: Sequence[float], n_replicas: int, dt: float, t_max: float,
                          seed: int, *, stream_base: int = 0, threads: int = 1,
                          chunk_size: Optional[int] = None) -> NDArray[np.float64]:
    """Hitting times of the system stopped at the deterministic multi-time ``times`` and restarted."""
    times = np.asarray(times, dtype=float)
    if times.shape != (params.n,) or np.any(times <= 0):
        raise ParameterError(f"restart times must be {params.n} positive values")
    task = partial(_restart_chunk, params, times, float(dt), float(t_max))
    return np.concatenate(run_chunked(task, n_replicas, seed, stream_base, chunk_size, threads), axis=0)


def check_restart(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    dt, t_max = cfg.step_dt, default_t_max(cfg.model)
    base_restart, base_straight = stream_base('restart.restarted'), stream_base('restart.straight')
    restarted = restart_hitting_times(cfg.model, cfg.restart_times, cfg.n_restart, dt, t_max, cfg.seed,
                                      stream_base=base_restart, threads=cfg.threads, chunk_size=cfg.chunk_size)
    straight = simulate_hitting_times(cfg.model, cfg.n_restart, dt, t_max, cfg.seed, stream_base=base_straight,
                                      threads=cfg.threads, chunk_size=cfg.chunk_size).hitting_times
    statistics: Dict[str, float] = {}
    criteria: List[Criterion] = []
    artifacts = {}
    for i in range(cfg.model.n):
        a, b = restarted[:, i], straight[:, i]
        a, b = a[np.isfinite(a)], b[np.isfinite(b)]
        statistics[f"vertex{i}_lost"] = float(cfg.n_restart - min(a.size, b.size))
        _record_ks(statistics, criteria, f"vertex{i}", ks_two_sample(a, b), cfg.alpha)
        if cfg.artifacts:
            artifacts[f"qq_vertex{i}"] = qq_frame(a, b)
    return VerificationReport('restart.hitting_times', "Restarting at a multi-stopping time with "
                                                       "(W K^{-1}, X(T), eta + W K^{-1} T eta) preserves the law "
                                                       "of the hitting times", statistics, criteria,
                              [RngStream(cfg.seed, base_restart), RngStream(cfg.seed, base_straight)],
                              artifacts=artifacts)


#########################################################################
##############            clock_divergence           ####################
#########################################################################


def _clock_task(params: ModelParams, dt: float, halvings: Optional[int], count: int,
                stream: RngStream) -> Tuple[NDArray[np.float64], int]:
    gen = stream.generator()
    finals = np.full(params.n, np.nan)
    violations = 0
    try:
        path = simulate_x(params, dt, None, gen)
    except AdmissibilityError as exc:
        logger.warning(f"Clock path on stream {stream.as_dict()} aborted: {exc}")
        return finals, violations
    if not path.is_absorbed:
        return finals, violations
    for i in range(params.n):
        _, clock = refine_clock_to_absorption(path, i, gen, halvings)
        finals[i] = clock[-1]
        violations += int(np.sum(np.diff(clock) < 0))
    return finals, violations


def check_clock_divergence(ctx: SuiteContext) -> VerificationReport:
    """U_i(T0_i - eps) grows past the bound as eps halves, on refined grids of sampled paths."""
    cfg = ctx.config
    base = stream_base('clock_divergence.refined_clock')
    task = partial(_clock_task, cfg.model, 10.0 * cfg.step_dt, cfg.clock_halvings)
    results = run_chunked(task, cfg.n_clock_paths, cfg.seed, base, chunk_size=1, threads=cfg.threads)
    finals = np.stack([r[0] for r in results])
    usable = np.all(np.isfinite(finals), axis=1)
    statistics = {
        'min_final_clock': float(np.min(finals[usable])) if usable.any() else math.nan,
        'median_final_clock': float(np.median(finals[usable])) if usable.any() else math.nan,
        'unusable_fraction': float(1.0 - usable.mean()),
        'monotonicity_violations': float(sum(r[1] for r in results)),
    }
    criteria = [Criterion('min_final_clock', '>', cfg.clock_bound),
                Criterion('monotonicity_violations', '<=', 0.0),
                Criterion('unusable_fraction', '<=', 0.01)]
    return VerificationReport('clock_divergence.refined_clock', f"U_i(t) = int ds / X_i(s)^2 exceeds "
                                                                f"{cfg.clock_bound} before T0_i",
                              statistics, criteria, [RngStream(cfg.seed, base)])


#########################################################################
##############              time_change              ####################
#########################################################################


def _time_change_statistics(ctx: SuiteContext, batch: XBatch, scale: float,
                            seed_name: str) -> Tuple[Dict[str, KsResult], List[RngStream]]:
    cfg = ctx.config
    base = stream_base(seed_name)
    rho = simulate_time_changed(cfg.model, cfg.n_time_change, cfg.step_du * scale, cfg.far_u, cfg.seed,
                                stream_base=base, threads=cfg.threads, chunk_size=cfg.chunk_size,
                                u_checkpoints=(cfg.compare_u, cfg.far_u))
    results: Dict[str, KsResult] = {}
    rho_ok = ~rho.failed
    for i in range(cfg.model.n):
        lamperti = batch.rho_at_u[:, 0, i]
        lamperti = lamperti[~batch.failed & np.isfinite(lamperti)]
        results[f"rho_vertex{i}"] = ks_two_sample(lamperti, rho.rho_at_u[rho_ok, 0, i])
        T0 = batch.hitting_times[_usable_hitting_rows(batch), i]
        results[f"clock_vertex{i}"] = ks_two_sample(rho.T_at_u[rho_ok, 1, i], T0)
    return results, [RngStream(cfg.seed, base)]


def check_time_change(ctx: SuiteContext) -> VerificationReport:
    """
    rho(u) from the Lamperti transform of X matches the rho-system at the compare
    clock, and T(u) at a far clock matches T0.
    """
    cfg = ctx.config
    results, seeds = _time_change_statistics(ctx, ctx.sde_sample(), 1.0, 'time_change.rho')
    seeds.insert(0, ctx.stream('shared.sde'))
    statistics: Dict[str, float] = {'dt': cfg.step_dt, 'du': cfg.step_du}
    criteria: List[Criterion] = []
    for name, result in results.items():
        _record_ks(statistics, criteria, name, result, cfg.alpha)
    report = VerificationReport('time_change.lamperti', "The Lamperti transform of the X system solves the "
                                                        "time-changed rho system", statistics, criteria, seeds)
    if report.passed:
        return report

    # rerun at half the step on the same streams
    base = stream_base('shared.sde')
    halved = simulate_hitting_times(cfg.model, cfg.n_beta, cfg.step_dt / 2.0, None, cfg.seed, stream_base=base,
                                    threads=cfg.threads, chunk_size=cfg.chunk_size, u_checkpoints=(cfg.compare_u,))
    results_half, _ = _time_change_statistics(ctx, halved, 0.5, 'time_change.rho')
    worst = min(results, key=lambda name: results[name].p_value)
    n, m = results[worst].n
    report.diagnostic = classify_failure(results[worst].statistic, results_half[worst].statistic, n, m)
    report.statistics[f"{worst}_statistic_half_step"] = results_half[worst].statistic
    report.seeds.append(RngStream(cfg.seed, base))
    logger.warning(f"time_change failed on {worst}: {report.diagnostic}")
    return report


#########################################################################
##############             opposite_drift            ####################
#########################################################################


def _binned_z_scores(B_end: NDArray[np.float64], B_mid: NDArray[np.float64], T0: NDArray[np.float64],
                     bins: int = 4) -> List[float]:
    """
    z-scores, within quantile bins of each T0_i, of: the mean of B_i(u), the lag
    correlation of the two halves of B_i, and the correlation of B_i with B_j.
    """
    n = B_end.shape[1]
    u_end_var = float(np.var(B_end))
    z: List[float] = []
    for i in range(n):
        labels = pd.qcut(T0[:, i], bins, labels=False, duplicates='drop')
        for label in np.unique(labels):
            members = labels == label
            count = int(members.sum())
            if count < 10:
                continue
            root = math.sqrt(count)
            z.append(float(np.mean(B_end[members, i]) / math.sqrt(u_end_var / count)))
            first, second = B_mid[members, i], B_end[members, i] - B_mid[members, i]
            z.append(float(np.corrcoef(first, second)[0, 1] * root))
            for j in range(i + 1, n):
                z.append(float(np.corrcoef(B_end[members, i], B_end[members, j])[0, 1] * root))
    return z


def check_opposite_drift(ctx: SuiteContext) -> VerificationReport:
    """B_hat = rho - log theta - u/2 - log((T0 - T)/T0) is a Brownian motion independent of T0."""
    cfg = ctx.config
    stream = ctx.stream('opposite_drift.residual')
    du = cfg.step_du
    batch = simulate_rho_batch(cfg.model, cfg.n_opposite, du, cfg.residual_horizon, stream, keep_paths=True,
                               keep_until=cfg.residual_u)
    rows = np.flatnonzero(~batch.failed)
    T0 = batch.T_final[rows]
    residuals = np.stack([opposite_drift_residual(batch.path(r), batch.T_final[r], cfg.model.theta)
                          for r in rows], axis=1)
    u_end = float(batch.u_grid[-1])
    qv = quadratic_variation(residuals, du)
    mid = residuals.shape[0] // 2
    z = _binned_z_scores(residuals[-1], residuals[mid], T0)

    statistics = {
        'qv_ratio_error': float(np.max(np.abs(np.mean(qv, axis=0) / u_end - 1.0))),
        'initial_residual': float(np.max(np.abs(residuals[0]))),
        'max_abs_z': float(np.max(np.abs(z))) if z else math.nan,
        'failed_replicas': float(batch.failed.sum()),
    }
    criteria = [Criterion('qv_ratio_error', '<', 0.05), Criterion('initial_residual', '<=', 0.0),
                Criterion('max_abs_z', '<', 4.0)]
    return VerificationReport('opposite_drift.residual', "rho(u) = log theta + B_hat(u) + u/2 + "
                                                         "log((T0 - T(u))/T0) with B_hat Brownian and "
                                                         "independent of T0", statistics, criteria, [stream])


def check_bridge_lamperti(ctx: SuiteContext) -> VerificationReport:
    """Lamperti transform of exact Bessel bridges: the residual B_hat has quadratic variation u."""
    cfg = ctx.config
    theta, t0, u_end, du = 1.0, 1.0, cfg.residual_u, 2e-3
    grid = np.linspace(0.0, t0, 50_001)
    u_grid = np.arange(int(round(u_end / du)) + 1) * du
    stream = ctx.stream('opposite_drift.bridge_lamperti')
    gen = stream.generator()
    ratios: List[float] = []
    dropped = 0
    batch_size = 25
    for start in range(0, cfg.n_bridge_paths, batch_size):
        size = min(batch_size, cfg.n_bridge_paths - start)
        paths = sample_bessel3_bridge(theta, t0, grid, gen, size=size)
        for values in paths:
            tc = lamperti_transform(MultiPath(grid, values[:, None], np.array([t0])), u_grid)
            if not np.all(np.isfinite(tc.T)):
                dropped += 1
                continue
            residual = opposite_drift_residual(tc, [t0], [theta])
            ratios.append(quadratic_variation(residual[:, 0], du) / u_end)
    statistics = {'qv_ratio_error': abs(float(np.mean(ratios)) - 1.0) if ratios else math.nan,
                  'dropped_paths': float(dropped)}
    return VerificationReport('opposite_drift.bridge_lamperti', "The time-changed Bessel bridge has a Brownian "
                                                                "residual", statistics,
                              [Criterion('qv_ratio_error', '<', 0.10)], [stream])


#########################################################################
##############          mixture_identities           ####################
#########################################################################


def random_admissible_instance(gen: np.random.Generator, n: int) -> Tuple[ModelParams, NDArray, NDArray]:
    """
    A connected random graph on n vertices with (beta, T) admissible for the mixture
    identities: beta diagonally dominant, T inside (0, 1/(2 beta)).
    """
    W = np.zeros((n, n))
    for i in range(n - 1):
        W[i, i + 1] = W[i + 1, i] = gen.uniform(0.1, 2.0)
    extra = np.triu(gen.uniform(0.0, 1.0, (n, n)) * (gen.random((n, n)) < 0.3), k=2)
    W += extra + extra.T
    W[np.diag_indices(n)] = gen.uniform(0.0, 1.0, n) * (gen.random(n) < 0.5)
    params = ModelParams(ConductanceMatrix(W), gen.uniform(0.2, 2.0, n), gen.uniform(0.0, 2.0, n))
    beta = 0.5 * W.sum(axis=1) + gen.uniform(0.2, 2.0, n)
    T = gen.uniform(0.05, 0.95, n) / (2.0 * beta)
    return params, beta, T


def check_mixture_random(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    stream = ctx.stream('mixture_identities.random')
    gen = stream.generator()
    worst = {'factorization': 0.0, 'drift': 0.0, 'quadratic_form': 0.0}
    for k in range(cfg.n_mixture):
        params, beta, T = random_admissible_instance(gen, 1 + k % 3)
        residuals = check_mixture_identities(params, beta, T)
        for name, value in residuals.as_dict().items():
            worst[name] = max(worst[name], value)
    statistics = {f"max_{name}": value for name, value in worst.items()}
    statistics['max_residual'] = max(worst.values())
    return VerificationReport('mixture_identities.random', "K_{1/2beta} = Kt K, etat = T^{-1} H^{-1} eta and the "
                                                           "quadratic-form splitting hold on random admissible "
                                                           "instances", statistics,
                              [Criterion('max_residual', '<', 1e-9)], [stream])


def check_mixture_decoupled(ctx: SuiteContext) -> VerificationReport:
    """W = 0 on a single vertex: the identities reduce to scalar algebra, residuals are at rounding level."""
    cfg = ctx.config
    stream = ctx.stream('mixture_identities.decoupled')
    gen = stream.generator()
    worst = 0.0
    for _ in range(max(1, cfg.n_mixture // 10)):
        params = _one_vertex(gen.uniform(0.2, 2.0), gen.uniform(0.0, 2.0))
        beta = gen.uniform(0.2, 2.0, 1)
        T = gen.uniform(0.05, 0.95, 1) / (2.0 * beta)
        worst = max(worst, check_mixture_identities(params, beta, T).max)
    return VerificationReport('mixture_identities.decoupled', "Without conductances the mixture identities are "
                                                              "exact", {'max_residual': worst},
                              [Criterion('max_residual', '<=', 1e-14)], [stream])


def check_mixture_perturbed(ctx: SuiteContext) -> VerificationReport:
    """Negative control: a shifted etat must break the drift identity on every instance."""
    cfg = ctx.config
    stream = ctx.stream('mixture_identities.perturbed_drift')
    gen = stream.generator()
    smallest = math.inf
    for k in range(max(1, cfg.n_mixture // 10)):
        params, beta, T = random_admissible_instance(gen, 1 + k % 3)
        W_tilde, eta_tilde = mixture_transforms(params, T)
        shifted = eta_tilde + 1e-3 * gen.standard_normal(params.n)
        smallest = min(smallest, mixture_residuals(params, beta, T, W_tilde, shifted).drift)
    return VerificationReport('mixture_identities.perturbed_drift', "A perturbed etat is rejected by the drift "
                                                                    "identity", {'min_drift_residual': smallest},
                              [Criterion('min_drift_residual', '>', 1e-6)], [stream], negative_control=True)


#########################################################################
##############               martingale              ####################
#########################################################################


_MARTINGALE_BETAS = (0.5, 1.0, 2.0)


def check_exp_martingale(ctx: SuiteContext) -> VerificationReport:
    """
    Along time-changed Bessel bridges with T0 = 1/(2 beta), E_i equals the stochastic
    exponential of L_i; the discrepancy shrinks like sqrt(du).
    """
    stream = ctx.stream('martingale.exp_martingale')
    gen = stream.generator()
    du, u_max, paths = 1e-4, 2.0, 5
    fine: List[float] = []
    coarse: List[float] = []
    for beta in _MARTINGALE_BETAS:
        t0 = 0.5 / beta
        for _ in range(paths):
            tc = sample_time_changed_bridge(1.0, t0, du, u_max, gen)
            fine.append(exp_martingale_check(tc, beta, 1.0))
            aggregated = tc.driving_increments[:, 0].reshape(-1, 4).sum(axis=1)
            rough = sample_time_changed_bridge(1.0, t0, 4.0 * du, u_max, gen, brownian_increments=aggregated)
            coarse.append(exp_martingale_check(rough, beta, 1.0))
    statistics = {
        'max_discrepancy': float(np.max(fine)),
        'mean_discrepancy': float(np.mean(fine)),
        'mean_discrepancy_4du': float(np.mean(coarse)),
        'refinement_ratio': float(np.mean(coarse) / np.mean(fine)),
    }
    criteria = [Criterion('max_discrepancy', '<', 0.05), Criterion('refinement_ratio', '>', 1.2),
                Criterion('refinement_ratio', '<', 4.0)]
    return VerificationReport('martingale.exp_martingale', "E_i(u) is the stochastic exponential of L_i(u)",
                              statistics, criteria, [stream])


def check_girsanov_mean(ctx: SuiteContext) -> VerificationReport:
    cfg = ctx.config
    stream = ctx.stream('martingale.girsanov_mean')
    u = 0.5
    batch = reference_rho_paths(cfg.model, cfg.n_girsanov, cfg.step_du, u, stream, keep_paths=False)
    D = girsanov_density_batch(cfg.model, batch.rho_final, batch.T_final, batch.u_end)
    standard_error = float(np.std(D, ddof=1) / math.sqrt(D.size))
    statistics = {'mean': float(np.mean(D)), 'standard_error': standard_error,
                  'z': float((np.mean(D) - 1.0) / standard_error), 'zero_fraction': float(np.mean(D == 0))}
    statistics['abs_z'] = abs(statistics['z'])
    return VerificationReport('martingale.girsanov_mean', "D(u) has mean one under the reference measure",
                              statistics, [Criterion('abs_z', '<', 4.0)], [stream])


def check_girsanov_pathwise(ctx: SuiteContext) -> VerificationReport:
    """D(u) against the stochastic exponential of Lt, its closed form against its defining integral, and D(0)."""
    cfg = ctx.config
    stream = ctx.stream('martingale.girsanov_pathwise')
    u = 0.5
    batch = reference_rho_paths(cfg.model, cfg.n_pathwise, 1e-4, u, stream, keep_paths=True)
    discrepancies = [girsanov_martingale_check(cfg.model, batch.path(r)) for r in range(cfg.n_pathwise)]
    tc = batch.path(0)
    statistics: Dict[str, float] = {
        'median_discrepancy': float(np.median(discrepancies)),
        'max_discrepancy': float(np.max(discrepancies)),
        'initial_error': abs(girsanov_density(cfg.model, tc, 0.0) - 1.0),
    }
    criteria = [Criterion('median_discrepancy', '<', 0.05), Criterion('initial_error', '<', 1e-12)]
    diagnostic = None
    if cfg.model.n <= 3:
        u_end = float(tc.u_grid[-1])
        closed = girsanov_density(cfg.model, tc, u_end)
        try:
            integral, _ = girsanov_density_quadrature(cfg.model, tc, u_end)
            statistics['quadrature_relative_error'] = abs(integral - closed) / closed if closed > 0 else math.nan
        except QuadratureError as exc:
            logger.error(f"Quadrature of D(u) failed: {exc}")
            statistics['quadrature_relative_error'] = math.nan
            diagnostic = str(exc)
        criteria.append(Criterion('quadrature_relative_error', '<', 1e-3))
    return VerificationReport('martingale.girsanov_pathwise', "D(u) = Exp(Lt)(u) pathwise and equals the "
                                                              "nu-mixture of prod E_i^{-1}", statistics, criteria,
                              [stream], diagnostic=diagnostic)


#########################################################################
##############             matsumoto_yor             ####################
#########################################################################


def matsumoto_yor_check(theta: float, eta: float, n: int, rng: RandomSource, convention: str = "anchored",
                        alpha: float = DEFAULT_ALPHA,
                        negative_threshold: float = NEGATIVE_CONTROL_THRESHOLD) -> VerificationReport:
    """
    Forward: (1/T0, T1 - T0) drawn from the first product law, mapped to
    (1/T0 - 1/T1, T1) and tested against the second product law. Reverse: the
    second law mapped back and tested against the first. Each direction gets two
    KS tests and a binned chi-square independence test.

    The "anchored" convention is a null check; any other convention is a
    negative control that passes when the smallest p-value falls below
    ``negative_threshold``.
    """
    if n < 10:
        raise ParameterError(f"n must be >= 10, got {n}")
    gen = as_generator(rng)
    started = time.perf_counter()
    (law_x, law_y), (law_a, law_b) = matsumoto_yor_laws(theta, eta, convention)

    x, y = sample_gig(law_x, gen, size=n), sample_gig(law_y, gen, size=n)
    t0 = 1.0 / x
    t1 = t0 + y
    forward = (1.0 / t0 - 1.0 / t1, t1)

    a, b = sample_gig(law_a, gen, size=n), sample_gig(law_b, gen, size=n)
    r1 = b
    r0 = 1.0 / (a + 1.0 / b)
    reverse = (1.0 / r0, r1 - r0)

    p_values = {
        'forward_first': ks_one_sample(forward[0], gig_distribution(law_a)).p_value,
        'forward_second': ks_one_sample(forward[1], gig_distribution(law_b)).p_value,
        'forward_independence': chi2_independence(*forward)[1],
        'reverse_first': ks_one_sample(reverse[0], gig_distribution(law_x)).p_value,
        'reverse_second': ks_one_sample(reverse[1], gig_distribution(law_y)).p_value,
        'reverse_independence': chi2_independence(*reverse)[1],
    }
    statistics = {f"{name}_p": value for name, value in p_values.items()}
    statistics['min_p'] = min(p_values.values())
    negative = convention != "anchored"
    if negative:
        criteria = [Criterion('min_p', '<', negative_threshold)]
    else:
        criteria = [Criterion(f"{name}_p", '>', alpha, family=True) for name in p_values]

    seeds = [rng] if isinstance(rng, RngStream) else []
    report = VerificationReport(
        f"matsumoto_yor.{convention}",
        f"(1/T0, T1 - T0) independent with GIG/Gamma laws maps to independent (1/T0 - 1/T1, T1) "
        f"(theta={theta}, eta={eta}, {convention} parameters)",
        statistics, criteria, seeds, negative_control=negative,
        runtime_s=time.perf_counter() - started,
        diagnostic=f"convention={convention}",
        reference=SUITE_REFERENCES['matsumoto_yor'])
    logger.info(f"Matsumoto-Yor check ({convention}, theta={theta}, eta={eta}): min p {statistics['min_p']:.3e}")
    return report


def _matsumoto_yor_case(check_id: str, theta: float, eta: float, convention: str) -> Callable:
    def check(ctx: SuiteContext) -> VerificationReport:
        cfg = ctx.config
        report = matsumoto_yor_check(theta, eta, cfg.n_matsumoto_yor, ctx.stream(check_id), convention,
                                     cfg.alpha, cfg.negative_control_threshold)
        report.check_id = check_id
        return report
    check.__name__ = f"check_{check_id.replace('.', '_')}"
    return check


#########################################################################
##############                 Suites                ####################
#########################################################################


SUITES: Dict[str, Tuple[Callable[[SuiteContext], VerificationReport], ...]] = {
    'hitting_law': (check_hitting_drifted, check_hitting_driftless),
    'beta_marginals': (check_beta_marginals_sde, check_beta_normalization, check_beta_support,
                       check_beta_marginals_mcmc),
    'beta_equivalence': (check_sde_vs_mcmc, check_mcmc_chains, check_bridge_marginal),
    'restart': (check_restart,),
    'clock_divergence': (check_clock_divergence,),
    'time_change': (check_time_change,),
    'opposite_drift': (check_opposite_drift, check_bridge_lamperti),
    'mixture_identities': (check_mixture_random, check_mixture_decoupled, check_mixture_perturbed),
    'martingale': (check_exp_martingale, check_girsanov_mean, check_girsanov_pathwise),
    'matsumoto_yor': (_matsumoto_yor_case('matsumoto_yor.anchored_1_1', 1.0, 1.0, 'anchored'),
                      _matsumoto_yor_case('matsumoto_yor.anchored_1_2', 1.0, 2.0, 'anchored'),
                      _matsumoto_yor_case('matsumoto_yor.halved_1_1', 1.0, 1.0, 'halved')),
}
# Short ids of the results each suite establishes; accepted as suite ids and stamped on every report.
SUITE_REFERENCES: Dict[str, str] = {
    'hitting_law': 'prop_a',
    'beta_marginals': 'prop_b',
    'beta_equivalence': 'thm_b',
    'restart': 'thm_c',
    'clock_divergence': 'lemma1',
    'time_change': 'thm3',
    'opposite_drift': 'thm4',
    'mixture_identities': 'lemma2',
    'martingale': 'martingale',
    'matsumoto_yor': 'my_prop',
}
SUITE_ALIASES: Dict[str, str] = {ref: suite for suite, ref in SUITE_REFERENCES.items() if ref != suite}
SUITE_IDS = tuple(SUITES) + tuple(SUITE_ALIASES) + ('all',)

_CHECK_SUITE: Dict[Callable, str] = {check: suite for suite, checks in SUITES.items() for check in checks}


def resolve_suite(suite_id: str) -> str:
    """Canonical suite name for a suite id or its alias ('lemma2' -> 'mixture_identities')."""
    suite_id = SUITE_ALIASES.get(suite_id, suite_id)
    if suite_id != 'all' and suite_id not in SUITES:
        logger.error(f"Unknown suite '{suite_id}'")
        raise UnknownSuiteError(f"unknown suite '{suite_id}'; choose one of {', '.join(SUITE_IDS)}")
    return suite_id


def suite_checks(suite_id: str) -> List[Callable[[SuiteContext], VerificationReport]]:
    suite_id = resolve_suite(suite_id)
    if suite_id == 'all':
        return [check for checks in SUITES.values() for check in checks]
    return list(SUITES[suite_id])


def run_suite(suite_id: str, config: Union[SuiteConfig, Mapping[str, Any], None] = None) -> List[VerificationReport]:
    """
    Run every check of a suite in a fixed order and apply the Bonferroni thresholds.

    Raises:
        UnknownSuiteError: suite_id is neither a suite, an alias nor 'all'.
    """
    checks = suite_checks(suite_id)
    cfg = config if isinstance(config, SuiteConfig) else SuiteConfig.from_mapping(config)
    ctx = SuiteContext(cfg)
    reports: List[VerificationReport] = []
    for check in checks:
        started = time.perf_counter()
        try:
            report = check(ctx)
        except BridgesError as exc:
            logger.error(f"{check.__name__} raised {type(exc).__name__}: {exc}")
            report = VerificationReport(check.__name__.replace('check_', ''), "check aborted", {}, [],
                                        diagnostic=f"{type(exc).__name__}: {exc}")
        report.runtime_s = time.perf_counter() - started
        report.reference = SUITE_REFERENCES[_CHECK_SUITE[check]]
        reports.append(report)

    reports = apply_bonferroni(reports, cfg.alpha)
    for report in reports:
        logger.info(f"{report.check_id}: pass={report.passed} negative_control={report.negative_control} "
                    f"runtime={report.runtime_s:.1f}s statistics={to_builtin(report.statistics)}")
    return reports
