"""
Command-line surface: experiment configuration, orchestration of the engines
and data-only emission (CSV / JSON tables with a provenance line).

Exit codes: 0 success, 1 a verification check failed (or a run aborted),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from db import (
    DB_ENV_VAR,
    create_tables,
    establecer_engine,
    establecer_session,
    inject_verification_run,
    retrieve_check_history,
    retrieve_verification_runs,
    session_scope,
)
from scripts.utils.helpers import (
    path_frame,
    read_csv_with_provenance,
    to_builtin,
    write_csv_with_provenance,
    write_json,
    write_meta,
)
from scripts.utils.utils import config_hash, ensure_dir_exists, get_logger, get_section, resolve_seed
from .beta_potential import McmcConfig, beta_from_hitting, nu_log_density, sample_nu_chains
from .errors import BridgesError, ConfigError, ParameterError
from .graph_linalg import ModelParams
from .parallel import default_threads
from .rand_dist import GigParams, RngStream, gig_density, ig_density
from .sde_engine import (
    DEFAULT_DU,
    default_dt,
    default_t_max,
    MultiPath,
    XBatch,
    lamperti_transform,
    opposite_drift_residual,
    simulate_hitting_times,
    simulate_rho_batch,
    simulate_time_changed,
    simulate_x_batch,
)
from .verify_harness import (SUITE_IDS, SuiteConfig, VerificationReport, all_passed, resolve_suite, run_suite,
                             stream_base)

logger = get_logger('cli')

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

_defaults = get_section('defaults')
DEFAULT_REPLICAS = int(_defaults.get('replicas', 10_000))
DEFAULT_U_MAX = float(_defaults.get('u_max', 10.0))
DEFAULT_OUT_DIR = str(_defaults.get('out_dir', 'runs/latest'))
# u-grid points kept per dumped rho / T / Bhat path; X paths are dumped in full
PATH_POINTS = int(_defaults.get('path_points', 2000))

DEFAULT_MODEL: Dict[str, Any] = {"n": 2, "edges": [[0, 1, 1.0]], "theta": [1.0, 1.0], "eta": [1.0, 1.0]}
FORMATS = ('csv', 'json')

_TOP_KEYS = ('model', 'steps', 'replicas', 'seed', 'outputs', 'verification')
_STEP_KEYS = ('dt', 'du', 't_max', 'u_max')
_OUTPUT_KEYS = ('dir', 'formats')
# set from the model / seed / sample dumps, never from the verification block
_VERIFICATION_RESERVED = ('model', 'seed', 'sde_samples', 'mcmc_samples')


#########################################################################
##############          Experiment configuration     ####################
#########################################################################


@dataclass(frozen=True)
class StepConfig:
    dt: float
    du: float
    t_max: float
    u_max: float


@dataclass(frozen=True)
class OutputConfig:
    dir: str
    formats: Tuple[str, ...]


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A validated experiment; ``steps`` drive the simulate/sample commands, ``verification`` the suites."""
    model: ModelParams
    steps: StepConfig
    replicas: int
    seed: Optional[int]
    outputs: OutputConfig
    verification: Dict[str, Any] = field(default_factory=dict)

    def resolved(self) -> Dict[str, Any]:
        """Everything that determines the outputs (the output directory does not)."""
        return {
            'model': self.model.to_dict(),
            'steps': {k: getattr(self.steps, k) for k in _STEP_KEYS},
            'replicas': self.replicas,
            'seed': self.seed,
            'formats': list(self.outputs.formats),
            'verification': to_builtin(dict(sorted(self.verification.items()))),
        }


def _config_error(message: str, key: Optional[str]) -> ConfigError:
    logger.error(message)
    return ConfigError(message, key=key)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive(key: str, value: Any) -> float:
    if not _is_number(value) or not math.isfinite(value) or value <= 0:
        raise _config_error(f"{key} must be a positive number, got {value!r}", key)
    return float(value)


def _mapping(key: str, value: Any, allowed: Sequence[str]) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise _config_error(f"{key} must be an object", key)
    unknown = sorted(set(value) - set(allowed))
    if unknown:
        dotted = f"{key}.{unknown[0]}" if key else unknown[0]
        raise _config_error(f"unknown configuration key '{dotted}'", dotted)
    return value


def load_config_document(path: str) -> Mapping[str, Any]:
    """JSON (or YAML for .yaml / .yml) experiment file as a mapping."""
    if not os.path.isfile(path):
        raise _config_error(f"config file not found: {path}", None)
    try:
        with open(path, 'r') as handle:
            if path.endswith(('.yaml', '.yml')):
                document = yaml.safe_load(handle)
            else:
                document = json.load(handle)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise _config_error(f"{path} is not valid: {exc}", None) from exc
    if not isinstance(document, Mapping):
        raise _config_error(f"{path} must contain an object at the top level", None)
    return document


def config_from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    """
    Validate an experiment document and fill the defaults.

    Raises:
        ConfigError: unknown key or schema violation; ``.key`` is the dotted key.
    """
    data = _mapping('', data, _TOP_KEYS)

    model_data = data.get('model', DEFAULT_MODEL)
    if not isinstance(model_data, Mapping):
        raise _config_error("model must be an object", 'model')
    try:
        model = ModelParams.from_dict(model_data)
    except BridgesError as exc:
        raise _config_error(f"model: {exc}", 'model') from exc

    steps_data = _mapping('steps', data.get('steps', {}), _STEP_KEYS)
    steps = StepConfig(
        dt=_positive('steps.dt', steps_data['dt']) if 'dt' in steps_data else default_dt(model),
        du=_positive('steps.du', steps_data['du']) if 'du' in steps_data else DEFAULT_DU,
        t_max=_positive('steps.t_max', steps_data['t_max']) if 't_max' in steps_data else default_t_max(model),
        u_max=_positive('steps.u_max', steps_data['u_max']) if 'u_max' in steps_data else DEFAULT_U_MAX,
    )

    replicas = data.get('replicas', DEFAULT_REPLICAS)
    if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 1:
        raise _config_error(f"replicas must be an integer >= 1, got {replicas!r}", 'replicas')

    seed = data.get('seed')
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64):
        raise _config_error(f"seed must be an unsigned 64-bit integer, got {seed!r}", 'seed')

    outputs_data = _mapping('outputs', data.get('outputs', {}), _OUTPUT_KEYS)
    out_dir = outputs_data.get('dir', DEFAULT_OUT_DIR)
    if not isinstance(out_dir, str) or not out_dir:
        raise _config_error("outputs.dir must be a non-empty string", 'outputs.dir')
    formats = outputs_data.get('formats', list(FORMATS))
    if isinstance(formats, str):
        formats = [formats]
    if not formats or any(f not in FORMATS for f in formats):
        raise _config_error(f"outputs.formats must be a non-empty subset of {list(FORMATS)}", 'outputs.formats')

    allowed = [k for k in SuiteConfig.__dataclass_fields__ if k not in _VERIFICATION_RESERVED]
    verification = dict(_mapping('verification', data.get('verification', {}), allowed))

    return ExperimentConfig(model=model, steps=steps, replicas=int(replicas),
                            seed=None if seed is None else int(seed),
                            outputs=OutputConfig(out_dir, tuple(dict.fromkeys(formats))),
                            verification=verification)


def parse_config(path: Optional[str]) -> ExperimentConfig:
    """
    Experiment configuration from a file; ``None`` gives the default two-vertex experiment.

    Raises:
        ConfigError: missing file, invalid JSON or a schema violation naming the key.
    """
    return config_from_mapping({} if path is None else load_config_document(path))


#########################################################################
##############               Run context             ####################
#########################################################################


@dataclass
class RunContext:
    command: str
    config: ExperimentConfig
    seed: int
    threads: int
    step_scale: float
    out_dir: str
    hash: str
    started: float = field(default_factory=time.perf_counter)

    @property
    def model(self) -> ModelParams:
        return self.config.model

    @property
    def steps(self) -> StepConfig:
        return self.config.steps

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def emit(self, frame: pd.DataFrame, name: str) -> List[str]:
        """Write ``frame`` as <name>.csv and/or <name>.json, per the selected formats."""
        written = []
        for fmt in self.config.outputs.formats:
            target = self.path(f"{name}.{fmt}")
            if fmt == 'csv':
                write_csv_with_provenance(frame, target, self.hash, self.seed)
            else:
                write_json(frame.to_dict(orient='records'), target, self.hash, self.seed)
            written.append(target)
        return written

    def finish(self, name: str, extra: Optional[Dict[str, Any]] = None) -> None:
        """Sidecar of the main output: timestamp, runtime and run notes."""
        runtime = time.perf_counter() - self.started
        payload = {'command': self.command, 'runtime_s': round(runtime, 3), 'threads': self.threads}
        payload.update(extra or {})
        write_meta(self.path(f"{name}.json"), self.hash, self.seed, payload)
        logger.info(f"{self.command} finished in {runtime:.1f}s, outputs in {self.out_dir}")


def _option(args: argparse.Namespace, name: str, default: Any = None) -> Any:
    return getattr(args, name, default)


def _context(args: argparse.Namespace) -> RunContext:
    config = parse_config(_option(args, 'config'))

    replicas = _option(args, 'replicas')
    if replicas is not None and replicas < 1:
        raise _config_error(f"--replicas must be >= 1, got {replicas}", 'replicas')
    try:
        seed = resolve_seed(_option(args, 'seed'), config.seed)
    except ValueError as exc:
        raise _config_error(str(exc), 'seed') from exc
    if not 0 <= seed < 2 ** 64:
        raise _config_error(f"seed must be an unsigned 64-bit integer, got {seed}", 'seed')

    threads = _option(args, 'threads') or default_threads()
    if threads < 1:
        raise _config_error(f"--threads must be >= 1, got {threads}", 'threads')
    step_scale = _option(args, 'step_scale') or 1.0
    if not step_scale > 0:
        raise _config_error(f"--step-scale must be positive, got {step_scale}", 'step_scale')

    fmt = _option(args, 'format')
    outputs = OutputConfig(_option(args, 'out') or config.outputs.dir, (fmt,) if fmt else config.outputs.formats)
    steps = replace(config.steps, dt=config.steps.dt * step_scale, du=config.steps.du * step_scale)
    config = replace(config, seed=seed, replicas=replicas or config.replicas, outputs=outputs, steps=steps)

    try:
        ensure_dir_exists(outputs.dir)
    except OSError as exc:
        raise _config_error(f"outputs.dir '{outputs.dir}' cannot be created: {exc}", 'outputs.dir') from exc

    digest = config_hash({'command': args.command, 'config': config.resolved(), 'step_scale': step_scale})
    logger.info(f"{args.command}: seed={seed}, replicas={config.replicas}, threads={threads}, config_hash={digest}")
    return RunContext(args.command, config, seed, int(threads), float(step_scale), outputs.dir, digest)


#########################################################################
##############               Tables                  ####################
#########################################################################


def vertex_frame(values: np.ndarray, column: str, replicas: Optional[np.ndarray] = None) -> pd.DataFrame:
    """(R, n) values as rows ``replica,vertex,<column>``."""
    values = np.asarray(values, dtype=float)
    rows, n = values.shape
    replicas = np.arange(rows) if replicas is None else np.asarray(replicas)
    return pd.DataFrame({
        'replica': np.repeat(replicas, n),
        'vertex': np.tile(np.arange(n), rows),
        column: values.reshape(-1),
    })


def _thin_index(size: int) -> np.ndarray:
    if size <= PATH_POINTS:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, PATH_POINTS).round().astype(int))


def _read_table(path: str) -> pd.DataFrame:
    """A table written by RunContext.emit, from its CSV or its JSON document."""
    if not os.path.isfile(path):
        raise _config_error(f"input file not found: {path}", None)
    if path.endswith('.json'):
        with open(path, 'r') as handle:
            return pd.DataFrame(json.load(handle).get('data', []))
    return read_csv_with_provenance(path)


def read_beta_samples(path: str, n: int) -> np.ndarray:
    """A ``replica,vertex,beta`` dump (CSV or JSON) as an (R, n) array ordered by replica."""
    frame = _read_table(path)
    if not {'replica', 'vertex', 'beta'} <= set(frame.columns):
        raise _config_error(f"{path} must have columns replica,vertex,beta", None)
    table = frame.pivot(index='replica', columns='vertex', values='beta').sort_index()
    if list(table.columns) != list(range(n)) or table.isna().any().any():
        raise _config_error(f"{path} does not hold complete samples for vertices 0..{n - 1}", None)
    return table.to_numpy(dtype=float)


def _parse_floats(key: str, text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError as exc:
        raise _config_error(f"--{key} must be a comma-separated list of numbers, got {text!r}", key) from exc


#########################################################################
##############               Commands                ####################
#########################################################################


def _x_dump(paths: XBatch) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Full-resolution X paths, each cut at the first grid point past its last absorption, and their T0."""
    frames, kept = [], []
    for r in range(paths.n_replicas):
        if paths.failed[r]:
            logger.warning(f"simulate-x: dumped path {r} failed, not written")
            continue
        T0 = paths.hitting_times[r]
        last = float(np.max(T0)) if np.all(np.isfinite(T0)) else float(paths.grid[-1])
        stop = min(int(np.searchsorted(paths.grid, last, side='left')) + 1, paths.grid.size)
        frames.append(path_frame(paths.grid[:stop], paths.values[:stop, r, :], 'X', r))
        kept.append(r)
    if not frames:
        raise ParameterError("every dumped path failed; lower steps.dt")
    kept = np.asarray(kept)
    return pd.concat(frames, ignore_index=True), vertex_frame(paths.hitting_times[kept], 'T0', kept)


def cmd_simulate_x(args: argparse.Namespace) -> int:
    ctx = _context(args)
    batch = simulate_hitting_times(ctx.model, ctx.config.replicas, ctx.steps.dt, ctx.steps.t_max, ctx.seed,
                                   stream_base=stream_base('cli.simulate_x'), threads=ctx.threads)
    times = batch.hitting_times.copy()
    times[batch.failed] = np.nan
    ctx.emit(vertex_frame(times, 'T0'), 'hitting_times')

    if args.dump_paths:
        paths = simulate_x_batch(ctx.model, args.dump_paths, ctx.steps.dt, ctx.steps.t_max,
                                 RngStream(ctx.seed, stream_base('cli.paths')), keep_paths=True)
        frame, hitting = _x_dump(paths)
        ctx.emit(frame, 'paths')
        ctx.emit(hitting, 'paths_hitting_times')

    ctx.finish('hitting_times', {'unabsorbed': int(batch.unabsorbed.any(axis=1).sum()),
                                 'failed': int(batch.failed.sum()), 't_end': batch.t_end})
    return EXIT_OK


def cmd_simulate_rho(args: argparse.Namespace) -> int:
    ctx = _context(args)
    batch = simulate_time_changed(ctx.model, ctx.config.replicas, ctx.steps.du, ctx.steps.u_max, ctx.seed,
                                  stream_base=stream_base('cli.simulate_rho'), threads=ctx.threads)
    rho, T = batch.rho_final.copy(), batch.T_final.copy()
    rho[batch.failed] = np.nan
    T[batch.failed] = np.nan
    frame = vertex_frame(rho, 'rho')
    frame['T'] = T.reshape(-1)
    ctx.emit(frame, 'rho_final')

    if args.dump_paths:
        paths = simulate_rho_batch(ctx.model, args.dump_paths, ctx.steps.du, ctx.steps.u_max,
                                   RngStream(ctx.seed, stream_base('cli.rho_paths')), keep_paths=True)
        index = _thin_index(paths.u_grid.size)
        frames = []
        for r in range(paths.n_replicas):
            frames.append(path_frame(paths.u_grid[index], paths.rho_paths[index, r, :], 'rho', r))
            frames.append(path_frame(paths.u_grid[index], paths.T_paths[index, r, :], 'T', r))
        ctx.emit(pd.concat(frames, ignore_index=True), 'paths')

    ctx.finish('rho_final', {'failed': int(batch.failed.sum()), 'u_max': ctx.steps.u_max})
    return EXIT_OK


def _absorption_from_values(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """First grid time where each coordinate sits at 0 (inf when it never does)."""
    absorption = np.full(values.shape[1], np.inf)
    for i in range(values.shape[1]):
        zeros = np.flatnonzero(values[:, i] <= 0.0)
        if zeros.size:
            absorption[i] = grid[zeros[0]]
    return absorption


def read_x_paths(path: str) -> Dict[int, MultiPath]:
    """
    X paths of a ``simulate-x --dump-paths`` table (CSV or JSON), keyed by replica.

    Hitting times come from the sibling ``<name>_hitting_times`` table when it exists;
    otherwise each coordinate is taken as absorbed at its first grid point at 0.
    """
    frame = _read_table(path)
    if not {'u_or_t', 'vertex', 'value', 'series', 'replica'} <= set(frame.columns):
        raise _config_error(f"{path} must have columns u_or_t,vertex,value,series,replica", 'input')
    frame = frame[frame['series'] == 'X']
    if frame.empty:
        raise _config_error(f"{path} holds no X series", 'input')

    root, ext = os.path.splitext(path)
    sibling = f"{root}_hitting_times{ext}"
    stored: Dict[int, np.ndarray] = {}
    if os.path.isfile(sibling):
        table = _read_table(sibling).pivot(index='replica', columns='vertex', values='T0')
        stored = {int(r): row.to_numpy(dtype=float) for r, row in table.iterrows()}
    else:
        logger.warning(f"{sibling} not found, absorption times inferred from the grid")

    paths: Dict[int, MultiPath] = {}
    for replica, rows in frame.groupby('replica', sort=True):
        table = rows.pivot(index='u_or_t', columns='vertex', values='value').sort_index()
        if table.shape[0] < 2 or table.isna().any().any():
            raise _config_error(f"{path}: replica {replica} is not a complete path", 'input')
        grid = table.index.to_numpy(dtype=float)
        values = table.to_numpy(dtype=float)
        absorption = _absorption_from_values(grid, values)
        known = stored.get(int(replica))
        if known is not None and known.size == absorption.size:
            absorption = np.where(np.isfinite(known), known, absorption)
        paths[int(replica)] = MultiPath(grid, values, absorption)
    logger.info(f"Read {len(paths)} X paths from {path}")
    return paths


def cmd_transform(args: argparse.Namespace) -> int:
    """Lamperti transform of the X paths stored by ``simulate-x --dump-paths``: rho, T and Bhat series."""
    ctx = _context(args)
    paths = read_x_paths(args.input)
    u_grid = np.linspace(0.0, ctx.steps.u_max, int(round(ctx.steps.u_max / ctx.steps.du)) + 1)
    index = _thin_index(u_grid.size)
    frames, skipped = [], []
    for r, path in paths.items():
        if not path.is_absorbed:
            logger.warning(f"transform: path {r} is unabsorbed, skipped")
            skipped.append(r)
            continue
        tc = lamperti_transform(path, u_grid)
        residual = opposite_drift_residual(tc, path.absorption, path.values[0])
        frames.append(path_frame(u_grid[index], tc.rho[index], 'rho', r))
        frames.append(path_frame(u_grid[index], tc.T[index], 'T', r))
        frames.append(path_frame(u_grid[index], residual[index], 'Bhat', r))
    if not frames:
        raise ParameterError("no absorbed path to transform; raise steps.t_max in simulate-x")
    ctx.emit(pd.concat(frames, ignore_index=True), 'lamperti_paths')
    ctx.finish('lamperti_paths', {'input': args.input, 'skipped': skipped})
    return EXIT_OK


def cmd_sample_beta(args: argparse.Namespace) -> int:
    ctx = _context(args)
    n_samples = ctx.config.replicas
    if args.method == 'sde':
        batch = simulate_hitting_times(ctx.model, n_samples, ctx.steps.dt, ctx.steps.t_max, ctx.seed,
                                       stream_base=stream_base('cli.sample_beta.sde'), threads=ctx.threads)
        usable = ~batch.failed & np.all(np.isfinite(batch.hitting_times), axis=1)
        betas = beta_from_hitting(batch.hitting_times[usable])
        ctx.emit(vertex_frame(betas, 'beta', np.flatnonzero(usable)), 'beta_sde')
        ctx.finish('beta_sde', {'dropped': int((~usable).sum())})
        return EXIT_OK

    chains = max(1, int(args.chains))
    cfg = McmcConfig.from_defaults(-(-n_samples // chains), RngStream(ctx.seed, stream_base('cli.sample_beta.mcmc')))
    results = sample_nu_chains(ctx.model, cfg, chains, threads=ctx.threads)
    betas = np.concatenate([r.samples for r in results], axis=0)[:n_samples]
    ctx.emit(vertex_frame(betas, 'beta'), 'beta_mcmc')
    ctx.finish('beta_mcmc', {'chains': [r.as_dict() for r in results]})
    return EXIT_OK


def _require(args: argparse.Namespace, names: Sequence[str]) -> None:
    missing = [f"--{name}" for name in names if _option(args, name) is None]
    if missing:
        raise _config_error(f"density {args.kind} requires {', '.join(missing)}", missing[0].lstrip('-'))


def cmd_density(args: argparse.Namespace) -> int:
    """Prints a single JSON number."""
    if args.kind == 'nu':
        model = parse_config(_option(args, 'config')).model
        beta = _parse_floats('beta', args.beta)
        if beta is None or len(beta) != model.n:
            raise _config_error(f"--beta needs {model.n} comma-separated values", 'beta')
        value = math.exp(nu_log_density(model, beta))
    elif args.kind == 'ig':
        _require(args, ('t', 'theta', 'eta'))
        value = ig_density(args.t, args.theta, args.eta)
    else:
        _require(args, ('t', 'q', 'a', 'b'))
        value = gig_density(args.t, GigParams(args.q, args.a, args.b))
    print(json.dumps(to_builtin(float(value))))
    return EXIT_OK


def _suite_config(ctx: RunContext, args: argparse.Namespace, **overrides: Any) -> SuiteConfig:
    values = dict(ctx.config.verification)
    values.update(model=ctx.model, seed=ctx.seed, threads=ctx.threads, step_scale=ctx.step_scale,
                  artifacts=bool(_option(args, 'artifacts', False)) or bool(values.get('artifacts', False)))
    for option, key in (('sde_samples', 'sde_samples'), ('mcmc_samples', 'mcmc_samples')):
        if _option(args, option):
            values[key] = read_beta_samples(_option(args, option), ctx.model.n)
    try:
        return SuiteConfig.from_mapping(values, **overrides)
    except ParameterError as exc:
        raise _config_error(f"verification: {exc}", 'verification') from exc


def _persist(url: str, suite_id: str, ctx: RunContext, reports: Sequence[VerificationReport]) -> int:
    engine = establecer_engine(url)
    create_tables(engine)
    with session_scope(establecer_session(engine)) as session:
        return inject_verification_run(session, suite_id, ctx.hash, ctx.seed, reports)


def write_reports(ctx: RunContext, suite_id: str, reports: Sequence[VerificationReport]) -> None:
    """reports.json (no runtimes), reports.meta.json, statistics.csv and artifact tables."""
    target = ctx.path('reports.json')
    write_json([r.to_dict() for r in reports], target, ctx.hash, ctx.seed)

    if 'csv' in ctx.config.outputs.formats:
        rows = [(r.check_id, name, value) for r in reports for name, value in sorted(r.statistics.items())]
        write_csv_with_provenance(pd.DataFrame(rows, columns=['check_id', 'statistic', 'value']),
                                  ctx.path('statistics.csv'), ctx.hash, ctx.seed)

    for report in reports:
        for name, frame in report.artifacts.items():
            write_csv_with_provenance(frame, os.path.join(ctx.out_dir, 'artifacts', f"{report.check_id}_{name}.csv"),
                                      ctx.hash, ctx.seed)

    ctx.finish('reports', {'suite': suite_id, 'all_passed': all_passed(reports),
                           'runtime_by_check': {r.check_id: round(float(r.runtime_s), 3) for r in reports}})


def _verify(args: argparse.Namespace, suite_id: str, **overrides: Any) -> int:
    suite_id = resolve_suite(suite_id)
    ctx = _context(args)
    reports = run_suite(suite_id, _suite_config(ctx, args, **overrides))
    write_reports(ctx, suite_id, reports)

    url = _option(args, 'db') or os.getenv(DB_ENV_VAR)
    if url:
        run_id = _persist(url, suite_id, ctx, reports)
        logger.info(f"Run stored with id {run_id}")

    failed = [r.check_id for r in reports if not r.passed and not r.negative_control]
    for report in reports:
        status = 'PASS' if report.passed else 'FAIL'
        label = ' (negative control)' if report.negative_control else ''
        print(f"{status} {report.check_id}{label}" + (f" [{report.diagnostic}]" if report.diagnostic else ''))
    if failed:
        logger.warning(f"Failing checks: {failed}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    return _verify(args, args.suite)


def cmd_restart_check(args: argparse.Namespace) -> int:
    """The restart experiment with QQ tables; --replicas sets its sample size."""
    overrides: Dict[str, Any] = {'artifacts': True}
    times = _parse_floats('times', args.times)
    if times is not None:
        overrides['restart_times'] = tuple(times)
    if _option(args, 'replicas') is not None:
        overrides['n_restart'] = args.replicas
    return _verify(args, 'restart', **overrides)


def cmd_history(args: argparse.Namespace) -> int:
    engine = establecer_engine(_option(args, 'db'))
    create_tables(engine)
    with session_scope(establecer_session(engine)) as session:
        if args.check:
            rows = retrieve_check_history(session, args.check, args.limit)
        else:
            rows = retrieve_verification_runs(session, args.suite, args.limit)
    print(json.dumps(to_builtin(rows), indent=2, sort_keys=True))
    return EXIT_OK


#########################################################################
##############               Parser                  ####################
#########################################################################


def _common_options() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', default=argparse.SUPPRESS,
                        help='experiment configuration (JSON, or YAML)')
    common.add_argument('--seed', type=int, metavar='U64', default=argparse.SUPPRESS,
                        help='seed (overrides INTERACTING_BRIDGES_SEED and the config)')
    common.add_argument('--replicas', type=int, metavar='N', default=argparse.SUPPRESS, help='number of replicas')
    common.add_argument('--out', metavar='DIR', default=argparse.SUPPRESS, help='output directory')
    common.add_argument('--format', choices=FORMATS, default=argparse.SUPPRESS, help='table format')
    common.add_argument('--threads', type=int, metavar='N', default=argparse.SUPPRESS,
                        help='worker processes (default: all cores)')
    common.add_argument('--db', metavar='URL', default=argparse.SUPPRESS,
                        help=f'SQLAlchemy URL of the run store (or {DB_ENV_VAR})')
    common.add_argument('--step-scale', dest='step_scale', type=float, metavar='S', default=argparse.SUPPRESS,
                        help='multiply dt and du by S')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog='interacting_bridges', parents=[common],
                                     description='Simulate and verify interacting Brownian bridges.')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('simulate-x', parents=[common], help='hitting times of the X system')
    p.add_argument('--dump-paths', dest='dump_paths', type=int, default=0, metavar='K',
                   help='also write K full-resolution paths')
    p.set_defaults(handler=cmd_simulate_x)

    p = sub.add_parser('simulate-rho', parents=[common], help='the time-changed (rho, T) system at u_max')
    p.add_argument('--dump-paths', dest='dump_paths', type=int, default=0, metavar='K', help='also write K paths')
    p.set_defaults(handler=cmd_simulate_rho)

    p = sub.add_parser('transform', parents=[common], help='Lamperti transform of stored X paths')
    p.add_argument('--input', required=True, metavar='PATH', help='paths table written by simulate-x --dump-paths')
    p.set_defaults(handler=cmd_transform)

    p = sub.add_parser('sample-beta', parents=[common], help='beta samples from the SDE or by Metropolis')
    p.add_argument('method', choices=('sde', 'mcmc'))
    p.add_argument('--chains', type=int, default=1, help='independent Metropolis chains')
    p.set_defaults(handler=cmd_sample_beta)

    p = sub.add_parser('density', parents=[common], help='pointwise density (JSON number on stdout)')
    p.add_argument('kind', choices=('nu', 'ig', 'gig'))
    p.add_argument('--beta', help='comma-separated beta (nu)')
    p.add_argument('--t', type=float, help='evaluation point (ig, gig)')
    p.add_argument('--theta', type=float)
    p.add_argument('--eta', type=float)
    p.add_argument('--q', type=float)
    p.add_argument('--a', type=float)
    p.add_argument('--b', type=float)
    p.set_defaults(handler=cmd_density)

    p = sub.add_parser('verify', parents=[common], help='run a verification suite')
    p.add_argument('suite', choices=SUITE_IDS)
    p.add_argument('--sde-samples', dest='sde_samples', metavar='PATH', help='beta_sde dump to compare')
    p.add_argument('--mcmc-samples', dest='mcmc_samples', metavar='PATH', help='beta_mcmc dump to compare')
    p.add_argument('--artifacts', action='store_true', help='write ECDF / QQ tables')
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser('restart-check', parents=[common], help='restart at a deterministic multi-time')
    p.add_argument('--times', help='comma-separated restart times, one per vertex')
    p.set_defaults(handler=cmd_restart_check)

    p = sub.add_parser('history', parents=[common], help='stored verification runs as JSON')
    p.add_argument('--suite', help='only runs of this suite')
    p.add_argument('--check', help='history of one check_id')
    p.add_argument('--limit', type=int, default=20)
    p.set_defaults(handler=cmd_history)
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        return args.handler(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BridgesError as exc:
        logger.error(f"{args.command} aborted: {type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
