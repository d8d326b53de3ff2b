"""Twin experiments: synthetic truth, noisy measurements, sequential
assimilation with any filter variant, and the evaluation metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.linalg import LinAlgError
from scipy.stats import rankdata

from . import filters
from .core import Ensemble, Grid, RngSpec, StateLayout, ValidationError, build_state_layout
from .forward import (Scenario, SolverError, initial_state, observation_matrix, pilot_grid,
                      propagate, tracer_scenario, tracer_schedule, well_scenario, well_schedule)
from .geostat import PriorCrossCovariance, Variogram, build_prior_cross_covariance, generate_gaussian_fields

log = logging.getLogger(__name__)

DEFAULT_CORR_LENGTH = {"tracer": 50.0, "well": 60.0}
DEFAULT_N_OBS = {"tracer": 100, "well": 60}
PILOT_GRIDS = ("standard", "regular", "diagonal", "double", "all")
TRUTH_MODES = ("fixed", "per_experiment")


@dataclass(frozen=True)
class ExperimentConfig:
    """One twin experiment.  Defaults reproduce the tracer setup with the
    PP-EnKF at ensemble size 50.

    ``truth_mode="fixed"`` keeps the synthetic truth and its measurement noise
    identical across seeds (drawn from ``truth_seed``), so experiments differ
    only in the prior ensemble and the measurement perturbations.
    ``"per_experiment"`` draws a new truth per (seed, experiment_index).
    """

    scenario: str = "tracer"
    variant: str = "pp_enkf"
    n_e: int = 50
    seed: int = 0
    experiment_index: int = 0
    truth_mode: str = "fixed"
    truth_seed: int = 1
    truth_mean: float = -12.0
    prior_mean: float = -12.5
    std: float = 0.5
    truth_corr_length: Optional[float] = None
    prior_corr_length: Optional[float] = None
    range_factor: float = 2.0
    pilot_grid: str = "standard"
    pilot_k: int = 7
    cross_cov_source: str = "empirical"
    cross_cov_fields: int = 10_000
    cross_cov_seed: int = 2
    damping: float = 0.1
    localization_length_scale: float = 150.0
    hybrid_alpha: float = 0.5
    background_param_variance: float = 0.25
    n_steps: int = 1200
    n_obs: Optional[int] = None
    specific_storage: float = 1.0e-4
    noise_inflation: float = 1.0
    clip_concentration: bool = True
    correlation_obs_index: int = -1
    kriging_covariance: str = "ensemble"

    def __post_init__(self):
        if self.scenario not in DEFAULT_CORR_LENGTH:
            raise ValidationError(f"unknown scenario {self.scenario!r}")
        if self.variant not in filters.VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.n_e < 2:
            raise ValidationError(f"n_e must be >= 2, got {self.n_e}")
        if self.truth_mode not in TRUTH_MODES:
            raise ValidationError(f"truth_mode must be one of {TRUTH_MODES}")
        if self.pilot_grid not in PILOT_GRIDS:
            raise ValidationError(f"pilot_grid must be one of {PILOT_GRIDS}")
        if self.std < 0 or not self.range_factor > 0 or not self.noise_inflation > 0:
            raise ValidationError("std must be >= 0, range_factor and noise_inflation > 0")
        for name in ("truth_corr_length", "prior_corr_length"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"{name} must be > 0")
        n_obs = self.observation_count
        if n_obs < 1 or self.n_steps % n_obs:
            raise ValidationError(f"n_obs={n_obs} must divide n_steps={self.n_steps}")
        if not -n_obs <= self.correlation_obs_index < n_obs:
            raise ValidationError("correlation_obs_index outside the observation times")
        # variant-specific parameters are checked by FilterConfig
        filters.FilterConfig(variant="enkf", damping=self.damping,
                             localization_length_scale=self.localization_length_scale,
                             hybrid_alpha=self.hybrid_alpha,
                             background_param_variance=self.background_param_variance)
        if self.kriging_covariance not in filters.KRIGING_COVARIANCES:
            raise ValidationError(f"kriging_covariance must be one of {filters.KRIGING_COVARIANCES}")

    @property
    def observation_count(self) -> int:
        return DEFAULT_N_OBS[self.scenario] if self.n_obs is None else int(self.n_obs)

    def truth_variogram(self) -> Variogram:
        length = self.truth_corr_length or DEFAULT_CORR_LENGTH[self.scenario]
        return Variogram.from_correlation_length(length, self.truth_mean, self.std, self.range_factor)

    def prior_variogram(self) -> Variogram:
        length = self.prior_corr_length or DEFAULT_CORR_LENGTH[self.scenario]
        return Variogram.from_correlation_length(length, self.prior_mean, self.std, self.range_factor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Setup:
    scenario: Scenario
    schedule: object
    layout: StateLayout
    H: np.ndarray


def build_setup(cfg: ExperimentConfig) -> Setup:
    if cfg.scenario == "tracer":
        sc = tracer_scenario(cfg.n_steps, cfg.specific_storage)
        sched = tracer_schedule(sc.grid, cfg.observation_count, sc.period_days)
    else:
        sc = well_scenario(cfg.n_steps, cfg.specific_storage)
        sched = well_schedule(sc.grid, cfg.observation_count, sc.period_days)
    if cfg.pilot_grid == "all":
        cells = tuple(range(sc.grid.n_cells))
    else:
        cells = pilot_grid(sc.grid, cfg.pilot_grid, cfg.pilot_k, extra=sched.cells)
    layout = build_state_layout(sc.grid, cells, sc.dynamic_kinds)
    sched.check_layout(layout)
    return Setup(sc, sched, layout, observation_matrix(sched, layout))


@lru_cache(maxsize=8)
def _cached_cross_cov(grid: Grid, layout: StateLayout, vg: Variogram, source: str,
                      n_fields: int, seed: int) -> PriorCrossCovariance:
    rng = RngSpec(seed, 0, "cross-covariance")
    return build_prior_cross_covariance(grid, layout, vg, source, n_fields, rng)


def prior_cross_covariance(cfg: ExperimentConfig, setup: Setup) -> PriorCrossCovariance:
    return _cached_cross_cov(setup.scenario.grid, setup.layout, cfg.prior_variogram(),
                             cfg.cross_cov_source, cfg.cross_cov_fields, cfg.cross_cov_seed)


@dataclass
class Truth:
    field: np.ndarray          # grid-ordered log10 permeability
    observations: np.ndarray   # (n_obs, n_m) noisy measurements
    noise_std: np.ndarray


def _truth_stream(cfg: ExperimentConfig, purpose: str) -> RngSpec:
    if cfg.truth_mode == "fixed":
        return RngSpec(cfg.truth_seed, 0, f"truth-{purpose}")
    return RngSpec(cfg.seed, cfg.experiment_index, f"truth-{purpose}")


def _truth_field(cfg: ExperimentConfig, grid: Grid) -> np.ndarray:
    return generate_gaussian_fields(grid, cfg.truth_variogram(), 1, _truth_stream(cfg, "field"))[0]


@lru_cache(maxsize=32)
def _cached_truth(cfg_key: ExperimentConfig) -> Truth:
    cfg = cfg_key
    setup = build_setup(cfg)
    sc, sched, L = setup.scenario, setup.schedule, setup.layout
    fld = _truth_field(cfg, sc.grid)
    x = initial_state(fld, L, sc)[None, :]
    noise = sched.noise_vector() * cfg.noise_inflation
    gen = _truth_stream(cfg, "noise").generator()
    obs = np.empty((sched.n_times, sched.n_m))
    step = 0
    for k, t in enumerate(sched.times):
        s = sc.step_of(t)
        x = propagate(x, L, sc, s - step)
        step = s
        obs[k] = setup.H @ x[0] + noise * gen.standard_normal(sched.n_m)
    return Truth(fld, obs, noise)


def synthesize_truth(cfg: ExperimentConfig) -> Truth:
    """Truth field and its noisy measurements at every scheduled time."""
    # only the settings that affect the truth enter the cache key
    key = ExperimentConfig(
        scenario=cfg.scenario, variant="enkf", n_e=2, n_steps=cfg.n_steps, n_obs=cfg.n_obs,
        truth_mode=cfg.truth_mode, truth_seed=cfg.truth_seed, truth_mean=cfg.truth_mean,
        std=cfg.std, truth_corr_length=cfg.truth_corr_length, range_factor=cfg.range_factor,
        specific_storage=cfg.specific_storage, noise_inflation=cfg.noise_inflation,
        seed=cfg.seed if cfg.truth_mode == "per_experiment" else 0,
        experiment_index=cfg.experiment_index if cfg.truth_mode == "per_experiment" else 0)
    return _cached_truth(key)


def prior_fields(cfg: ExperimentConfig, grid: Grid, n_e: int = None) -> np.ndarray:
    rng = RngSpec(cfg.seed, cfg.experiment_index, "prior-ensemble")
    return generate_gaussian_fields(grid, cfg.prior_variogram(), n_e or cfg.n_e, rng)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    status: str = "ok"
    cause: str = ""
    rmse: float = float("nan")
    std: float = float("nan")
    open_loop_rmse: float = float("nan")
    mean_field: Optional[np.ndarray] = None
    variance_field: Optional[np.ndarray] = None
    correlation_kind: str = ""
    correlation_cells: tuple = ()
    correlation_fields: Optional[np.ndarray] = None       # (n_locations, n_g)
    correlation_degenerate: Optional[np.ndarray] = None   # same shape, bool
    rmse_history: list = field(default_factory=list)
    jitter_events: int = 0
    wall_time: float = float("nan")

    @property
    def seed(self) -> int:
        return self.config.seed

    def record(self) -> dict:
        c = self.config
        return {"method": c.variant, "n_e": c.n_e,
                "corr_len": c.prior_corr_length or DEFAULT_CORR_LENGTH[c.scenario],
                "seed": c.experiment_index, "rmse": self.rmse, "std": self.std,
                "status": self.status, "wall_time": self.wall_time}


def _filter_config(cfg: ExperimentConfig, setup: Setup, cross: PriorCrossCovariance = None):
    return filters.FilterConfig(
        variant=cfg.variant, damping=cfg.damping,
        localization_length_scale=cfg.localization_length_scale,
        hybrid_alpha=cfg.hybrid_alpha, background_param_variance=cfg.background_param_variance,
        layout=setup.layout,
        P_rp0=None if cross is None else cross.matrix,
        P_pp0=None if cross is None else cross.pilot_block,
        prior_mean=cfg.prior_mean, kriging_covariance=cfg.kriging_covariance)


Monitor = Callable[[int, np.ndarray, np.ndarray, list], None]


def run_synthetic_experiment(cfg: ExperimentConfig, monitor: Monitor = None) -> ExperimentReport:
    """Full forecast-analysis cycle over all observation times.

    ``monitor(k, forecast, analysis, info)`` is called after every analysis
    with the (n_e, n_s) arrays and the pilot-point diagnostics list.
    Solver and factorization failures are reported with ``status="failed"``.
    """
    t0 = time.perf_counter()
    report = ExperimentReport(cfg)
    try:
        _run(cfg, report, monitor)
    except (SolverError, LinAlgError, FloatingPointError) as err:
        report.status = "failed"
        report.cause = f"{type(err).__name__}: {err}"
        log.warning("experiment %s/%s seed %d failed: %s", cfg.scenario, cfg.variant, cfg.experiment_index, err)
    report.wall_time = time.perf_counter() - t0
    return report


def _run(cfg: ExperimentConfig, report: ExperimentReport, monitor) -> None:
    setup = build_setup(cfg)
    sc, sched, L = setup.scenario, setup.schedule, setup.layout
    truth = synthesize_truth(cfg)
    cross = None
    if cfg.variant in ("pp_enkf", "interpolated") and L.n_r:
        cross = prior_cross_covariance(cfg, setup)
    fcfg = _filter_config(cfg, setup, cross)

    fields0 = prior_fields(cfg, sc.grid)
    X = np.stack([initial_state(f, L, sc) for f in fields0])
    weights0 = None
    if cfg.variant == "interpolated" and L.n_r:
        weights0 = filters.prior_kriging_weights(cross.matrix, cross.pilot_block, L)
        X = filters.krige_nonpilots(X, L, weights0, cfg.prior_mean)
    report.open_loop_rmse = compute_rmse(L.param_field(X[:, L.param_slice]).mean(axis=0), truth.field)
    init_dyn = sc.initial_dynamics()
    perturb_rng = RngSpec(cfg.seed, cfg.experiment_index, "perturbation").generator()
    lo, hi = sc.conc_bounds() if sc.transport else (None, None)
    conc = L.kind_slice("concentration") if sc.transport else None
    corr_k = cfg.correlation_obs_index % sched.n_times
    corr_X = None

    def prop(values, n):
        return propagate(values, L, sc, n)

    step = 0
    X_prev = X
    for k, t in enumerate(sched.times):
        s = sc.step_of(t)
        Xf = prop(X, s - step)
        obs = filters.ObservationBatch(truth.observations[k], truth.noise_std, setup.H)
        obs = obs.perturb(cfg.n_e, perturb_rng)
        ctx = filters.RunContext(prop, init_dyn, s, step, X_prev)
        info: list = []
        Xa = filters.analyze(Ensemble(Xf, L), obs, fcfg, ctx, info).values.copy()
        if cfg.clip_concentration and conc is not None:
            Xa[:, conc] = np.clip(Xa[:, conc], lo, hi)
        report.jitter_events += sum(1 for i in info if i.jitter > 0)
        if monitor is not None:
            monitor(k, Xf, Xa, info)
        if not np.all(np.isfinite(Xa)):
            raise FloatingPointError(f"non-finite analysis at observation {k + 1}")
        report.rmse_history.append(compute_rmse(L.param_field(Xa[:, L.param_slice]).mean(axis=0),
                                                truth.field))
        if k == corr_k:
            corr_X = Xa
        X, X_prev, step = Xa, Xa, s

    params = L.param_field(X[:, L.param_slice])
    report.mean_field = params.mean(axis=0)
    report.variance_field = params.var(axis=0, ddof=1)
    report.rmse = compute_rmse(report.mean_field, truth.field)
    report.std = compute_overall_std(params)
    kind = "concentration" if sc.transport else "head"
    cells = tuple(int(c) for c in sched.cells)
    cp = L.param_field(corr_X[:, L.param_slice])
    obs_vals = corr_X[:, L.dynamic_index(kind, cells)]
    rho, degenerate = pearson_fields(obs_vals, cp)
    report.correlation_kind = kind
    report.correlation_cells = cells
    report.correlation_fields = rho
    report.correlation_degenerate = degenerate


def open_loop_rmse(cfg: ExperimentConfig) -> float:
    """RMSE of the prior ensemble-mean field against the truth (no assimilation)."""
    grid = build_setup(cfg).scenario.grid
    truth = _truth_field(cfg, grid)
    return compute_rmse(prior_fields(cfg, grid).mean(axis=0), truth)


# ------------------------------------------------------------ metrics

def compute_rmse(mean_field, truth) -> float:
    a = np.asarray(mean_field, dtype=float)
    b = np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"field shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def compute_overall_std(params) -> float:
    """sqrt of the domain mean of per-cell ensemble variances (divisor n_e - 1).

    ``params`` is an (n_e, n_cells) array or an Ensemble (parameter block).
    """
    P = params.params if isinstance(params, Ensemble) else np.asarray(params, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValidationError("overall STD needs an (n_e >= 2, n_cells) array")
    # shifting by the first member keeps identical members at exactly zero
    A = P - P[0]
    A = A - A.mean(axis=0)
    return float(np.sqrt(np.mean((A ** 2).sum(axis=0) / (P.shape[0] - 1))))


def pearson_fields(obs_values, params):
    """Pearson correlation of each observed column with each parameter column.

    obs_values: (n_e,) or (n_e, n_loc); params: (n_e, n_g).  Returns
    (rho, degenerate), each (n_loc, n_g) (or (n_g,) for 1-D input).  Entries
    whose variance is zero on either side are set to 0 and flagged.
    """
    o = np.asarray(obs_values, dtype=float)
    one = o.ndim == 1
    O = o[:, None] if one else o
    P = np.asarray(params, dtype=float)
    if O.shape[0] != P.shape[0] or O.shape[0] < 2:
        raise ValidationError("correlation needs matching ensembles with n_e >= 2")
    Oa = O - O.mean(axis=0)
    Pa = P - P.mean(axis=0)
    so = np.sqrt((Oa ** 2).sum(axis=0))
    sp = np.sqrt((Pa ** 2).sum(axis=0))
    # relative cut-off so round-off spread of a constant column counts as zero
    tiny_o = so <= 1e-12 * np.maximum(np.abs(O).max(axis=0), 1e-300) * np.sqrt(O.shape[0])
    tiny_p = sp <= 1e-12 * np.maximum(np.abs(P).max(axis=0), 1e-300) * np.sqrt(P.shape[0])
    degenerate = tiny_o[:, None] | tiny_p[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = (Oa.T @ Pa) / np.outer(so, sp)
    rho = np.where(degenerate, 0.0, np.clip(rho, -1.0, 1.0))
    return (rho[0], degenerate[0]) if one else (rho, degenerate)


def compute_correlation_field(ens: Ensemble, obs_location: int, obs_kind: str):
    """Correlation field between the observed variable at a cell and the
    log-permeability of every cell.  Returns (rho, degenerate)."""
    L = ens.layout
    obs = ens.values[:, L.dynamic_index(obs_kind, [obs_location])[0]]
    return pearson_fields(obs, ens.param_fields())


def correlation_rmse(field, reference_field, mask=None) -> float:
    a = np.asarray(field, dtype=float)
    b = np.asarray(reference_field, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"field shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        a, b = a[~mask], b[~mask]
    return compute_rmse(a, b)


def correlation_rmse_report(report: ExperimentReport, reference: ExperimentReport) -> float:
    """Mean correlation-field RMSE over measurement locations that are
    non-degenerate in both runs."""
    vals = []
    for i in range(len(report.correlation_cells)):
        bad = report.correlation_degenerate[i] | reference.correlation_degenerate[i]
        if bad.all():
            continue
        vals.append(correlation_rmse(report.correlation_fields[i], reference.correlation_fields[i]))
    if not vals:
        raise ValidationError("every correlation field is degenerate")
    return float(np.mean(vals))


def rank_methods(results: Mapping[str, Mapping], benchmark: Mapping = None) -> dict:
    """Average rank per method over all cells (rank 1 = best).

    ``results[method][cell]`` is a metric value; lower is better.  With
    ``benchmark[cell]`` given, methods are ranked by |value - benchmark|.
    Ties share their mean rank.
    """
    methods = list(results)
    if not methods:
        raise ValidationError("no methods to rank")
    cells = sorted({c for m in methods for c in results[m]}, key=repr)
    missing = [(m, c) for m in methods for c in cells if c not in results[m]]
    if benchmark is not None:
        missing += [("benchmark", c) for c in cells if c not in benchmark]
    if missing:
        raise ValidationError(f"missing cells: {missing}")
    ranks = np.zeros((len(cells), len(methods)))
    for i, c in enumerate(cells):
        v = np.array([float(results[m][c]) for m in methods])
        if benchmark is not None:
            v = np.abs(v - float(benchmark[c]))
        ranks[i] = rankdata(v, method="average")
    return {m: float(ranks[:, j].mean()) for j, m in enumerate(methods)}


@dataclass
class BenchmarkResult:
    std: float
    report: ExperimentReport

    @property
    def correlation_fields(self):
        return self.report.correlation_fields


def run_reference_benchmark(cfg: ExperimentConfig, n_ref: int = 2000) -> BenchmarkResult:
    """Large-ensemble classical EnKF run providing the spread baseline and the
    reference correlation fields."""
    ref = replace(cfg, variant="enkf", n_e=int(n_ref))
    rep = run_synthetic_experiment(ref)
    if rep.status != "ok":
        raise SolverError(f"reference benchmark failed: {rep.cause}")
    return BenchmarkResult(rep.std, rep)
