"""Experiment orchestration: config loading, batched episodes, aggregation and reports.

Every predictor in an experiment faces the same scenario list. Episodes run in a
process pool; rows are sorted by (predictor, scenario index) before anything is
aggregated, so outputs do not depend on scheduling or worker count.
"""

from __future__ import annotations

import csv
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from .despot import DespotConfig, DespotPlanner
from .episode_log import fmt
from .predictors import (T_OBS, T_PRED, History, PredictionContext, TrajectoryDatabase, build_database,
                         make_predictor)
from .rvo import RvoPlanConfig, RvoPlanner
from .scenario import generate_scenario
from .sim import MODES, TickConfig, run_episode
from .stats import DegenerateError, linear_fit_stats, spearman

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

TICK_RATES = (30.0, 3.0, 1.0)
PLANNERS = ("rvo", "despot")
CORRELATION_METRICS = ("static_ade", "static_fde") + M.DYNAMIC_COLUMNS + ("latency", "sigma")
STATIC_WINDOW_STEP = 5  # frames between evaluated static windows


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class PredictorSpec:
    id: str
    kind: str
    sigma: float = 0.0
    latency: float | None = None
    # noise level used for the static (dataset) evaluation; defaults to ``sigma``
    static_sigma: float | None = None
    k: int = 6

    def build(self, db: TrajectoryDatabase | None = None, static: bool = False):
        sigma = self.sigma if not static or self.static_sigma is None else self.static_sigma
        return make_predictor(self.kind, sigma=sigma, latency=self.latency, db=db, k=self.k, name=self.id)

    @property
    def needs_database(self) -> bool:
        return self.kind.lower() in ("knn", "sknn", "s-knn")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    planner: str = "rvo"
    planner_options: dict = field(default_factory=dict)
    predictors: tuple = ()
    mode: str = "fixed_time"
    tick_rate: float | None = None
    prediction_calls: int | None = None
    scenarios_per_predictor: int = 50
    seed: int = 0
    map_templates: tuple = ("mixed",)
    n_exo: int = 15
    horizon_ticks: int = 1000
    dt_sim: float = 0.03
    predictor_stride: int = 3
    safety_mode: str = "distance"
    epsilon: float = M.DEFAULT_EPSILON
    buffer: float = M.DEFAULT_BUFFER
    static_scenarios: int = 0
    database: str | None = None
    write_logs: bool = True

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if not self.predictors:
            raise ConfigError("at least one predictor is required")
        ids = [p.id for p in self.predictors]
        if len(set(ids)) != len(ids):
            raise ConfigError("predictor ids must be unique")
        if self.scenarios_per_predictor < 1:
            raise ConfigError("scenarios_per_predictor must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "fixed_time" and self.tick_rate is not None and float(self.tick_rate) not in TICK_RATES:
            raise ConfigError(f"tick_rate must be one of {TICK_RATES} in fixed_time mode")
        if self.safety_mode not in ("distance", "buffered_obb"):
            raise ConfigError("safety_mode must be 'distance' or 'buffered_obb'")

    def tick_config(self) -> TickConfig:
        return TickConfig(self.dt_sim, self.tick_rate, self.mode, self.predictor_stride, self.prediction_calls)

    def scenario_seed(self, index: int) -> int:
        return derive_seed(self.seed, "scenario", index)

    def template(self, index: int) -> str:
        return self.map_templates[index % len(self.map_templates)]


def derive_seed(base: int, label: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, zlib.crc32(label.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


_SECTION_KEYS = {
    "experiment": ("name", "scenarios_per_predictor", "seed", "map_templates", "n_exo", "horizon_ticks",
                   "write_logs", "database"),
    "sim": ("mode", "tick_rate", "prediction_calls", "dt_sim", "predictor_stride"),
    "metrics": ("safety_mode", "epsilon", "buffer", "static_scenarios"),
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    kw: dict = {}
    unknown = set(doc) - set(_SECTION_KEYS) - {"planner", "predictors"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, keys in _SECTION_KEYS.items():
        body = doc.get(section, {})
        extra = set(body) - set(keys)
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
        kw.update(body)
    if "map_templates" in kw:
        kw["map_templates"] = tuple(kw["map_templates"])
    planner = dict(doc.get("planner", {}))
    kw["planner"] = planner.pop("name", "rvo")
    kw["planner_options"] = planner
    preds = []
    for p in doc.get("predictors", []):
        p = dict(p)
        if "id" not in p or "kind" not in p:
            raise ConfigError("each predictor needs an id and a kind")
        bad = set(p) - {f.name for f in fields(PredictorSpec)}
        if bad:
            raise ConfigError(f"unknown predictor keys: {sorted(bad)}")
        preds.append(PredictorSpec(**p))
    kw["predictors"] = tuple(preds)
    return ExperimentConfig(**kw)


def make_planner(name: str, options: dict):
    if name == "rvo":
        return RvoPlanner(RvoPlanConfig(**options))
    if name == "despot":
        return DespotPlanner(DespotConfig(**options))
    raise ConfigError(f"unknown planner {name!r}")


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("PREDLOOP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PREDLOOP_THREADS must be an integer, got {env!r}") from None
    return default or os.cpu_count() or 1


# ---------------------------------------------------------------------------
# static evaluation


def _dataset_logs(cfg: ExperimentConfig, label: str, count: int):
    """Reference episodes (RVO planner, CV predictor, no budget) forming a fixed dataset."""
    tc = TickConfig(cfg.dt_sim, None, "fixed_time", cfg.predictor_stride)
    logs = []
    for i in range(count):
        seed = derive_seed(cfg.seed, label, i)
        sc = generate_scenario(seed, cfg.template(i), cfg.n_exo, cfg.horizon_ticks)
        logs.append(run_episode(sc, RvoPlanner(), make_predictor("cv"), tc, seed=seed))
    return logs


def static_windows(logs, stride: int | None = None, step: int = STATIC_WINDOW_STEP):
    """(history, neighbors, future, tick, seed) for every ``step``-th complete window in the logs."""
    out = []
    for n, log in enumerate(logs):
        st = stride or log.stride
        for aid in log.exo_ids:
            ticks = [t for t in log.ticks if t % st == 0 and aid in log.rows[t]]
            for i in range(0, len(ticks) - T_OBS - T_PRED + 1, step):
                win = ticks[i:i + T_OBS + T_PRED]
                if win[-1] - win[0] != st * (T_OBS + T_PRED - 1):
                    continue
                rows = np.array([log.rows[t][aid] for t in win])
                last = win[T_OBS - 1]
                neigh = tuple(np.array(v[:2]) for a, v in sorted(log.rows[last].items()) if a != aid)
                out.append((History(aid, rows[:T_OBS, :2], rows[:T_OBS, 2]), neigh, rows[T_OBS:, :2], last, n))
    return out


def static_errors(predictor, windows, dt_frame: float) -> tuple[float, float]:
    """Mean ADE and FDE of ``predictor`` over fixed dataset windows."""
    if not windows:
        return math.nan, math.nan
    a, f = [], []
    for hist, neigh, fut, tick, n in windows:
        ps = predictor.predict(PredictionContext(hist, neigh, fut, tick, n, dt_frame))
        a.append(M.ade(ps.best, fut))
        f.append(M.fde(ps.best, fut))
    return float(np.mean(a)), float(np.mean(f))


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Job:
    config: ExperimentConfig
    predictor: PredictorSpec
    index: int
    db: TrajectoryDatabase | None
    log_dir: str | None
    static: tuple = (math.nan, math.nan)


def run_job(job: Job):
    """One episode; returns (predictor_id, index, MetricRow or None, error message or None)."""
    cfg, spec = job.config, job.predictor
    seed = cfg.scenario_seed(job.index)
    try:
        sc = generate_scenario(seed, cfg.template(job.index), cfg.n_exo, cfg.horizon_ticks)
        predictor = spec.build(job.db)
        planner = make_planner(cfg.planner, cfg.planner_options)
        log = run_episode(sc, planner, predictor, cfg.tick_config(), seed=seed)
        row = M.metric_row(log, job.index, spec.id, cfg.planner, cfg.safety_mode, cfg.epsilon, cfg.buffer)
    except Exception as exc:  # recorded in the failure manifest, never aborts the batch
        return spec.id, job.index, None, f"{type(exc).__name__}: {exc}"
    row.latency = predictor.latency
    row.sigma = spec.sigma
    row.static_ade, row.static_fde = job.static
    if job.log_dir:
        log.write(Path(job.log_dir) / spec.id / f"{job.index:04d}")
    return spec.id, job.index, row, None


@dataclass(frozen=True)
class ResultRow:
    predictor_id: str
    n_scenarios: int
    latency: float
    sigma: float
    static_ade: float
    static_fde: float
    dynamic_ade: float
    dynamic_fde: float
    dynamic_min_ade: float
    dynamic_min_fde: float
    dynamic_ade_closest: float
    dynamic_fde_closest: float
    dynamic_ade_full: float
    dynamic_fde_full: float
    safety: float
    efficiency: float
    comfort: float
    driving_performance: float
    fallback_fraction: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[str]:
        return [getattr(self, c) if c == "predictor_id" else
                (str(getattr(self, c)) if c == "n_scenarios" else fmt(getattr(self, c))) for c in self.columns()]


@dataclass
class ExperimentResult:
    metric_rows: list
    result_rows: list
    reports: list
    failures: list
    spec: M.NormalizationSpec | None = None
    log_dir: str | None = None


def _nanmean(values) -> float:
    vals = np.array([v for v in values if not math.isnan(v)], dtype=float)
    return float(vals.mean()) if len(vals) else math.nan


def aggregate(rows, order=None):
    """Normalise the whole cohort, then average per predictor. Returns (result_rows, spec)."""
    rows = list(rows)
    normalized, spec = M.normalize_cohort(rows)
    order = order or list(dict.fromkeys(r.predictor_id for r in rows))
    out = []
    for pid in order:
        idx = [i for i, r in enumerate(rows) if r.predictor_id == pid]
        if not idx:
            continue
        mine = [rows[i] for i in idx]
        norm = [normalized[i] for i in idx]
        dyn = {c: _nanmean(getattr(r, c) for r in mine) for c in M.DYNAMIC_COLUMNS}
        out.append(ResultRow(
            pid, len(idx), mine[0].latency, mine[0].sigma, mine[0].static_ade, mine[0].static_fde, **dyn,
            safety=float(np.mean([n.safety for n in norm])),
            efficiency=float(np.mean([n.efficiency for n in norm])),
            comfort=float(np.mean([n.comfort for n in norm])),
            driving_performance=float(np.mean([n.driving_performance for n in norm])),
            fallback_fraction=float(np.mean([r.fallback_fraction for r in mine]))))
    return out, spec


@dataclass(frozen=True)
class CorrelationRow:
    """Correlation of one per-predictor metric with mean driving performance."""
    report: object | None
    metric: str
    spearman: float = math.nan
    note: str = ""


def correlations(result_rows, metrics=CORRELATION_METRICS) -> list[CorrelationRow]:
    out = []
    y = np.array([r.driving_performance for r in result_rows])
    for name in metrics:
        x = np.array([getattr(r, name) for r in result_rows], dtype=float)
        if np.isnan(x).any():
            out.append(CorrelationRow(None, name, note="missing values"))
            continue
        try:
            rep = linear_fit_stats(x, y, name)
            rho = spearman(x, y)
        except DegenerateError as exc:
            out.append(CorrelationRow(None, name, note=str(exc)))
            continue
        out.append(CorrelationRow(rep, name, rho))
    return out


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   workers: int | None = None) -> ExperimentResult:
    """All predictors x scenarios, metrics, cohort normalisation and correlations.

    When ``out_dir`` is given, reports are written there and logs under ``out_dir/logs``.
    """
    workers = worker_count(workers)
    log_dir = str(Path(out_dir) / "logs") if out_dir is not None and config.write_logs else None
    db = None
    windows = []
    if config.static_scenarios > 0:
        windows = static_windows(_dataset_logs(config, "static-eval", config.static_scenarios))
    if any(p.needs_database for p in config.predictors):
        if config.database:
            db = TrajectoryDatabase.load(config.database)
        else:
            db = build_database(_dataset_logs(config, "static-train", max(2, config.static_scenarios)))
    statics = {}
    dt_frame = config.tick_config().dt_frame
    for spec in config.predictors:
        statics[spec.id] = static_errors(spec.build(db, static=True), windows, dt_frame) if windows else (
            math.nan, math.nan)
    jobs = [Job(config, spec, i, db, log_dir, statics[spec.id])
            for spec in config.predictors for i in range(config.scenarios_per_predictor)]
    if workers <= 1 or len(jobs) <= 1:
        results = [run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_job, jobs, chunksize=1))
    rank = {spec.id: k for k, spec in enumerate(config.predictors)}
    results.sort(key=lambda r: (rank[r[0]], r[1]))
    rows = [r[2] for r in results if r[2] is not None]
    failures = [(pid, idx, config.scenario_seed(idx), err) for pid, idx, row, err in results if row is None]
    result_rows, reports, spec = [], [], None
    if len(rows) >= 2:
        result_rows, spec = aggregate(rows, [p.id for p in config.predictors])
        if len(result_rows) >= 3:
            reports = correlations(result_rows)
    res = ExperimentResult(rows, result_rows, reports, failures, spec, log_dir)
    if out_dir is not None:
        emit_report(res, out_dir, config)
    return res


# ---------------------------------------------------------------------------
# reports

SCATTER_COLUMNS = ("metric", "kind", "predictor_id", "x", "y", "y_lo", "y_hi")
CORRELATION_COLUMNS = ("metric", "pearson_r", "r_squared", "p_value", "slope", "intercept", "n", "spearman",
                       "note")
FAILURE_COLUMNS = ("predictor_id", "scenario_index", "seed", "error")
FIT_SAMPLES = 21


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _correlation_values(c: CorrelationRow) -> list[str]:
    rep = c.report
    if rep is None:
        return [c.metric, "", "", "", "", "", "", "", c.note]
    return [c.metric, fmt(rep.pearson_r), fmt(rep.r_squared), fmt(rep.p_value), fmt(rep.slope), fmt(rep.intercept),
            str(rep.n), fmt(c.spearman), c.note]


def scatter_rows(result_rows, reports) -> list[list[str]]:
    out = []
    for c in reports:
        if c.report is None:
            continue
        rep = c.report
        xs = np.array([getattr(r, c.metric) for r in result_rows], dtype=float)
        for r, x in zip(result_rows, xs):
            out.append([c.metric, "point", r.predictor_id, fmt(x), fmt(r.driving_performance), "", ""])
        grid = np.linspace(xs.min(), xs.max(), FIT_SAMPLES)
        for x in grid:
            xq = float(fmt(x))
            lo, hi = rep.band(xq)
            out.append([c.metric, "fit", "", fmt(xq), fmt(rep.slope * xq + rep.intercept), fmt(lo), fmt(hi)])
    return out


def summary_text(result_rows, reports, config: ExperimentConfig | None = None, failures=()) -> str:
    lines = []
    if config is not None:
        budget = (f"tick rate {config.tick_rate:g} Hz" if config.mode == "fixed_time" and config.tick_rate
                  else "unconstrained" if config.mode == "fixed_time"
                  else f"{config.prediction_calls} prediction calls")
        lines.append(f"experiment {config.name}: planner {config.planner}, {config.mode} ({budget}), "
                     f"{config.scenarios_per_predictor} scenarios per predictor, safety mode {config.safety_mode}")
        lines.append("")
    lines.append(f"{'predictor':<16}{'latency':>9}{'sigma':>8}{'static ADE':>12}{'dyn ADE':>10}{'dyn FDE':>10}"
                 f"{'safety':>8}{'effic.':>8}{'comfort':>8}{'DP':>8}{'fallback':>10}")
    for r in result_rows:
        lines.append(f"{r.predictor_id:<16}{r.latency:>9.3f}{r.sigma:>8.3f}{r.static_ade:>12.4f}"
                     f"{r.dynamic_ade:>10.4f}{r.dynamic_fde:>10.4f}{r.safety:>8.3f}{r.efficiency:>8.3f}"
                     f"{r.comfort:>8.3f}{r.driving_performance:>8.4f}{r.fallback_fraction:>10.3f}")
    lines.append("")
    lines.append("correlation with driving performance (per-predictor means; band is the mean response)")
    lines.append(f"{'metric':<22}{'pearson r':>11}{'R^2':>9}{'p-value':>14}{'spearman':>10}{'n':>4}")
    for c in reports:
        if c.report is None:
            lines.append(f"{c.metric:<22}  n/a ({c.note})")
            continue
        rep = c.report
        lines.append(f"{c.metric:<22}{rep.pearson_r:>11.4f}{rep.r_squared:>9.4f}{rep.p_display:>14}"
                     f"{c.spearman:>10.4f}{rep.n:>4}")
    if failures:
        lines.append("")
        lines.append(f"{len(failures)} episode(s) failed; see failures.csv")
    return "\n".join(lines) + "\n"


def emit_report(result: ExperimentResult, out_dir: str | Path, config: ExperimentConfig | None = None) -> list[Path]:
    """Write metrics.csv, results.csv, correlations.csv, scatter.csv, failures.csv and summary.txt."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    paths = {name: out / name for name in ("metrics.csv", "results.csv", "correlations.csv", "scatter.csv",
                                           "failures.csv", "summary.txt")}
    _write_csv(paths["metrics.csv"], M.MetricRow.columns(), [r.values() for r in result.metric_rows])
    _write_csv(paths["results.csv"], ResultRow.columns(), [r.values() for r in result.result_rows])
    _write_csv(paths["correlations.csv"], CORRELATION_COLUMNS, [_correlation_values(c) for c in result.reports])
    _write_csv(paths["scatter.csv"], SCATTER_COLUMNS, scatter_rows(result.result_rows, result.reports))
    _write_csv(paths["failures.csv"], FAILURE_COLUMNS,
               [[pid, str(idx), str(seed), err] for pid, idx, seed, err in result.failures])
    try:
        paths["summary.txt"].write_text(summary_text(result.result_rows, result.reports, config, result.failures))
    except OSError as exc:
        raise OSError(f"cannot write {paths['summary.txt']}: {exc.strerror or exc}") from exc
    return list(paths.values())


def read_metric_rows(path: str | Path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(M.MetricRow.columns()[:6]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [M.MetricRow.from_record(rec) for rec in reader]


def analyze(rows_path: str | Path, out_dir: str | Path | None = None) -> ExperimentResult:
    """Recompute normalisation, aggregates and correlations from a metrics CSV."""
    rows = read_metric_rows(rows_path)
    if len(rows) < 2:
        raise ValueError(f"{rows_path}: need at least two metric rows")
    result_rows, spec = aggregate(rows)
    reports = correlations(result_rows) if len(result_rows) >= 3 else []
    res = ExperimentResult(rows, result_rows, reports, [], spec)
    emit_report(res, out_dir if out_dir is not None else Path(rows_path).parent)
    return res
