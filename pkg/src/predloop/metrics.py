"""Prediction-accuracy and driving-performance metrics.

Static errors compare trajectories directly. Dynamic errors are computed from an
episode log: every prediction issued during the run is scored against what the
agent then actually did in that same run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .episode_log import EpisodeLog, fmt
from .geometry import FOOTPRINTS, OrientedBox, box_distance, boxes_intersect
from .predictors import T_OBS

MIN_QUALIFYING_TICKS = 20
DEFAULT_EPSILON = 1.0
DEFAULT_BUFFER = 0.3
CLOSEST_K = 3
DYNAMIC_METRICS = ("ade", "fde", "min_ade", "min_fde")


class InsufficientDataError(ValueError):
    """Too few qualifying prediction ticks for a dynamic metric."""


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).reshape(-1, 2)
    t = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(p) != len(t):
        raise ValueError(f"trajectory lengths differ: {len(p)} vs {len(t)}")
    if len(p) == 0:
        raise ValueError("trajectories must have at least one point")
    return p, t


def ade(pred, truth) -> float:
    """Mean pointwise Euclidean distance."""
    p, t = _pair(pred, truth)
    return float(np.mean(np.hypot(*(p - t).T)))


def fde(pred, truth) -> float:
    """Distance between the final points."""
    p, t = _pair(pred, truth)
    return float(np.hypot(*(p[-1] - t[-1])))


def _modes(pred_set) -> np.ndarray:
    modes = getattr(pred_set, "modes", pred_set)
    modes = np.asarray(modes, dtype=float)
    if modes.ndim == 2:
        modes = modes[None]
    if len(modes) == 0:
        raise ValueError("prediction set has no modes")
    return modes


def min_ade(pred_set, truth) -> float:
    return min(ade(m, truth) for m in _modes(pred_set))


def min_fde(pred_set, truth) -> float:
    return min(fde(m, truth) for m in _modes(pred_set))


_SCORERS = {
    "ade": lambda modes, truth: ade(modes[0], truth),
    "fde": lambda modes, truth: fde(modes[0], truth),
    "min_ade": min_ade,
    "min_fde": min_fde,
}


# ---------------------------------------------------------------------------
# dynamic errors


def _closest_exos(log: EpisodeLog, tick: int, k: int) -> set[int]:
    row = log.rows[tick]
    ego = row.get(log.ego_id)
    if ego is None:
        return set()
    dist = sorted((math.hypot(s[0] - ego[0], s[1] - ego[1]), aid) for aid, s in row.items() if aid != log.ego_id)
    return {aid for _, aid in dist[:k]}


def qualifying_predictions(log: EpisodeLog, closest_k: int | None = None, full_observation_only: bool = False):
    """(issue_tick, modes, realized_future) for every prediction that can be scored."""
    stride = log.stride
    out = []
    closest: dict[int, set[int]] = {}
    for p in log.predictions:
        t, aid = p.issue_tick, p.agent_id
        horizon = p.modes.shape[1]
        future_ticks = [t + stride * k for k in range(1, horizon + 1)]
        if any(aid not in log.rows.get(ft, {}) for ft in future_ticks):
            continue
        if full_observation_only and any(aid not in log.rows.get(t - stride * j, {}) for j in range(T_OBS)):
            continue
        if closest_k is not None:
            if t not in closest:
                closest[t] = _closest_exos(log, t, closest_k)
            if aid not in closest[t]:
                continue
        truth = np.array([log.rows[ft][aid][:2] for ft in future_ticks])
        out.append((t, p.modes, truth))
    return out


def dynamic_prediction_error(log: EpisodeLog, metric: str = "ade", closest_k: int | None = None,
                             full_observation_only: bool = False,
                             min_ticks: int = MIN_QUALIFYING_TICKS) -> float:
    """Average ``metric`` over every qualifying (tick, agent) prediction in the log.

    Raises:
        InsufficientDataError: fewer than ``min_ticks`` distinct issue ticks qualify.
    """
    if metric not in _SCORERS:
        raise ValueError(f"unknown metric {metric!r}")
    if not log.predictions:
        raise InsufficientDataError("log contains no predictions")
    items = qualifying_predictions(log, closest_k, full_observation_only)
    ticks = {t for t, _, _ in items}
    if len(ticks) < min_ticks:
        raise InsufficientDataError(f"{len(ticks)} qualifying ticks, need {min_ticks}")
    score = _SCORERS[metric]
    return float(np.mean([score(modes, truth) for _, modes, truth in items]))


# ---------------------------------------------------------------------------
# driving performance


def _box(kind: str, row, buffer: float = 0.0) -> OrientedBox:
    length, width = FOOTPRINTS[kind]
    return OrientedBox(row[0], row[1], row[2], length / 2 + buffer, width / 2)


def tick_violation(log: EpisodeLog, tick: int, mode: str = "distance", epsilon: float = DEFAULT_EPSILON,
                   buffer: float = DEFAULT_BUFFER) -> bool:
    row = log.rows[tick]
    ego_id = log.ego_id
    ego = row.get(ego_id)
    others = [(log.kinds[a], s) for a, s in sorted(row.items()) if a != ego_id]
    if ego is None or not others:
        return False
    if mode == "distance":
        a = _box("ego", ego)
        reach = math.hypot(a.half_length, a.half_width) + epsilon
        for kind, s in others:
            b = _box(kind, s)
            # cheap reject before the exact box distance
            if math.hypot(s[0] - ego[0], s[1] - ego[1]) - math.hypot(b.half_length, b.half_width) >= reach:
                continue
            if box_distance(a, b) < epsilon:
                return True
        return False
    if mode == "buffered_obb":
        el, ew = FOOTPRINTS["ego"]
        arr = np.array([[s[0], s[1], s[2], FOOTPRINTS[k][0] / 2 + buffer, FOOTPRINTS[k][1] / 2] for k, s in others])
        return bool(boxes_intersect(ego[0], ego[1], ego[2], el / 2 + buffer, ew / 2, *arr.T).any())
    raise ValueError(f"unknown safety mode {mode!r}")


def safety_rate(log: EpisodeLog, mode: str = "distance", epsilon: float = DEFAULT_EPSILON,
                buffer: float = DEFAULT_BUFFER) -> float:
    """Fraction of logged ticks on which the ego violates the safety criterion against any exo.

    ``distance`` flags box-to-box distance below ``epsilon``; ``buffered_obb`` flags overlap
    of boxes whose lengths are grown by ``buffer`` at each end.
    """
    ticks = log.ticks
    if not ticks:
        raise ValueError("empty log")
    hits = sum(tick_violation(log, t, mode, epsilon, buffer) for t in ticks)
    return hits / len(ticks)


def avg_speed(log_or_speeds) -> float:
    speeds = _speeds(log_or_speeds)
    if len(speeds) == 0:
        raise ValueError("no ticks")
    return float(np.mean(speeds))


def mean_jerk(log_or_speeds, dt: float | None = None) -> float:
    """Mean |jerk| from second differences of ego speed."""
    speeds = _speeds(log_or_speeds)
    if dt is None:
        dt = log_or_speeds.dt if isinstance(log_or_speeds, EpisodeLog) else 0.03
    if len(speeds) < 3:
        raise ValueError("jerk needs at least 3 ticks")
    acc = np.diff(speeds) / dt
    return float(np.mean(np.abs(np.diff(acc) / dt)))


def _speeds(log_or_speeds) -> np.ndarray:
    if isinstance(log_or_speeds, EpisodeLog):
        return log_or_speeds.ego_speeds()
    return np.asarray(log_or_speeds, dtype=float)


# ---------------------------------------------------------------------------
# cohort normalisation

DYNAMIC_COLUMNS = ("dynamic_ade", "dynamic_fde", "dynamic_min_ade", "dynamic_min_fde",
                   "dynamic_ade_closest", "dynamic_fde_closest", "dynamic_ade_full", "dynamic_fde_full")


@dataclass
class MetricRow:
    scenario_id: int
    predictor_id: str
    planner_id: str
    safety_raw: float
    efficiency_raw: float
    comfort_raw: float
    dynamic_ade: float = math.nan
    dynamic_fde: float = math.nan
    dynamic_min_ade: float = math.nan
    dynamic_min_fde: float = math.nan
    dynamic_ade_closest: float = math.nan
    dynamic_fde_closest: float = math.nan
    dynamic_ade_full: float = math.nan
    dynamic_fde_full: float = math.nan
    fallback_fraction: float = 0.0
    # per-predictor context carried along so a metrics file can be analysed on its own
    latency: float = 0.0
    sigma: float = math.nan
    static_ade: float = math.nan
    static_fde: float = math.nan

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[str]:
        return [v if isinstance(v, str) else (str(v) if isinstance(v, int) else fmt(v))
                for v in asdict(self).values()]

    @classmethod
    def from_record(cls, rec: dict) -> "MetricRow":
        kw = {}
        for f in fields(cls):
            if f.name not in rec:
                continue
            raw = rec[f.name]
            kw[f.name] = int(raw) if f.name == "scenario_id" else (raw if f.type == "str" else float(raw))
        return cls(**kw)


def metric_row(log: EpisodeLog, scenario_id: int, predictor_id: str, planner_id: str,
               safety_mode: str = "distance", epsilon: float = DEFAULT_EPSILON,
               buffer: float = DEFAULT_BUFFER) -> MetricRow:
    """All raw metrics of one episode. Filtered variants that lack data are left NaN."""
    row = MetricRow(scenario_id, predictor_id, planner_id, safety_rate(log, safety_mode, epsilon, buffer),
                    avg_speed(log), mean_jerk(log))
    for m in DYNAMIC_METRICS:
        setattr(row, f"dynamic_{m}", dynamic_prediction_error(log, m))
    for m in ("ade", "fde"):
        for suffix, kwargs in (("closest", {"closest_k": CLOSEST_K}), ("full", {"full_observation_only": True})):
            try:
                setattr(row, f"dynamic_{m}_{suffix}", dynamic_prediction_error(log, m, **kwargs))
            except InsufficientDataError:
                pass
    if log.decisions:
        row.fallback_fraction = sum(d.fallback for d in log.decisions) / len(log.decisions)
    return row


@dataclass(frozen=True)
class NormalizationSpec:
    """Cohort extremes per raw metric; ``degenerate`` lists metrics whose range was zero."""
    p_min: dict
    p_max: dict
    direction: dict
    degenerate: tuple = ()


@dataclass(frozen=True)
class NormalizedRow:
    safety: float
    efficiency: float
    comfort: float

    @property
    def driving_performance(self) -> float:
        return driving_performance(self)


NORMALIZED_METRICS = {"safety": ("safety_raw", "lower_better"), "efficiency": ("efficiency_raw", "higher_better"),
                      "comfort": ("comfort_raw", "lower_better")}


def normalize_cohort(rows) -> tuple[list[NormalizedRow], NormalizationSpec]:
    """Min-max normalise safety, efficiency and comfort so that higher is better.

    A metric that is constant over the cohort maps to 1.0 for every row and is flagged.
    """
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("normalization needs at least two rows")
    p_min, p_max, direction, degenerate, scaled = {}, {}, {}, [], {}
    for name, (attr, dirn) in NORMALIZED_METRICS.items():
        vals = np.array([float(getattr(r, attr)) for r in rows])
        lo, hi = float(vals.min()), float(vals.max())
        p_min[name], p_max[name], direction[name] = lo, hi, dirn
        if hi == lo:
            degenerate.append(name)
            scaled[name] = np.ones(len(rows))
            continue
        frac = (vals - lo) / (hi - lo)
        scaled[name] = frac if dirn == "higher_better" else 1.0 - frac
    out = [NormalizedRow(float(scaled["safety"][i]), float(scaled["efficiency"][i]), float(scaled["comfort"][i]))
           for i in range(len(rows))]
    return out, NormalizationSpec(p_min, p_max, direction, tuple(degenerate))


def driving_performance(row) -> float:
    """Mean of the normalised safety, efficiency and comfort scores."""
    vals = (row.safety, row.efficiency, row.comfort) if hasattr(row, "safety") else tuple(row)
    if len(vals) != 3 or any(not 0.0 <= v <= 1.0 for v in vals):
        raise ValueError("normalized scores must be three values in [0, 1]")
    return (vals[0] + vals[1] + vals[2]) / 3.0
