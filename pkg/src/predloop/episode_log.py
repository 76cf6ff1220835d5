"""Episode logs: per-tick agent states, decisions and issued predictions, with CSV IO.

Every float stored in a log is already rounded to 9 significant digits, so a log
written to CSV and read back compares equal to the in-memory original.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STATE_COLUMNS = ("tick", "agent_id", "kind", "x", "y", "heading", "speed")
PREDICTION_COLUMNS = ("issue_tick", "agent_id", "mode_index", "step_index", "x", "y")
DECISION_COLUMNS = ("tick", "action", "virtual_time_spent", "fallback_flag")


def fmt(value: float) -> str:
    return format(float(value), ".9g")


def q9(value):
    """Round to 9 significant digits (scalar or array)."""
    if np.isscalar(value):
        return float(fmt(value))
    arr = np.asarray(value, dtype=float)
    return np.array([float(fmt(v)) for v in arr.ravel()]).reshape(arr.shape)


@dataclass(frozen=True)
class Decision:
    tick: int
    action: float
    virtual_time: float
    fallback: bool = False


@dataclass(frozen=True)
class LoggedPrediction:
    issue_tick: int
    agent_id: int
    modes: np.ndarray  # (K, T_p, 2), mode 0 is the planner's mode


@dataclass
class EpisodeLog:
    meta: dict = field(default_factory=dict)
    kinds: dict[int, str] = field(default_factory=dict)
    # tick -> {agent_id: (x, y, heading, speed)}
    rows: dict[int, dict[int, tuple[float, float, float, float]]] = field(default_factory=dict)
    decisions: list[Decision] = field(default_factory=list)
    predictions: list[LoggedPrediction] = field(default_factory=list)
    collisions: list[tuple[int, int]] = field(default_factory=list)

    # -- recording -------------------------------------------------------

    def record_states(self, tick: int, states) -> None:
        if self.rows and tick != max(self.rows) + 1:
            raise ValueError(f"tick {tick} breaks the gap-free sequence")
        frame = {}
        for st in states:
            self.kinds.setdefault(st.agent_id, st.kind)
            frame[st.agent_id] = (q9(st.x), q9(st.y), q9(st.heading), q9(st.speed))
        self.rows[tick] = frame

    def record_decision(self, tick: int, action: float, virtual_time: float, fallback: bool) -> None:
        self.decisions.append(Decision(tick, q9(action), q9(virtual_time), bool(fallback)))

    def record_prediction(self, issue_tick: int, agent_id: int, modes: np.ndarray) -> None:
        self.predictions.append(LoggedPrediction(issue_tick, agent_id, q9(modes)))

    # -- access ------------------------------------------------------------

    @property
    def ticks(self) -> list[int]:
        return sorted(self.rows)

    @property
    def ego_id(self) -> int:
        for aid, kind in self.kinds.items():
            if kind == "ego":
                return aid
        raise KeyError("log has no ego agent")

    @property
    def exo_ids(self) -> list[int]:
        return sorted(a for a, k in self.kinds.items() if k != "ego")

    @property
    def dt(self) -> float:
        return float(self.meta.get("dt_sim", 0.03))

    @property
    def stride(self) -> int:
        return int(self.meta.get("predictor_stride", 3))

    def position(self, tick: int, agent_id: int):
        row = self.rows.get(tick, {}).get(agent_id)
        return None if row is None else (row[0], row[1])

    def track(self, agent_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(ticks, states[x, y, heading, speed]) for one agent, in tick order."""
        ticks = [t for t in self.ticks if agent_id in self.rows[t]]
        states = np.array([self.rows[t][agent_id] for t in ticks], dtype=float).reshape(-1, 4)
        return np.array(ticks, dtype=int), states

    def ego_speeds(self) -> np.ndarray:
        return self.track(self.ego_id)[1][:, 3]

    def actions(self) -> dict[int, float]:
        return {d.tick: d.action for d in self.decisions}

    # -- CSV ---------------------------------------------------------------

    def write(self, base: str | Path) -> list[Path]:
        """Write ``base.csv`` plus ``.predictions.csv``, ``.decisions.csv`` and ``.meta.json``."""
        base = Path(base)
        base.parent.mkdir(parents=True, exist_ok=True)
        paths = companion_paths(base)
        with open(paths["states"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STATE_COLUMNS)
            for t in self.ticks:
                for aid in sorted(self.rows[t]):
                    x, y, h, v = self.rows[t][aid]
                    w.writerow([t, aid, self.kinds[aid], fmt(x), fmt(y), fmt(h), fmt(v)])
        with open(paths["predictions"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICTION_COLUMNS)
            for p in self.predictions:
                for k, mode in enumerate(p.modes):
                    for j, (x, y) in enumerate(mode):
                        w.writerow([p.issue_tick, p.agent_id, k, j, fmt(x), fmt(y)])
        with open(paths["decisions"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DECISION_COLUMNS)
            for d in self.decisions:
                w.writerow([d.tick, fmt(d.action), fmt(d.virtual_time), int(d.fallback)])
        with open(paths["meta"], "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return list(paths.values())

    @classmethod
    def read(cls, base: str | Path) -> "EpisodeLog":
        paths = companion_paths(Path(base))
        if not paths["states"].exists():
            raise FileNotFoundError(f"no episode log at {paths['states']}")
        log = cls()
        if paths["meta"].exists():
            log.meta = json.loads(paths["meta"].read_text())
        with open(paths["states"], newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != STATE_COLUMNS:
                raise ValueError(f"{paths['states']}: unexpected header {header}")
            for t, aid, kind, x, y, h, v in reader:
                t, aid = int(t), int(aid)
                log.kinds.setdefault(aid, kind)
                log.rows.setdefault(t, {})[aid] = (float(x), float(y), float(h), float(v))
        if paths["predictions"].exists():
            grouped: dict[tuple[int, int], dict[int, dict[int, tuple[float, float]]]] = {}
            with open(paths["predictions"], newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for t, aid, k, j, x, y in reader:
                    grouped.setdefault((int(t), int(aid)), {}).setdefault(int(k), {})[int(j)] = (
                        float(x), float(y))
            for (t, aid), modes in grouped.items():
                arr = np.array([[modes[k][j] for j in sorted(modes[k])] for k in sorted(modes)])
                log.predictions.append(LoggedPrediction(t, aid, arr))
        if paths["decisions"].exists():
            with open(paths["decisions"], newline="") as fh:
                reader = csv.reader(fh)
                next(reader)
                for t, a, vt, fb in reader:
                    log.decisions.append(Decision(int(t), float(a), float(vt), fb == "1"))
        return log


def companion_paths(base: Path) -> dict[str, Path]:
    base = Path(base)
    stem = base.name[:-4] if base.name.endswith(".csv") else base.name
    root = base.parent
    return {
        "states": root / f"{stem}.csv",
        "predictions": root / f"{stem}.predictions.csv",
        "decisions": root / f"{stem}.decisions.csv",
        "meta": root / f"{stem}.meta.json",
    }


def boxes_at(log: EpisodeLog, tick: int):
    """(agent_id, kind, x, y, heading) rows at one tick."""
    return [(aid, log.kinds[aid], *row[:3]) for aid, row in sorted(log.rows[tick].items())]


def is_finite_row(row) -> bool:
    return all(math.isfinite(v) for v in row)
