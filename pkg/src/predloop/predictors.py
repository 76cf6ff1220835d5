"""Trajectory predictors (CV, CA, KNN, S-KNN, noisy oracle) and the KNN trajectory database."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

T_OBS = 20
T_PRED = 30
MAX_MODES = 6
N_SOCIAL = 3

# declared per-call inference times (s)
LATENCY = {
    "cv": 0.001,
    "ca": 0.001,
    "lstm": 0.010,
    "s-lstm": 0.014,
    "hivt": 0.024,
    "lanegcn": 0.024,
    "knn": 0.224,
    "s-knn": 0.248,
}


class PredictionError(ValueError):
    pass


class InsufficientHistory(PredictionError):
    pass


class EmptyDatabase(PredictionError):
    pass


@dataclass(frozen=True)
class History:
    agent_id: int
    positions: np.ndarray  # (k, 2), oldest first, uniform frame spacing
    headings: np.ndarray   # (k,)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        head = np.asarray(self.headings, dtype=float).reshape(-1)
        if len(pos) != len(head):
            raise ValueError("positions and headings differ in length")
        if len(pos) > T_OBS:
            pos, head = pos[-T_OBS:], head[-T_OBS:]
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "headings", head)

    @classmethod
    def from_positions(cls, positions, agent_id: int = 0) -> "History":
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        head = np.zeros(len(pos))
        for i in range(len(pos)):
            j = max(i, 1)
            if j < len(pos):
                d = pos[j] - pos[j - 1]
                if np.any(d):
                    head[i] = math.atan2(d[1], d[0])
                elif i > 0:
                    head[i] = head[i - 1]
        return cls(agent_id, pos, head)

    @property
    def complete(self) -> bool:
        return len(self.positions) == T_OBS

    @property
    def last(self) -> np.ndarray:
        return self.positions[-1]


@dataclass(frozen=True)
class PredictionSet:
    modes: np.ndarray          # (K, T_p, 2), sorted so mode 0 carries the largest weight
    weights: np.ndarray        # (K,)
    virtual_latency: float
    agent_id: int = -1
    issue_tick: int = -1
    clamped: bool = False

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if modes.ndim != 3 or modes.shape[1:] != (T_PRED, 2):
            raise ValueError(f"modes must be (K, {T_PRED}, 2), got {modes.shape}")
        if not 1 <= len(modes) <= MAX_MODES:
            raise ValueError(f"mode count {len(modes)} outside [1, {MAX_MODES}]")
        if weights.shape != (len(modes),) or np.any(weights < 0):
            raise ValueError("weights must be non-negative, one per mode")
        if not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("mode weights must sum to 1")
        order = np.argsort(-weights, kind="stable")
        object.__setattr__(self, "modes", modes[order])
        object.__setattr__(self, "weights", weights[order])

    @property
    def best(self) -> np.ndarray:
        return self.modes[0]


def _single(traj: np.ndarray, latency: float, agent_id: int) -> PredictionSet:
    return PredictionSet(traj[None], np.ones(1), latency, agent_id)


def _extrapolate(last: np.ndarray, steps: np.ndarray) -> np.ndarray:
    return last + np.cumsum(steps, axis=0)


def predict_cv(history: History, dt_frame: float = 0.09, latency: float = LATENCY["cv"]) -> PredictionSet:
    """Repeat the last observed displacement over the horizon."""
    pos = history.positions
    if len(pos) < 2:
        raise InsufficientHistory(f"CV needs 2 frames, agent {history.agent_id} has {len(pos)}")
    d = pos[-1] - pos[-2]
    traj = _extrapolate(pos[-1], np.repeat(d[None], T_PRED, axis=0))
    return _single(traj, latency, history.agent_id)


def predict_ca(history: History, dt_frame: float = 0.09, latency: float = LATENCY["ca"]) -> PredictionSet:
    """Constant acceleration along the last heading; speed never drops below zero."""
    pos = history.positions
    if len(pos) < 3:
        raise InsufficientHistory(f"CA needs 3 frames, agent {history.agent_id} has {len(pos)}")
    d1 = pos[-2] - pos[-3]
    d2 = pos[-1] - pos[-2]
    v = math.hypot(*d2)
    if v == 0.0:
        return _single(np.repeat(pos[-1][None], T_PRED, axis=0), latency, history.agent_id)
    acc = v - math.hypot(*d1)
    k = np.arange(1, T_PRED + 1)
    scale = np.maximum(v + k * acc, 0.0) / v
    traj = _extrapolate(pos[-1], d2[None] * scale[:, None])
    return _single(traj, latency, history.agent_id)


# ---------------------------------------------------------------------------
# KNN family


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def history_feature(history: History) -> np.ndarray:
    """Displacements in the agent frame (x along the last heading): 2*(T_o-1) values."""
    if not history.complete:
        raise InsufficientHistory(
            f"agent {history.agent_id} has {len(history.positions)}/{T_OBS} history frames")
    to_local = _rotation(-history.headings[-1])
    disp = np.diff(history.positions, axis=0) @ to_local.T
    return disp.ravel()


def neighbor_feature(history: History, neighbors: Sequence[np.ndarray]) -> np.ndarray:
    """Agent-frame offsets of the 3 nearest neighbours at the last frame, zero padded."""
    out = np.zeros(2 * N_SOCIAL)
    if len(neighbors) == 0:
        return out
    rel = np.asarray(neighbors, dtype=float).reshape(-1, 2) - history.last
    order = np.argsort(np.hypot(rel[:, 0], rel[:, 1]), kind="stable")[:N_SOCIAL]
    local = rel[order] @ _rotation(-history.headings[-1]).T
    out[: local.size] = local.ravel()
    return out


@dataclass
class TrajectoryDatabase:
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 2 * (T_OBS - 1))))
    futures: np.ndarray = field(default_factory=lambda: np.zeros((0, T_PRED, 2)))
    social: np.ndarray = field(default_factory=lambda: np.zeros((0, 2 * N_SOCIAL)))

    def __len__(self) -> int:
        return len(self.features)

    def add(self, feature: np.ndarray, future_local: np.ndarray, social: np.ndarray | None = None) -> None:
        feature = np.asarray(feature, dtype=float).reshape(1, -1)
        future_local = np.asarray(future_local, dtype=float).reshape(1, T_PRED, 2)
        social = np.zeros((1, 2 * N_SOCIAL)) if social is None else np.asarray(social, float).reshape(1, -1)
        if not (np.all(np.isfinite(feature)) and np.all(np.isfinite(future_local))):
            raise ValueError("database entries must be finite")
        self.features = np.vstack([self.features, feature])
        self.futures = np.concatenate([self.futures, future_local])
        self.social = np.vstack([self.social, social])

    def add_segment(self, history: History, future: np.ndarray, neighbors=()) -> None:
        """Add a (history, absolute future) pair, converting to the agent frame."""
        to_local = _rotation(-history.headings[-1])
        local = (np.asarray(future, dtype=float) - history.last) @ to_local.T
        self.add(history_feature(history), local, neighbor_feature(history, neighbors))

    def header(self) -> list[str]:
        nh, ns = self.features.shape[1], self.social.shape[1]
        return ([f"h{i}" for i in range(nh)] + [f"n{i}" for i in range(ns)]
                + [f"f{c}{j}" for j in range(T_PRED) for c in "xy"])

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for f, s, fut in zip(self.features, self.social, self.futures):
                w.writerow([repr(float(v)) for v in np.concatenate([f, s, fut.ravel()])])

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryDatabase":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            nh = sum(1 for c in header if c.startswith("h"))
            ns = sum(1 for c in header if c.startswith("n"))
            rows = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(header))
        return cls(rows[:, :nh].copy(), rows[:, nh + ns:].reshape(-1, T_PRED, 2).copy(),
                   rows[:, nh:nh + ns].copy())


def _knn(query: np.ndarray, table: np.ndarray, k: int) -> np.ndarray:
    dist = np.sqrt(np.sum((table - query) ** 2, axis=1))
    return np.argsort(dist, kind="stable")[:k]


def _from_entries(history: History, db: TrajectoryDatabase, idx: np.ndarray, latency: float,
                  clamped: bool) -> PredictionSet:
    to_world = _rotation(history.headings[-1])
    modes = db.futures[idx] @ to_world.T + history.last
    return PredictionSet(modes, np.full(len(idx), 1.0 / len(idx)), latency, history.agent_id,
                         clamped=clamped)


def predict_knn(history: History, db: TrajectoryDatabase, k: int = MAX_MODES,
                latency: float = LATENCY["knn"]) -> PredictionSet:
    if len(db) == 0:
        raise EmptyDatabase("KNN database is empty")
    feat = history_feature(history)
    k_eff = min(k, len(db))
    idx = _knn(feat, db.features, k_eff)
    return _from_entries(history, db, idx, latency, clamped=k_eff < k)


def predict_sknn(history: History, neighbors: Sequence[np.ndarray], db: TrajectoryDatabase,
                 k: int = MAX_MODES, latency: float = LATENCY["s-knn"]) -> PredictionSet:
    """KNN over the concatenated (own motion, neighbour layout) feature."""
    if len(db) == 0:
        raise EmptyDatabase("S-KNN database is empty")
    query = np.concatenate([history_feature(history), neighbor_feature(history, neighbors)])
    table = np.hstack([db.features, db.social])
    k_eff = min(k, len(db))
    idx = _knn(query, table, k_eff)
    return _from_entries(history, db, idx, latency, clamped=k_eff < k)


def noise_rng(seed: int, tick: int, agent_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, tick, agent_id]))


def predict_noisy_oracle(scripted_future: np.ndarray, sigma: float, latency: float,
                         rng: np.random.Generator | None = None, agent_id: int = -1) -> PredictionSet:
    """True future plus i.i.d. Gaussian noise of std ``sigma`` per coordinate."""
    if sigma < 0 or latency < 0:
        raise ValueError("sigma and latency must be non-negative")
    fut = np.asarray(scripted_future, dtype=float).reshape(T_PRED, 2)
    if sigma > 0:
        fut = fut + (rng or np.random.default_rng()).normal(0.0, sigma, size=fut.shape)
    return _single(fut.copy(), latency, agent_id)


# ---------------------------------------------------------------------------
# predictor objects used inside the closed loop


@dataclass(frozen=True)
class PredictionContext:
    """Everything the simulator can hand a predictor for one agent at one frame."""
    history: History
    neighbors: tuple = ()          # last-frame positions of the other agents
    future: np.ndarray | None = None  # committed future positions (oracle only)
    tick: int = 0
    seed: int = 0
    dt_frame: float = 0.09


class Predictor:
    name = "base"
    min_history = 2

    def __init__(self, latency: float | None = None, name: str | None = None):
        self.latency = LATENCY.get(self.name, 0.001) if latency is None else float(latency)
        if name:
            self.name = name

    def predict(self, ctx: PredictionContext) -> PredictionSet:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, latency={self.latency})"


class ConstantVelocity(Predictor):
    name = "cv"

    def predict(self, ctx):
        return _retag(predict_cv(ctx.history, ctx.dt_frame, self.latency), ctx)


class ConstantAcceleration(Predictor):
    name = "ca"
    min_history = 3

    def predict(self, ctx):
        return _retag(predict_ca(ctx.history, ctx.dt_frame, self.latency), ctx)


class KNearestNeighbors(Predictor):
    name = "knn"
    min_history = T_OBS

    def __init__(self, db: TrajectoryDatabase, k: int = MAX_MODES, latency=None, name=None):
        super().__init__(latency, name)
        self.db, self.k = db, k

    def predict(self, ctx):
        return _retag(predict_knn(ctx.history, self.db, self.k, self.latency), ctx)


class SocialKNearestNeighbors(KNearestNeighbors):
    name = "s-knn"

    def predict(self, ctx):
        return _retag(predict_sknn(ctx.history, ctx.neighbors, self.db, self.k, self.latency), ctx)


class NoisyOracle(Predictor):
    """Reads the simulator's committed future and blurs it; accuracy and latency are dials."""
    name = "oracle"
    min_history = 1

    def __init__(self, sigma: float = 0.0, latency: float = 0.001, name: str | None = None):
        super().__init__(latency, name)
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)

    def predict(self, ctx):
        if ctx.future is None:
            raise PredictionError("noisy oracle needs the committed future")
        rng = noise_rng(ctx.seed, ctx.tick, ctx.history.agent_id) if self.sigma > 0 else None
        return _retag(predict_noisy_oracle(ctx.future, self.sigma, self.latency, rng), ctx)


def _retag(ps: PredictionSet, ctx: PredictionContext) -> PredictionSet:
    return PredictionSet(ps.modes, ps.weights, ps.virtual_latency, ctx.history.agent_id,
                         ctx.tick, ps.clamped)


def stable_id(text: str) -> int:
    return zlib.crc32(text.encode())


def make_predictor(kind: str, *, sigma: float = 0.0, latency: float | None = None,
                   db: TrajectoryDatabase | None = None, k: int = MAX_MODES,
                   name: str | None = None) -> Predictor:
    kind = kind.lower()
    if kind == "cv":
        return ConstantVelocity(latency, name)
    if kind == "ca":
        return ConstantAcceleration(latency, name)
    if kind in ("knn", "s-knn", "sknn"):
        if db is None:
            raise ValueError(f"{kind} predictor needs a trajectory database")
        cls = KNearestNeighbors if kind == "knn" else SocialKNearestNeighbors
        return cls(db, k, latency, name)
    if kind in ("oracle", "noisy_oracle", "noisy-oracle"):
        return NoisyOracle(sigma, 0.001 if latency is None else latency, name)
    raise ValueError(f"unknown predictor kind {kind!r}")


# ---------------------------------------------------------------------------
# database construction from logs


def build_database(logs, stride: int | None = None) -> TrajectoryDatabase:
    """One entry per (log, exo agent, window) with T_o history and T_p future frames.

    Windows slide by one frame over each agent's gap-free run of prediction frames;
    entries are ordered by (log index, agent id, tick).
    """
    db = TrajectoryDatabase()
    window = T_OBS + T_PRED
    for log in logs:
        st = stride or log.stride
        frame_ticks = [t for t in log.ticks if t % st == 0]
        for aid in log.exo_ids:
            run: list[int] = []
            for t in frame_ticks:
                if aid in log.rows[t] and (not run or t == run[-1] + st):
                    run.append(t)
                    continue
                _add_windows(db, log, aid, run, window)
                run = [t] if aid in log.rows[t] else []
            _add_windows(db, log, aid, run, window)
    if len(db) == 0:
        raise EmptyDatabase("no agent segment spans history plus future frames")
    return db


def _add_windows(db: TrajectoryDatabase, log, aid: int, run: list[int], window: int) -> None:
    for i in range(len(run) - window + 1):
        ticks = run[i:i + window]
        rows = np.array([log.rows[t][aid] for t in ticks])
        hist = History(aid, rows[:T_OBS, :2], rows[:T_OBS, 2])
        last_tick = ticks[T_OBS - 1]
        neighbors = [row[:2] for other, row in sorted(log.rows[last_tick].items()) if other != aid]
        db.add_segment(hist, rows[T_OBS:, :2], neighbors)
