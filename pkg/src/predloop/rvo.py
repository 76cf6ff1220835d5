"""Velocity obstacles, reciprocal velocity obstacles and the RVO speed planner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import AgentState

V_MAX = 6.0
ACCEL_LIMIT = 3.0
# closing speeds below this count as zero depth for an overlapping pair, so a curving ego
# that grazes a stopped neighbour keeps driving instead of freezing against it
OVERLAP_SLACK = 0.5


class OverlapError(ValueError):
    """The two discs already overlap, so no velocity is collision free."""


@dataclass(frozen=True)
class RvoPlanConfig:
    v_max: float = V_MAX
    candidate_count: int = 256
    time_horizon: float = 4.0
    n_speeds: int = 16

    def __post_init__(self):
        if min(self.v_max, self.candidate_count, self.time_horizon, self.n_speeds) <= 0:
            raise ValueError("RVO config values must be positive")


@dataclass(frozen=True)
class VelocityObstacleCone:
    """Truncated velocity-obstacle cone.

    ``scale`` is 1 for a VO and 0.5 for its reciprocal image; membership is tested
    by mapping a velocity back into the original VO.
    """
    apex: np.ndarray
    left_leg: np.ndarray
    right_leg: np.ndarray
    source_agent: int
    rel_position: np.ndarray = field(repr=False)
    radius: float = 0.0
    time_horizon: float = math.inf
    scale: float = 1.0
    vo_apex: np.ndarray | None = field(default=None, repr=False)

    @property
    def half_angle(self) -> float:
        return math.asin(min(1.0, self.radius / float(np.hypot(*self.rel_position))))

    def _to_vo(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.scale == 1.0:
            return v
        return self.vo_apex + (v - self.apex) / self.scale

    def contains(self, v) -> np.ndarray:
        """Whether each velocity (row of ``v``) leads to contact within the horizon."""
        rel = self._to_vo(np.atleast_2d(v)) - (self.vo_apex if self.vo_apex is not None else self.apex)
        p = self.rel_position
        b = rel @ p
        a = np.einsum("ij,ij->i", rel, rel)
        c = float(p @ p) - self.radius ** 2
        disc = b * b - a * c
        inside = (b > 0) & (disc >= 0)
        if math.isfinite(self.time_horizon):
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hit = c / (b + np.sqrt(np.maximum(disc, 0.0)))
            inside &= t_hit <= self.time_horizon
        return inside

    def depth(self, v) -> np.ndarray:
        """Distance from each velocity to the obstacle boundary (0 when outside)."""
        v2 = np.atleast_2d(v)
        rel = self._to_vo(v2) - (self.vo_apex if self.vo_apex is not None else self.apex)
        inside = self.contains(v2)
        # signed distances to the two leg lines (legs pass through the apex)
        nl = np.array([self.left_leg[1], -self.left_leg[0]])
        nr = np.array([-self.right_leg[1], self.right_leg[0]])
        d_left = rel @ nl
        d_right = rel @ nr
        d = np.minimum(np.abs(d_left), np.abs(d_right))
        if math.isfinite(self.time_horizon):
            # inside the truncation disc the nearest exit may be back towards the apex
            centre = self.rel_position / self.time_horizon
            r_cut = self.radius / self.time_horizon
            gap = np.hypot(*(rel - centre).T)
            d = np.minimum(d, np.where(gap <= r_cut, r_cut - gap, np.inf))
        return np.where(inside, d * self.scale, 0.0)


@dataclass(frozen=True)
class OverlapBlock:
    """Stand-in for an already-penetrating pair: every velocity is blocked, closing speed is the depth."""
    apex: np.ndarray
    direction: np.ndarray
    source_agent: int

    def contains(self, v) -> np.ndarray:
        return np.ones(len(np.atleast_2d(v)), dtype=bool)

    def depth(self, v) -> np.ndarray:
        return np.maximum((np.atleast_2d(v) - self.apex) @ self.direction - OVERLAP_SLACK, 0.0) + 1e-9


def compute_vo(ego: AgentState, exo: AgentState, exo_velocity, time_horizon: float = 4.0,
               ego_radius: float | None = None, exo_radius: float | None = None) -> VelocityObstacleCone:
    """Ego velocities whose relative ray meets the combined disc around ``exo`` within the horizon."""
    r = (ego.radius if ego_radius is None else ego_radius) + (exo.radius if exo_radius is None else exo_radius)
    p = np.array([exo.x - ego.x, exo.y - ego.y])
    return _vo_from(p, r, np.asarray(exo_velocity, dtype=float), time_horizon, exo.agent_id)


def _vo_from(p: np.ndarray, r: float, v_b: np.ndarray, time_horizon: float, source: int):
    dist = float(np.hypot(*p))
    if dist < r:
        raise OverlapError(f"agent {source}: distance {dist:.3f} below combined radius {r:.3f}")
    alpha = math.asin(r / dist) if dist > 0 else math.pi / 2
    theta = math.atan2(p[1], p[0])
    left = np.array([math.cos(theta + alpha), math.sin(theta + alpha)])
    right = np.array([math.cos(theta - alpha), math.sin(theta - alpha)])
    return VelocityObstacleCone(v_b.copy(), left, right, source, p, r, time_horizon, 1.0, v_b.copy())


def compute_rvo(vo: VelocityObstacleCone, ego_current_velocity) -> VelocityObstacleCone:
    """Image of ``vo`` under v -> (v + v_ego) / 2."""
    v_a = np.asarray(ego_current_velocity, dtype=float)
    base = vo.vo_apex if vo.vo_apex is not None else vo.apex
    apex = 0.5 * (vo.apex + v_a)
    return VelocityObstacleCone(apex, vo.left_leg, vo.right_leg, vo.source_agent, vo.rel_position,
                                vo.radius, vo.time_horizon, vo.scale * 0.5, base)


def obstacle_for(p_rel, radius, v_self, v_other, time_horizon, source, reciprocal=True):
    """RVO cone for one neighbour, or an OverlapBlock when the discs already overlap."""
    p_rel = np.asarray(p_rel, dtype=float)
    try:
        cone = _vo_from(p_rel, radius, np.asarray(v_other, dtype=float), time_horizon, source)
    except OverlapError:
        dist = float(np.hypot(*p_rel))
        direction = p_rel / dist if dist > 0 else np.array([1.0, 0.0])
        apex = 0.5 * (np.asarray(v_other) + np.asarray(v_self)) if reciprocal else np.asarray(v_other)
        return OverlapBlock(np.asarray(apex, dtype=float), direction, source)
    return compute_rvo(cone, v_self) if reciprocal else cone


def blocked_mask(candidates: np.ndarray, cones) -> np.ndarray:
    mask = np.zeros(len(candidates), dtype=bool)
    for cone in cones:
        mask |= cone.contains(candidates)
    return mask


def select_velocity(candidates, rvo_cones, v_target) -> np.ndarray:
    """Closest collision-free candidate to ``v_target`` (first in sampling order on ties).

    With no free candidate the one with the smallest worst-case penetration depth wins.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    if len(cand) == 0:
        raise ValueError("no candidate velocities")
    free = ~blocked_mask(cand, rvo_cones)
    if free.any():
        dist = np.hypot(*(cand - np.asarray(v_target, dtype=float)).T)
        dist = np.where(free, dist, np.inf)
        return cand[int(np.argmin(dist))]
    worst = np.max([cone.depth(cand) for cone in rvo_cones], axis=0)
    return cand[int(np.argmin(worst))]


def polar_candidates(v_max: float, n_dirs: int = 16, n_speeds: int = 16, v_target=None,
                     base_angle: float = 0.0) -> np.ndarray:
    """``v_target`` and zero first, then an (n_dirs x n_speeds) polar grid up to ``v_max``."""
    angles = base_angle + 2.0 * math.pi * np.arange(n_dirs) / n_dirs
    speeds = v_max * np.arange(1, n_speeds + 1) / n_speeds
    grid = np.stack([np.outer(np.cos(angles), speeds).ravel(), np.outer(np.sin(angles), speeds).ravel()], 1)
    head = [np.zeros(2)] if v_target is None else [np.asarray(v_target, dtype=float), np.zeros(2)]
    return np.vstack([np.array(head), grid])


def heading_candidates(v_max: float, direction, count: int, v_target=None) -> np.ndarray:
    """Speeds along a single direction: the nonholonomic ego cannot translate sideways."""
    u = np.asarray(direction, dtype=float)
    u = u / (np.hypot(*u) or 1.0)
    speeds = v_max * np.arange(1, count + 1) / count
    grid = speeds[:, None] * u[None]
    head = [np.zeros(2)] if v_target is None else [np.asarray(v_target, dtype=float), np.zeros(2)]
    return np.vstack([np.array(head), grid])


def ego_target_velocity(ego: AgentState, path, v_max: float = V_MAX) -> np.ndarray:
    """v_max times the unit vector from the ego to its next waypoint."""
    q = path.query((ego.x, ego.y))
    idx = min(q.nearest_index + 1, len(path.waypoints) - 1)
    d = path.waypoints[idx] - np.array([ego.x, ego.y])
    n = float(np.hypot(*d))
    if n < 1e-9:
        return np.zeros(2)
    return v_max * d / n


def plan_velocity(ego: AgentState, path, exo_states, exo_velocities, cfg: RvoPlanConfig) -> np.ndarray:
    """Select the ego velocity for one decision given predicted exo velocities."""
    v_target = ego_target_velocity(ego, path, cfg.v_max)
    direction = v_target if np.any(v_target) else ego.velocity
    if not np.any(direction):
        direction = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    cands = heading_candidates(cfg.v_max, direction, cfg.candidate_count, v_target)
    v_self = ego.velocity
    cones = []
    for exo, v in zip(exo_states, exo_velocities):
        p_rel = np.array([exo.x - ego.x, exo.y - ego.y])
        cones.append(obstacle_for(p_rel, ego.radius + exo.radius, v_self, v, cfg.time_horizon, exo.agent_id))
    return select_velocity(cands, cones, v_target)


def accel_command(v_new, ego_speed: float, decision_dt: float, limit: float = ACCEL_LIMIT) -> float:
    a = (float(np.hypot(*v_new)) - ego_speed) / decision_dt
    return min(max(a, -limit), limit)


class RvoPlanner:
    """Speed control from the RVO-selected velocity; steering is left to pure pursuit."""
    name = "rvo"

    def __init__(self, cfg: RvoPlanConfig | None = None):
        self.cfg = cfg or RvoPlanConfig()
        self.previous_velocity: np.ndarray | None = None

    def reset(self, scenario=None, seed: int = 0) -> None:
        self.previous_velocity = None

    def decide(self, obs, budget):
        """Return (accel, fallback). Charges one predictor call per exo agent."""
        ego = obs.ego
        if self.previous_velocity is None:
            self.previous_velocity = ego.velocity
        n = len(obs.exo)
        if n and not budget.charge(obs.latency * n, calls=n):
            return accel_command(self.previous_velocity, ego.speed, obs.decision_dt), True
        velocities = [predicted_velocity(obs.predictions[a.agent_id], a, obs.dt_frame) for a in obs.exo]
        v_new = plan_velocity(ego, obs.ego_path, obs.exo, velocities, self.cfg)
        self.previous_velocity = v_new
        return accel_command(v_new, ego.speed, obs.decision_dt), False


def predicted_velocity(prediction, agent: AgentState, dt_frame: float) -> np.ndarray:
    """First predicted displacement of the top mode divided by the frame spacing."""
    if prediction is None:
        return agent.velocity
    return (prediction.best[0] - np.array([agent.x, agent.y])) / dt_frame
