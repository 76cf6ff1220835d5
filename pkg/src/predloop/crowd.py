"""Reactive exo-agent crowd: RVO path followers.

Pedestrians and cyclists choose from a polar velocity grid and move holonomically;
vehicles choose a speed along their path tangent and stay on the path. The cone test
is the same as the planner's, vectorised over neighbours and candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import MAX_SPEED, AgentState, ReferencePath, boxes_intersect
from .rvo import polar_candidates

ACCEL = {"pedestrian": 1.5, "cyclist": 2.0, "vehicle": 3.0, "ego": 3.0}
LOOKAHEAD = {"pedestrian": 1.0, "cyclist": 2.0, "vehicle": 3.0, "ego": 3.0}


@dataclass(frozen=True)
class CrowdConfig:
    neighbor_radius: float = 10.0
    # path-constrained vehicles only react to agents within this angle of their heading
    vehicle_view: float = math.radians(60.0)
    time_horizon: float = 2.0
    n_dirs: int = 16
    n_speeds: int = 6
    accel: dict = field(default_factory=lambda: dict(ACCEL))
    # vehicles stop this far (arc length) short of a claimed box and keep this lateral clearance
    yield_gap: float = 0.5
    yield_clearance: float = 0.3
    corridor_step: float = 0.5
    claim_time: float = 1.0
    claim_step: float = 0.5


@dataclass
class ExoAgent:
    """Per-episode record of one exo agent."""
    state: AgentState
    path: ReferencePath
    preferred_speed: float
    s: float = 0.0  # arc-length progress along the path

    @property
    def holonomic(self) -> bool:
        return self.state.kind != "vehicle"


_GRID_CACHE: dict = {}


def _polar_grid(v_max: float, n_dirs: int, n_speeds: int) -> np.ndarray:
    key = (v_max, n_dirs, n_speeds)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = polar_candidates(v_max, n_dirs, n_speeds)[1:]
    return _GRID_CACHE[key]


def preferred_velocity(agent: ExoAgent) -> np.ndarray:
    """Preferred speed towards the path point a kind-dependent distance ahead; zero at the path end."""
    st = agent.state
    if agent.path.length - agent.s < 0.25:
        return np.zeros(2)
    if not agent.holonomic:
        h = float(agent.path.heading_at(agent.s))
        return agent.preferred_speed * np.array([math.cos(h), math.sin(h)])
    target = agent.path.point_at(min(agent.s + LOOKAHEAD[st.kind], agent.path.length))
    d = target - st.position
    n = float(np.hypot(*d))
    if n < 1e-9:
        return np.zeros(2)
    return min(agent.preferred_speed, n / 0.5) * d / n


def candidate_velocities(agent: ExoAgent, v_pref: np.ndarray, cfg: CrowdConfig) -> np.ndarray:
    """``v_pref`` and zero first, then the kind's grid.

    The holonomic grid is laid out relative to the preferred direction, so agents that meet
    head-on resolve ties to the same side of their own heading and pass each other.
    """
    v_max = MAX_SPEED[agent.state.kind]
    if agent.holonomic:
        h = math.atan2(v_pref[1], v_pref[0]) if np.any(v_pref) else agent.state.heading
        c, s = math.cos(h), math.sin(h)
        grid = _polar_grid(v_max, cfg.n_dirs, cfg.n_speeds) @ np.array([[c, s], [-s, c]])
    else:
        h = float(agent.path.heading_at(agent.s))
        speeds = v_max * np.arange(1, 4 * cfg.n_speeds + 1) / (4 * cfg.n_speeds)
        grid = speeds[:, None] * np.array([math.cos(h), math.sin(h)])
    return np.vstack([v_pref, np.zeros((1, 2)), grid])


def rvo_blocked(cands: np.ndarray, p_rel: np.ndarray, radius: np.ndarray, v_self: np.ndarray,
                v_other: np.ndarray, reciprocal: np.ndarray, time_horizon: float,
                overlap_blocks_all: bool = True) -> np.ndarray:
    """(m,) mask of candidates inside any neighbour's (reciprocal) velocity obstacle.

    Velocities are mapped back into each VO (v -> 2v - v_self for reciprocal cones).
    For already-overlapping pairs every velocity is blocked, or with
    ``overlap_blocks_all=False`` only velocities that close the gap.
    """
    if len(p_rel) == 0:
        return np.zeros(len(cands), dtype=bool)
    mapped = np.where(reciprocal[:, None, None], 2.0 * cands[None] - v_self, cands[None])  # (k, m, 2)
    rel = mapped - v_other[:, None, :]
    b = np.einsum("kmj,kj->km", rel, p_rel)
    a = np.einsum("kmj,kmj->km", rel, rel)
    c = (np.einsum("kj,kj->k", p_rel, p_rel) - radius ** 2)[:, None]
    disc = b * b - a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = c / (b + np.sqrt(np.maximum(disc, 0.0)))
    inside = (b > 0) & (disc >= 0) & (t_hit <= time_horizon)
    overlap = c[:, 0] < 0
    if overlap.any():
        if overlap_blocks_all:
            inside[overlap] = True
        else:
            apex = np.where(reciprocal[:, None], 0.5 * (v_other + v_self), v_other)
            closing = np.einsum("kmj,kj->km", cands[None] - apex[:, None, :], p_rel) > 0
            inside[overlap] = closing[overlap]
    return inside.any(axis=0)


def choose_velocity(agent: ExoAgent, others_pos: np.ndarray, others_vel: np.ndarray,
                    others_radius: np.ndarray, others_recip: np.ndarray, cfg: CrowdConfig) -> np.ndarray:
    """RVO-feasible velocity closest to the preferred one; zero when nothing is feasible."""
    st = agent.state
    v_pref = preferred_velocity(agent)
    p_rel = others_pos - st.position
    dist = np.hypot(p_rel[:, 0], p_rel[:, 1])
    keep = dist <= cfg.neighbor_radius
    if not agent.holonomic:
        fwd = np.array([math.cos(st.heading), math.sin(st.heading)])
        keep &= (p_rel @ fwd >= math.cos(cfg.vehicle_view) * dist) | (dist == 0)
    cands = candidate_velocities(agent, v_pref, cfg)
    args = (p_rel[keep], st.radius + others_radius[keep], st.velocity, others_vel[keep], others_recip[keep],
            cfg.time_horizon)
    free = ~rvo_blocked(cands, *args)
    if not free.any():
        # overlapping pairs block everything; separating velocities are still acceptable
        free = ~rvo_blocked(cands, *args, overlap_blocks_all=False)
        if not free.any():
            return np.zeros(2)
    d = np.where(free, np.hypot(*(cands - v_pref).T), np.inf)
    return cands[int(np.argmin(d))]


def advance(agent: ExoAgent, v_sel: np.ndarray, dt: float, cfg: CrowdConfig) -> ExoAgent:
    """Acceleration-limited move toward ``v_sel``."""
    st = agent.state
    a_max = cfg.accel[st.kind] * dt
    if agent.holonomic:
        dv = v_sel - st.velocity
        n = float(np.hypot(*dv))
        v_new = st.velocity + (dv * (a_max / n) if n > a_max else dv)
        speed = float(np.hypot(*v_new))
        heading = math.atan2(v_new[1], v_new[0]) if speed > 1e-9 else st.heading
        new = st.with_pose(st.x + v_new[0] * dt, st.y + v_new[1] * dt, heading, speed)
        s_new = agent.path.local_arc_length((new.x, new.y), agent.s)
        return ExoAgent(new, agent.path, agent.preferred_speed, s_new)
    target = float(np.hypot(*v_sel))
    speed = min(max(target, st.speed - a_max), st.speed + a_max)
    s_new = min(agent.s + speed * dt, agent.path.length)
    if s_new >= agent.path.length:
        speed = 0.0
    x, y = agent.path.point_at(s_new)
    new = st.with_pose(float(x), float(y), float(agent.path.heading_at(s_new)), speed)
    return ExoAgent(new, agent.path, agent.preferred_speed, s_new)


def yield_speed(agent: ExoAgent, claims: np.ndarray, cfg: CrowdConfig) -> float:
    """Largest speed from which a path-bound vehicle can still stop short of every claimed box.

    ``claims`` rows are (x, y, heading, half_length, half_width). The vehicle's box is swept
    along its own path; claims it already overlaps are ignored so it can drive clear of them.
    """
    st = agent.state
    if len(claims) == 0:
        return math.inf
    a_max = cfg.accel[st.kind]
    v_top = max(st.speed, agent.preferred_speed)
    reach = v_top * cfg.time_horizon + v_top ** 2 / (2 * a_max) + cfg.yield_gap + 2.0
    ds = np.arange(0.0, reach + cfg.corridor_step, cfg.corridor_step)
    s = np.minimum(agent.s + ds, agent.path.length)
    xy = agent.path.point_at(s)
    h = agent.path.heading_at(s)
    hit = boxes_intersect(xy[:, None, 0], xy[:, None, 1], h[:, None], st.length / 2,
                          st.width / 2 + cfg.yield_clearance, *claims.T)
    live = ~hit[0]
    conflict = hit[:, live].any(axis=1)
    if not conflict.any():
        return math.inf
    room = float(ds[int(np.argmax(conflict))]) - cfg.yield_gap
    return math.sqrt(2.0 * a_max * room) if room > 0 else 0.0


def _vehicle_claims(agent: ExoAgent, cfg: CrowdConfig) -> np.ndarray:
    """Current box of a vehicle plus where it would be over the next ``claim_time`` seconds."""
    st = agent.state
    ds = st.speed * np.arange(0.0, cfg.claim_time + 1e-9, cfg.claim_step)
    if st.speed <= 0:
        ds = ds[:1]
    s = np.minimum(agent.s + ds, agent.path.length)
    xy = agent.path.point_at(s)
    h = agent.path.heading_at(s)
    return np.column_stack([xy, h, np.full(len(s), st.length / 2), np.full(len(s), st.width / 2)])


def crowd_step(agents: list[ExoAgent], extra: list[tuple[AgentState, np.ndarray]], dt: float,
               cfg: CrowdConfig | None = None, claims: list[AgentState] = ()) -> list[ExoAgent]:
    """Synchronous update of every agent against the others' current states plus obstacles.

    Pedestrians and cyclists run reciprocal RVO against everyone, ``extra`` obstacles being
    moving non-reciprocal agents and ``claims`` static poses the ego may occupy.
    Vehicles run RVO against pedestrians and cyclists only; towards the ego claims and other
    vehicles they yield so that their path corridor stays clear. A vehicle also respects the
    short-term path of every vehicle listed before it, which settles who goes first.
    """
    cfg = cfg or CrowdConfig()
    claims = list(claims)
    states = [a.state for a in agents] + [e for e, _ in extra] + claims
    pos = np.array([[s.x, s.y] for s in states]).reshape(-1, 2)
    vel = np.array([a.state.velocity for a in agents] + [np.asarray(v, dtype=float) for _, v in extra]
                   + [np.zeros(2)] * len(claims)).reshape(-1, 2)
    rad = np.array([s.radius for s in states])
    recip = np.array([True] * len(agents) + [False] * (len(extra) + len(claims)), dtype=bool)
    n = len(agents)
    vehicle = np.array([not a.holonomic for a in agents] + [False] * (len(extra) + len(claims)), dtype=bool)
    is_claim = np.arange(len(states)) >= n + len(extra)
    ego_boxes = np.array([[c.x, c.y, c.heading, c.length / 2, c.width / 2] for c in claims]).reshape(-1, 5)
    paths = {i: _vehicle_claims(a, cfg) for i, a in enumerate(agents) if not a.holonomic}
    idx = np.arange(len(states))
    out = []
    for i, agent in enumerate(agents):
        m = idx != i
        if agent.holonomic:
            v = choose_velocity(agent, pos[m], vel[m], rad[m], recip[m], cfg)
        else:
            m &= ~is_claim & ~vehicle
            v = choose_velocity(agent, pos[m], vel[m], rad[m], recip[m], cfg)
            boxes = [ego_boxes] + [b if j < i else b[:1] for j, b in paths.items() if j != i]
            cap = yield_speed(agent, np.vstack(boxes), cfg)
            speed = float(np.hypot(*v))
            if speed > cap:
                v = v * (cap / speed)
        out.append(advance(agent, v, dt, cfg))
    return out


def step_exo_agents(agents: list[ExoAgent], ego: AgentState | None, dt: float,
                    cfg: CrowdConfig | None = None) -> list[ExoAgent]:
    """One crowd tick with the ego as a non-reciprocating obstacle."""
    extra = [] if ego is None else [(ego, ego.velocity)]
    return crowd_step(agents, extra, dt, cfg)
