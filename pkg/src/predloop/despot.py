"""Budgeted anytime belief-tree planner in the DESPOT style.

Hidden exo intentions (intended path, follow/stop) are tracked with per-agent particle
beliefs. Each decision samples S scenarios, turns every scenario into exo futures
using the predictor's top mode, and grows a sparse open-loop tree over the three
longitudinal actions, best upper bound first, until the virtual budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .crowd import ACCEL
from .geometry import (DEFAULT_COLLISION_BUFFER, FOOTPRINTS, AgentState, ReferencePath, bicycle_step,
                       pure_pursuit_steer)
from .predictors import History, PredictionContext, Predictor

MAINTAIN, ACCELERATE, DECELERATE = 0.0, 3.0, -3.0
ACTIONS = (MAINTAIN, ACCELERATE, DECELERATE)  # also the tie-break order
ACTION_NAMES = {MAINTAIN: "maintain", ACCELERATE: "accelerate", DECELERATE: "decelerate"}
NODE_OVERHEAD = 10e-6
PATH_TABLE_STEP = 0.02  # m; ego poses in the search are read from a table at this spacing
NOMINAL_SPEED = {"pedestrian": 1.3, "cyclist": 3.25, "vehicle": 4.25, "ego": 4.25}


# ---------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class RewardConfig:
    v_max: float = 6.0
    collision_scale: float = 1000.0
    collision_offset: float = 0.5
    speed_weight: float = 4.0
    decel_penalty: float = -0.1
    lane_change: float = -4.0
    gamma: float = 0.95

    def __post_init__(self):
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


def collision_penalty(v, cfg: RewardConfig = RewardConfig()):
    return -cfg.collision_scale * (np.square(v) + cfg.collision_offset)


def speed_reward(v, cfg: RewardConfig = RewardConfig()):
    return cfg.speed_weight * (np.asarray(v) - cfg.v_max) / cfg.v_max


def reward(v: float, action: float, collided: bool, changed_lane: bool = False,
           cfg: RewardConfig = RewardConfig()) -> float:
    """Sum of the collision, speed, smoothness and lane-change terms that apply."""
    r = float(speed_reward(v, cfg))
    if collided:
        r += float(collision_penalty(v, cfg))
    if action == DECELERATE:
        r += cfg.decel_penalty
    if changed_lane:
        r += cfg.lane_change
    return r


# ---------------------------------------------------------------------------
# belief over hidden intentions


@dataclass(frozen=True)
class HiddenState:
    intended_path: ReferencePath
    intention: str  # "follow" or "stop"

    def __post_init__(self):
        if self.intention not in ("follow", "stop"):
            raise ValueError(f"unknown intention {self.intention!r}")


@dataclass
class Belief:
    agent_id: int
    kind: str
    particles: list[HiddenState]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.particles) < 1 or len(self.weights) != len(self.particles):
            raise ValueError("belief needs N >= 1 particles with one weight each")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    @property
    def n(self) -> int:
        return len(self.particles)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def probability(self, predicate) -> float:
        return float(sum(w for p, w in zip(self.particles, self.weights) if predicate(p)))


def candidate_paths(agent: AgentState, paths, radius: float = 5.0) -> list[ReferencePath]:
    """Map paths within ``radius`` of the agent heading roughly its way, or a straight fallback."""
    out = []
    moving = agent.speed > 0.1
    for name in sorted(paths):
        mp = paths[name]
        path = getattr(mp, "path", mp)
        q = path.query((agent.x, agent.y))
        if abs(q.lateral_offset) > radius or q.arc_length >= path.length - 0.5:
            continue
        if moving:
            dh = math.remainder(float(path.heading_at(q.arc_length)) - agent.heading, 2 * math.pi)
            if abs(dh) > math.pi / 2:
                continue
        out.append(path)
    if not out:
        u = np.array([math.cos(agent.heading), math.sin(agent.heading)])
        p = agent.position
        out.append(ReferencePath.from_points([p - 5 * u, p + 60 * u], f"straight:{agent.agent_id}"))
    return out


def init_belief(agent: AgentState, paths, n_particles: int = 64) -> Belief:
    hyps = [HiddenState(p, t) for p in candidate_paths(agent, paths) for t in ("follow", "stop")]
    particles = [hyps[i % len(hyps)] for i in range(n_particles)]
    return Belief(agent.agent_id, agent.kind, particles, np.full(n_particles, 1.0 / n_particles))


def _path_offset(path: ReferencePath, point) -> tuple[float, np.ndarray]:
    s0 = float(path.project(np.asarray(point, dtype=float)[None])[0])
    return s0, np.asarray(point, dtype=float) - path.point_at(s0)


def expected_position(h: HiddenState, kind: str, prev: np.ndarray, prev_speed: float, dt: float) -> np.ndarray:
    """Where the agent would be one frame after ``prev`` under hypothesis ``h``."""
    s0, off = _path_offset(h.intended_path, prev)
    if h.intention == "follow":
        ds = max(prev_speed, NOMINAL_SPEED[kind]) * dt
    else:
        a = ACCEL[kind]
        t = min(dt, prev_speed / a)
        ds = prev_speed * t - 0.5 * a * t * t
    return h.intended_path.point_at(s0 + ds) + off


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left")


def update_belief(belief: Belief, observed_motion, dt_frame: float = 0.09, sigma_obs: float = 0.3,
                  rng: np.random.Generator | None = None) -> Belief:
    """Bayes update from the last-frame displacement ``(prev_pos, cur_pos, prev_speed)``.

    ``None`` means no observation and returns the belief unchanged.
    """
    if observed_motion is None:
        return belief
    prev, cur, prev_speed = observed_motion
    prev, cur = np.asarray(prev, dtype=float), np.asarray(cur, dtype=float)
    cache: dict[int, float] = {}
    lik = np.empty(belief.n)
    for i, h in enumerate(belief.particles):
        key = id(h)
        if key not in cache:
            err = cur - expected_position(h, belief.kind, prev, prev_speed, dt_frame)
            cache[key] = math.exp(-float(err @ err) / (2 * sigma_obs ** 2))
        lik[i] = cache[key]
    w = belief.weights * lik
    total = w.sum()
    if not total > 0:
        w = np.full(belief.n, 1.0 / belief.n)
    else:
        w = w / total
    out = Belief(belief.agent_id, belief.kind, list(belief.particles), w)
    if out.ess < belief.n / 2:
        idx = systematic_resample(w, rng or np.random.default_rng(0))
        out = Belief(belief.agent_id, belief.kind, [belief.particles[i] for i in idx],
                     np.full(belief.n, 1.0 / belief.n))
    return out


def observed_motion(history: History, dt_frame: float):
    """(previous position, current position, previous speed) from the last three history frames."""
    pos = history.positions
    if len(pos) < 2:
        return None
    prev_speed = float(np.hypot(*(pos[-2] - pos[-3]))) / dt_frame if len(pos) >= 3 else 0.0
    return pos[-2], pos[-1], prev_speed


# ---------------------------------------------------------------------------
# transition (single step, used standalone and as the reference for the search model)


def intended_displacements(h: HiddenState, kind: str, position, speed: float, predicted: np.ndarray | None,
                           n_frames: int, dt_frame: float) -> np.ndarray:
    """(n_frames + 1, 2) positions from ``position`` under hypothesis ``h``.

    Follow: the arc distance the predictor's mode covers, laid along the intended path.
    Stop: decelerate at the kind's limit along the intended path.
    """
    path = h.intended_path
    s0, off = _path_offset(path, position)
    t = dt_frame * np.arange(n_frames + 1)
    if h.intention == "stop" or predicted is None:
        a = ACCEL[kind]
        tc = np.minimum(t, speed / a) if h.intention == "stop" else t
        ds = speed * tc - 0.5 * a * tc ** 2 if h.intention == "stop" else speed * t
    else:
        proj = path.project(predicted) - s0
        if len(proj) < n_frames:
            step = proj[-1] - proj[-2] if len(proj) > 1 else proj[-1]
            proj = np.concatenate([proj, proj[-1] + step * np.arange(1, n_frames - len(proj) + 1)])
        ds = np.concatenate([[0.0], np.maximum.accumulate(np.maximum(proj[:n_frames], 0.0))])
    return path.point_at(s0 + ds) + off


def transition(ego: AgentState, exos: list[tuple[AgentState, History]], hidden: list[HiddenState],
               ego_action: float, predictor: Predictor, noise_sigma: float, rng: np.random.Generator,
               ego_path: ReferencePath, dt_sim: float = 0.03, stride: int = 3, budget=None, tick: int = 0,
               seed: int = 0):
    """One prediction frame forward: ego by bicycle + pure pursuit, exos by hypothesis + noise.

    Charges one predictor latency per exo when a budget is given.
    """
    dt_frame = dt_sim * stride
    e = ego
    for _ in range(stride):
        e = bicycle_step(e, ego_action, pure_pursuit_steer(e, ego_path), dt_sim, v_max=6.0)
    out = []
    for (agent, hist), h in zip(exos, hidden):
        if budget is not None:
            budget.charge(predictor.latency, calls=1)
        predicted = None
        if h.intention == "follow":
            ctx = PredictionContext(hist, (), None, tick, seed, dt_frame)
            predicted = predictor.predict(ctx).best
        traj = intended_displacements(h, agent.kind, agent.position, agent.speed, predicted, 1, dt_frame)
        nxt = traj[1] + (rng.normal(0.0, noise_sigma, 2) if noise_sigma > 0 else 0.0)
        d = nxt - agent.position
        moved = float(np.hypot(*d))
        heading = math.atan2(d[1], d[0]) if moved > 1e-9 else agent.heading
        if h.intention == "stop":
            # end-of-frame speed; the frame average would halve the deceleration
            speed = max(agent.speed - ACCEL[agent.kind] * dt_frame, 0.0)
        else:
            speed = moved / dt_frame
        out.append(agent.with_pose(float(nxt[0]), float(nxt[1]), heading, speed))
    return e, out


# ---------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class DespotConfig:
    scenarios: int = 32
    max_depth: int = 8
    gamma: float = 0.95
    noise_sigma: float = 0.1
    particles: int = 64
    sigma_obs: float = 0.3
    layer_frames: int = 3
    perception_radius: float = 20.0
    max_expansions: int = 48
    epsilon: float = 1e-3
    ttc: float = 1.0
    buffer: float = DEFAULT_COLLISION_BUFFER
    v_max: float = 6.0

    def __post_init__(self):
        if min(self.scenarios, self.max_depth, self.particles, self.layer_frames) < 1:
            raise ValueError("scenario, depth, particle and layer counts must be >= 1")
        if not 0 < self.gamma <= 1 or self.noise_sigma < 0:
            raise ValueError("invalid gamma or noise_sigma")


@dataclass
class SearchProblem:
    """Sampled scenarios for one decision: exo futures per scenario and the ego's path model.

    ``exo_pos`` is (S, n, F + 1, 2) with frame 0 the current state.
    """
    ego_path: ReferencePath
    ego_s: float
    ego_v: float
    exo_pos: np.ndarray
    exo_heading: np.ndarray
    exo_half: np.ndarray   # (n, 2) half length, half width
    exo_radius: np.ndarray  # (n,)
    dt_frame: float = 0.09
    cfg: DespotConfig = field(default_factory=DespotConfig)
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    ego_half: tuple[float, float] = (FOOTPRINTS["ego"][0] / 2, FOOTPRINTS["ego"][1] / 2)

    def __post_init__(self):
        # exos whose sampled futures never come near the reachable stretch of the ego path
        # cannot collide or trigger the default policy, so the geometry skips them
        horizon = self.cfg.max_depth * self.cfg.layer_frames * self.dt_frame + self.cfg.ttc
        reach = min(self.ego_s + self.cfg.v_max * horizon + self.ego_half[0], self.ego_path.length)
        samples = self.ego_path.point_at(np.arange(max(self.ego_s - self.ego_half[0], 0.0), reach + 0.5, 0.5))
        # dense arc-length table of the ego path over everything the search can reach
        end = self.ego_s + self.cfg.v_max * (horizon + self.dt_frame) + 1.0
        self._s0 = self.ego_s - 1.0
        grid = np.arange(self._s0, end + PATH_TABLE_STEP, PATH_TABLE_STEP)
        self._xy = self.ego_path.point_at(grid)
        head = self.ego_path.heading_at(np.minimum(grid, self.ego_path.length))
        self._ca, self._sa = np.cos(head), np.sin(head)
        ego_r = math.hypot(*self.ego_half) + self.cfg.buffer
        keep = []
        for j in range(self.exo_pos.shape[1]):
            pts = self.exo_pos[:, j].reshape(-1, 2)
            d2 = ((pts[:, None, :] - samples[None]) ** 2).sum(-1).min()
            if math.sqrt(d2) < ego_r + self.exo_radius[j] + 0.5:
                keep.append(j)
        idx = np.array(keep, dtype=int)
        self._pos = self.exo_pos[:, idx]
        self._cos = np.cos(self.exo_heading[:, idx])
        self._sin = np.sin(self.exo_heading[:, idx])
        self._hl = self.exo_half[idx, 0, None]
        self._hw = self.exo_half[idx, 1, None]
        self._radius = self.exo_radius[idx]
        # squared centre distance beyond which two boxes cannot touch
        self._contact2 = (math.hypot(self.ego_half[0] + self.cfg.buffer, self.ego_half[1])
                          + np.hypot(self._hl[:, 0], self._hw[:, 0])) ** 2

    @property
    def n_scenarios(self) -> int:
        return self.exo_pos.shape[0]

    @property
    def n_exo(self) -> int:
        """Exos that can interact with the ego during the search."""
        return self._pos.shape[1]

    def _table_index(self, s) -> np.ndarray:
        i = np.rint((np.asarray(s) - self._s0) * (1.0 / PATH_TABLE_STEP)).astype(int)
        return np.clip(i, 0, len(self._xy) - 1)

    def _frames(self, frames) -> np.ndarray:
        return np.minimum(np.asarray(frames), self.exo_pos.shape[2] - 1)

    def collided(self, s: np.ndarray, frames) -> np.ndarray:
        """Buffered-box collision flags.

        ``s`` has shape (B, S, K) or broadcasts to it, holding ego arc positions at the K
        exo frames ``frames``; returns (B, S) flags, true if any frame collides.
        """
        s = np.asarray(s, dtype=float)
        if self.n_exo == 0:
            return np.zeros(s.shape[:-1], dtype=bool)
        f = self._frames(frames)
        i = self._table_index(s)[..., None, :]  # (B, S, 1, K)
        xy = self._xy[i]
        ca, sa = self._ca[i], self._sa[i]
        ex = self._pos[:, :, f]  # (S, n, K, 2)
        cb, sb = self._cos[:, :, f], self._sin[:, :, f]
        ahl, ahw = self.ego_half[0] + self.cfg.buffer, self.ego_half[1]
        bhl, bhw = self._hl, self._hw
        # separating-axis test as in geometry.boxes_intersect, with exo trig cached
        dx = ex[..., 0] - xy[..., 0]
        dy = ex[..., 1] - xy[..., 1]
        near = dx * dx + dy * dy <= self._contact2[:, None]
        if not near.any():
            return np.zeros(near.shape[:2], dtype=bool)
        cc = np.abs(ca * cb + sa * sb)
        cs = np.abs(ca * sb - sa * cb)
        hit = np.abs(dx * ca + dy * sa) <= ahl + bhl * cc + bhw * cs
        hit &= np.abs(-dx * sa + dy * ca) <= ahw + bhl * cs + bhw * cc
        hit &= np.abs(dx * cb + dy * sb) <= bhl + ahl * cc + ahw * cs
        hit &= np.abs(-dx * sb + dy * cb) <= bhw + ahl * cs + ahw * cc
        return (hit & near).any(axis=(-2, -1))

    def step(self, s, v, accel, layer: int):
        """Advance one layer of ``layer_frames`` frames; returns (s, v, collided).

        ``s``, ``v`` and ``accel`` broadcast to (B, S) (or (B, 1) for scenario-independent egos).
        """
        s = np.asarray(s, dtype=float)
        v = np.asarray(v, dtype=float)
        seq = []
        for _ in range(self.cfg.layer_frames):
            s = s + v * self.dt_frame
            v = np.clip(v + accel * self.dt_frame, 0.0, self.cfg.v_max)
            seq.append(s)
        f0 = layer * self.cfg.layer_frames
        hit = self.collided(np.stack(seq, axis=-1), np.arange(f0 + 1, f0 + self.cfg.layer_frames + 1))
        return s, v, np.broadcast_to(hit, np.broadcast(s, hit).shape)

    def layer_reward(self, v, accel, hit) -> np.ndarray:
        shape = np.broadcast(v, hit).shape
        v = np.broadcast_to(v, shape)
        r = speed_reward(v, self.reward_cfg) + np.where(hit, collision_penalty(v, self.reward_cfg), 0.0)
        return r + np.where(np.asarray(accel) == DECELERATE, self.reward_cfg.decel_penalty, 0.0)

    def threatened(self, s, v, frame: int) -> np.ndarray:
        """Whether any exo comes within disc contact inside the time-to-collision window, shape (B, S)."""
        s = np.asarray(s, dtype=float)
        if self.n_exo == 0:
            return np.zeros(s.shape, dtype=bool)
        n_look = max(1, int(math.ceil(self.cfg.ttc / self.dt_frame)))
        k = np.arange(n_look + 1)
        xy = self._xy[self._table_index(s[..., None] + np.asarray(v)[..., None] * k * self.dt_frame)]  # (B,S,K,2)
        ex = self._pos[:, :, self._frames(frame + k)]  # (S, n, K, 2)
        d2 = (ex[..., 0] - xy[..., None, :, 0]) ** 2 + (ex[..., 1] - xy[..., None, :, 1]) ** 2
        ego_r = math.hypot(*self.ego_half) + self.cfg.buffer
        return np.any(d2 < ((ego_r + self._radius) ** 2)[:, None], axis=(-2, -1))

    def rollout(self, s, v, depth: int) -> np.ndarray:
        """Per-scenario discounted return of the reactive default policy from layer ``depth``.

        ``s`` and ``v`` broadcast to (B, S); returns (B, S) (or (S,) for scalar inputs).
        """
        scalar = np.ndim(s) == 0 and np.ndim(v) == 0
        shape = np.broadcast(np.atleast_2d(s), np.atleast_2d(v)).shape
        shape = (shape[0], self.n_scenarios)
        s = np.broadcast_to(np.atleast_2d(np.asarray(s, dtype=float)), shape).copy()
        v = np.broadcast_to(np.atleast_2d(np.asarray(v, dtype=float)), shape).copy()
        total = np.zeros(shape)
        disc = 1.0
        for layer in range(depth, self.cfg.max_depth):
            accel = np.where(self.threatened(s, v, layer * self.cfg.layer_frames), DECELERATE, MAINTAIN)
            s, v, hit = self.step(s, v, accel, layer)
            total += disc * self.layer_reward(v, accel, hit)
            disc *= self.reward_cfg.gamma
        return total[0] if scalar else total

    def upper_bound(self, v: float, depth: int) -> float:
        """Optimistic value: full acceleration, no collision, no penalties."""
        total, disc = 0.0, 1.0
        t_layer = self.cfg.layer_frames * self.dt_frame
        for k in range(1, self.cfg.max_depth - depth + 1):
            total += disc * float(speed_reward(min(v + ACCELERATE * t_layer * k, self.cfg.v_max), self.reward_cfg))
            disc *= self.reward_cfg.gamma
        return total


class _Node:
    __slots__ = ("depth", "s", "v", "lower", "upper", "children")

    def __init__(self, depth, s, v, lower, upper):
        self.depth, self.s, self.v = depth, s, v
        self.lower, self.upper = lower, upper
        self.children: dict[float, tuple[float, "_Node"]] | None = None


@dataclass
class SearchResult:
    action: float
    fallback: bool
    expansions: int
    q_lower: dict
    lower: float
    upper: float


def search(problem: SearchProblem, budget, cost_per_expansion: float, calls_per_expansion: int = 0,
           max_expansions: int | None = None) -> SearchResult:
    """Best-upper-bound-first tree growth until the root gap closes or the budget is spent."""
    cfg = problem.cfg
    gamma = problem.reward_cfg.gamma
    D = cfg.max_depth
    cap = cfg.max_expansions if max_expansions is None else max_expansions

    def bounds(depth, s, v):
        """(lower, upper) for nodes at ``depth`` with ego states s, v of shape (B,)."""
        if depth >= D:
            return np.zeros(len(s)), np.zeros(len(s))
        low = problem.rollout(s[:, None], v[:, None], depth).mean(axis=1)
        return low, np.array([problem.upper_bound(float(x), depth) for x in v])

    root = None
    expansions = 0
    while expansions < cap:
        if root is not None and root.upper - root.lower <= cfg.epsilon:
            break
        if not budget.charge(cost_per_expansion, calls_per_expansion):
            break
        if root is None:
            lo, up = bounds(0, np.array([problem.ego_s]), np.array([problem.ego_v]))
            root = _Node(0, problem.ego_s, problem.ego_v, float(lo[0]), float(up[0]))
        node, trail = root, []
        while node.children is not None and node.depth < D:
            a = max(ACTIONS, key=lambda act: node.children[act][0] + gamma * node.children[act][1].upper)
            trail.append(node)
            node = node.children[a][1]
        if node.depth >= D:
            break
        acts = np.array(ACTIONS)[:, None]
        s1, v1, hit = problem.step(np.full((3, 1), node.s), np.full((3, 1), node.v), acts, node.depth)
        rewards = problem.layer_reward(v1, acts, hit).mean(axis=1)
        lo, up = bounds(node.depth + 1, s1[:, 0], v1[:, 0])
        node.children = {a: (float(rewards[i]), _Node(node.depth + 1, float(s1[i, 0]), float(v1[i, 0]),
                                                       float(lo[i]), float(up[i])))
                         for i, a in enumerate(ACTIONS)}
        expansions += 1
        for n in [node] + trail[::-1]:
            n.lower = max(r + gamma * c.lower for r, c in n.children.values())
            n.upper = max(r + gamma * c.upper for r, c in n.children.values())
    if root is None or root.children is None:
        return SearchResult(MAINTAIN, True, 0, {}, math.nan, math.nan)
    q = {a: r + gamma * c.lower for a, (r, c) in root.children.items()}
    best = max(ACTIONS, key=lambda a: q[a])  # max keeps the first of equal values
    return SearchResult(best, False, expansions, q, root.lower, root.upper)


def build_problem(obs, beliefs: dict[int, Belief], considered: list[AgentState], cfg: DespotConfig,
                  rng: np.random.Generator, reward_cfg: RewardConfig = RewardConfig()) -> SearchProblem:
    """Sample S scenarios and lay out every considered exo's future in each."""
    S = cfg.scenarios
    n_look = int(math.ceil(cfg.ttc / obs.dt_frame))
    F = cfg.max_depth * cfg.layer_frames + n_look
    pos = np.zeros((S, len(considered), F + 1, 2))
    head = np.zeros((S, len(considered), F + 1))
    half = np.zeros((len(considered), 2))
    radius = np.zeros(len(considered))
    frame_sigma = cfg.noise_sigma / math.sqrt(cfg.layer_frames)
    for j, agent in enumerate(considered):
        belief = beliefs[agent.agent_id]
        half[j] = agent.length / 2, agent.width / 2
        radius[j] = agent.radius
        pred = obs.predictions.get(agent.agent_id)
        predicted = None if pred is None else pred.best
        picks = rng.choice(belief.n, size=S, p=belief.weights)
        base: dict[int, np.ndarray] = {}
        for k, i in enumerate(picks):
            h = belief.particles[i]
            if id(h) not in base:
                base[id(h)] = intended_displacements(h, agent.kind, agent.position, agent.speed, predicted, F,
                                                     obs.dt_frame)
            pos[k, j] = base[id(h)]
        if frame_sigma > 0:
            pos[:, j, 1:] += np.cumsum(rng.normal(0.0, frame_sigma, (S, F, 2)), axis=1)
        d = np.diff(pos[:, j], axis=1)
        moving = np.hypot(d[..., 0], d[..., 1]) > 1e-6
        h_step = np.where(moving, np.arctan2(d[..., 1], d[..., 0]), agent.heading)
        head[:, j, 0] = agent.heading
        head[:, j, 1:] = h_step
    return SearchProblem(obs.ego_path, obs.ego_s, obs.ego.speed, pos, head, half, radius, obs.dt_frame, cfg,
                         reward_cfg)


class DespotPlanner:
    name = "despot"

    def __init__(self, cfg: DespotConfig | None = None, reward_cfg: RewardConfig | None = None):
        self.cfg = cfg or DespotConfig()
        self.reward_cfg = reward_cfg or RewardConfig(gamma=self.cfg.gamma)
        self.beliefs: dict[int, Belief] = {}
        self.seed = 0
        self.last_result: SearchResult | None = None

    def reset(self, scenario=None, seed: int = 0) -> None:
        self.beliefs = {}
        self.seed = int(seed)
        self.last_result = None

    def _update_beliefs(self, obs) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, obs.tick, 1]))
        for agent in obs.exo:
            aid = agent.agent_id
            if aid not in self.beliefs:
                self.beliefs[aid] = init_belief(agent, obs.paths, self.cfg.particles)
                continue
            motion = observed_motion(obs.histories[aid], obs.dt_frame)
            self.beliefs[aid] = update_belief(self.beliefs[aid], motion, obs.dt_frame, self.cfg.sigma_obs, rng)

    def decide(self, obs, budget):
        """Return (accel, fallback)."""
        self._update_beliefs(obs)
        ego = obs.ego
        considered = [a for a in obs.exo
                      if math.hypot(a.x - ego.x, a.y - ego.y) <= self.cfg.perception_radius]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, obs.tick, 2]))
        problem = build_problem(obs, self.beliefs, considered, self.cfg, rng, self.reward_cfg)
        # only exos that can reach the ego path are simulated, so only they are charged
        cost = obs.latency * problem.n_exo + NODE_OVERHEAD
        if not budget.affordable(cost, problem.n_exo):
            self.last_result = None
            return MAINTAIN, True
        result = search(problem, budget, cost, problem.n_exo)
        self.last_result = result
        return result.action, result.fallback
