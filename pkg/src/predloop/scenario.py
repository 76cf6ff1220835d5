"""Procedural path networks and seeded scenario generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AgentState, FOOTPRINTS, ReferencePath, boxes_intersect

TEMPLATES = ("straight", "intersection", "roundabout", "mixed")
LANE = 2.5       # lane centre offset from the road axis
WALK = 7.0       # sidewalk offset
GOAL_DISTANCE = 50.0
EGO_PATH_EXTRA = 10.0
MAX_ATTEMPTS = 1000

KIND_WEIGHTS = {"pedestrian": 0.45, "cyclist": 0.2, "vehicle": 0.35}
PREFERRED_SPEED = {"pedestrian": (1.0, 1.6), "cyclist": (2.5, 4.0), "vehicle": (3.0, 5.5)}
USES = {"pedestrian": "walk", "cyclist": "lane", "vehicle": "lane"}


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class MapPath:
    name: str
    use: str  # "lane" or "walk"
    path: ReferencePath
    # arc-length window in which agents may be spawned
    spawn: tuple[float, float] = (0.0, math.inf)


@dataclass(frozen=True)
class ExoSpec:
    state: AgentState
    path_name: str
    preferred_speed: float


@dataclass
class Scenario:
    seed: int
    template: str
    n_exo: int
    horizon_ticks: int
    map: dict[str, MapPath]
    ego_path: ReferencePath
    ego_start: AgentState
    exo: list[ExoSpec] = field(default_factory=list)
    goal_s: float = GOAL_DISTANCE
    layout: str = ""
    obstacle_at: float | None = None

    def path(self, name: str) -> ReferencePath:
        return self.map[name].path

    def params(self) -> dict:
        doc = {"seed": self.seed, "template": self.template, "n_exo": self.n_exo,
               "horizon_ticks": self.horizon_ticks, "ego_speed": self.ego_start.speed}
        if self.obstacle_at is not None:
            doc["obstacle_at"] = self.obstacle_at
        return doc

    def fingerprint(self) -> str:
        """Canonical text of every generated quantity (used for determinism checks)."""
        doc = dict(self.params(), layout=self.layout, goal_s=self.goal_s,
                   ego=_state_doc(self.ego_start),
                   ego_path=[[repr(float(v)) for v in p] for p in self.ego_path.waypoints],
                   exo=[dict(_state_doc(e.state), path=e.path_name, pref=repr(e.preferred_speed))
                        for e in self.exo])
        return json.dumps(doc, sort_keys=True)


def _state_doc(s: AgentState) -> dict:
    return {"id": s.agent_id, "kind": s.kind, "x": repr(s.x), "y": repr(s.y),
            "heading": repr(s.heading), "speed": repr(s.speed)}


# ---------------------------------------------------------------------------
# path networks


def _line(a, b):
    return [tuple(a), tuple(b)]


def _arc(center, radius, a0, a1, step=0.1):
    n = max(2, int(abs(a1 - a0) / step) + 1)
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a))
            for a in np.linspace(a0, a1, n)]


def _quad(p0, p1, p2, n=24):
    p0, p1, p2 = map(np.asarray, (p0, p1, p2))
    t = np.linspace(0, 1, n)[:, None]
    return [tuple(p) for p in (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2]


def _both_ways(name, use, pts, spawn=(0.0, math.inf)):
    fwd = ReferencePath.from_points(pts, name)
    rev = ReferencePath.from_points(pts[::-1], name + "~r")
    return [MapPath(name, use, fwd, spawn), MapPath(name + "~r", use, rev, spawn)]


def straight_map() -> tuple[dict[str, MapPath], ReferencePath, str]:
    paths = [
        MapPath("lane_e", "lane", ReferencePath.from_points(_line((-30, -LANE), (110, -LANE)), "lane_e"),
                (0.0, 20.0)),
        MapPath("lane_w", "lane", ReferencePath.from_points(_line((110, LANE), (-30, LANE)), "lane_w"),
                (20.0, 110.0)),
    ]
    paths += _both_ways("walk_s", "walk", _line((-10, -WALK), (80, -WALK)), (10.0, 80.0))
    paths += _both_ways("walk_n", "walk", _line((-10, WALK), (80, WALK)), (10.0, 80.0))
    for x in range(8, 61, 4):
        paths += _both_ways(f"cross_{x}", "walk", _line((x, -WALK), (x, WALK)))
    ego = ReferencePath.from_points(_line((0, -LANE), (GOAL_DISTANCE + EGO_PATH_EXTRA, -LANE)), "ego")
    return {p.name: p for p in paths}, ego, "straight"


def intersection_map(turn: str) -> tuple[dict[str, MapPath], ReferencePath, str]:
    L = 60.0
    paths = [
        MapPath("lane_e", "lane", ReferencePath.from_points(_line((-L, -LANE), (L, -LANE)), "lane_e"),
                (0.0, 20.0)),
        MapPath("lane_w", "lane", ReferencePath.from_points(_line((L, LANE), (-L, LANE)), "lane_w"),
                (10.0, 70.0)),
        MapPath("lane_n", "lane", ReferencePath.from_points(_line((LANE, -L), (LANE, L)), "lane_n"),
                (20.0, 70.0)),
        MapPath("lane_s", "lane", ReferencePath.from_points(_line((-LANE, L), (-LANE, -L)), "lane_s"),
                (20.0, 70.0)),
    ]
    for c in (-10, 10):
        paths += _both_ways(f"cross_x{c}", "walk", _line((c, -WALK), (c, WALK)))
        paths += _both_ways(f"cross_y{c}", "walk", _line((-WALK, c), (WALK, c)))
    paths += _both_ways("walk_sw", "walk", _line((-40, -WALK), (-WALK, -WALK)))
    paths += _both_ways("walk_se", "walk", _line((WALK, -WALK), (40, -WALK)))
    start = (-30.0, -LANE)
    if turn == "left":
        pts = [start, (-LANE - 5, -LANE)] + _quad((-LANE - 5, -LANE), (LANE, -LANE), (LANE, LANE + 5))[1:] \
            + [(LANE, 40.0)]
    elif turn == "right":
        pts = [start, (-LANE - 5, -LANE)] + _quad((-LANE - 5, -LANE), (-LANE, -LANE), (-LANE, -LANE - 5))[1:] \
            + [(-LANE, -45.0)]
    else:
        pts = [start, (35.0, -LANE)]
    ego = ReferencePath.from_points(pts, "ego")
    return {p.name: p for p in paths}, ego, f"intersection-{turn}"


ARM_ANGLES = {"e": 0.0, "n": math.pi / 2, "w": math.pi, "s": -math.pi / 2}


def _roundabout_route(entry: str, exit_: str, radius: float, reach: float = 45.0, laps: int = 0):
    """Inbound lane of one arm, counter-clockwise ring arc, outbound lane of another arm."""
    r_edge = math.sqrt(radius ** 2 - LANE ** 2)
    phi_in, phi_out = ARM_ANGLES[entry], ARM_ANGLES[exit_]
    u_in = np.array([math.cos(phi_in), math.sin(phi_in)])
    right_in = np.array([-u_in[1], u_in[0]])  # right-hand side when driving inward
    u_out = np.array([math.cos(phi_out), math.sin(phi_out)])
    right_out = np.array([u_out[1], -u_out[0]])  # right-hand side when driving outward
    a0 = reach * u_in + LANE * right_in
    a1 = r_edge * u_in + LANE * right_in
    b0 = r_edge * u_out + LANE * right_out
    b1 = reach * u_out + LANE * right_out
    ang_in = math.atan2(a1[1], a1[0])
    ang_out = math.atan2(b0[1], b0[0])
    while ang_out <= ang_in:
        ang_out += 2 * math.pi
    ang_out += 2 * math.pi * laps
    return [tuple(a0)] + _arc((0, 0), radius, ang_in, ang_out) + [tuple(b1)]


def roundabout_map() -> tuple[dict[str, MapPath], ReferencePath, str]:
    R = 14.0
    paths = []
    for entry in ("n", "e", "s"):
        for exit_ in ("n", "e", "s", "w"):
            if exit_ != entry:
                name = f"rb_{entry}{exit_}"
                paths.append(MapPath(name, "lane", ReferencePath.from_points(
                    _roundabout_route(entry, exit_, R), name), (0.0, 25.0)))
    # circulating traffic: starts on the ring, leaves after one more lap
    circ = _roundabout_route("w", "e", R, laps=1)[1:]
    paths.append(MapPath("ring", "lane", ReferencePath.from_points(circ, "ring"), (10.0, 80.0)))
    for name, a, b in (("cross_w", (-25, -WALK), (-25, WALK)), ("cross_e", (25, -WALK), (25, WALK)),
                       ("cross_s", (-WALK, -25), (WALK, -25)), ("cross_n", (-WALK, 25), (WALK, 25))):
        paths += _both_ways(name, "walk", _line(a, b))
    paths += _both_ways("walk_sw", "walk", _line((-40, -WALK), (-20, -WALK)))
    ego = ReferencePath.from_points(_roundabout_route("w", "e", R), "ego")
    return {p.name: p for p in paths}, ego, "roundabout"


# ---------------------------------------------------------------------------


def scenario_rng(seed: int, template: str, n_exo: int) -> np.random.Generator:
    code = TEMPLATES.index(template)
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, code, n_exo]))


def generate_scenario(seed: int, map_template: str = "mixed", n_exo: int = 15,
                      horizon_ticks: int = 1000, ego_speed: float = 3.0,
                      obstacle_at: float | None = None) -> Scenario:
    """Deterministic scenario for (seed, template, n_exo); initial footprints never overlap.

    ``obstacle_at`` adds a parked vehicle on the ego's path at that arc length
    (used for planner sanity checks).
    """
    if map_template not in TEMPLATES:
        raise ValueError(f"unknown map template {map_template!r}")
    if n_exo < 0:
        raise ValueError("n_exo must be non-negative")
    rng = scenario_rng(seed, map_template, n_exo)
    template = map_template
    if template == "mixed":
        template = ("straight", "intersection", "roundabout")[int(rng.integers(3))]
    if template == "straight":
        paths, ego_path, layout = straight_map()
    elif template == "intersection":
        paths, ego_path, layout = intersection_map(("straight", "left", "right")[int(rng.integers(3))])
    else:
        paths, ego_path, layout = roundabout_map()
    if ego_path.length < GOAL_DISTANCE:
        raise AssertionError("ego path shorter than the goal distance")

    h0 = float(ego_path.heading_at(0.0))
    x0, y0 = ego_path.point_at(0.0)
    ego = AgentState.make(0, "ego", float(x0), float(y0), h0, ego_speed)

    placed: list[AgentState] = [ego]
    exo: list[ExoSpec] = []
    if obstacle_at is not None:
        paths = dict(paths, obstacle=MapPath("obstacle", "none", ego_path))
        ox, oy = ego_path.point_at(obstacle_at)
        parked = AgentState.make(n_exo + 1, "vehicle", float(ox), float(oy),
                                 float(ego_path.heading_at(obstacle_at)), 0.0)
        placed.append(parked)
        exo.append(ExoSpec(parked, "obstacle", 0.0))

    kinds = list(KIND_WEIGHTS)
    probs = np.array([KIND_WEIGHTS[k] for k in kinds])
    for i in range(1, n_exo + 1):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        pool = sorted(name for name, mp in paths.items() if mp.use == USES[kind])
        lo, hi = PREFERRED_SPEED[kind]
        pref = float(rng.uniform(lo, hi))
        for _ in range(MAX_ATTEMPTS):
            mp = paths[pool[int(rng.integers(len(pool)))]]
            s_lo, s_hi = mp.spawn[0], min(mp.spawn[1], mp.path.length - 2.0)
            if s_hi <= s_lo:
                continue
            s = float(rng.uniform(s_lo, s_hi))
            x, y = mp.path.point_at(s)
            cand = AgentState.make(i, kind, float(x), float(y), float(mp.path.heading_at(s)), pref)
            if _clear(cand, placed):
                placed.append(cand)
                exo.append(ExoSpec(cand, mp.name, pref))
                break
        else:
            raise PlacementError(f"could not place agent {i} ({kind}) in {MAX_ATTEMPTS} attempts")
    return Scenario(seed, map_template, n_exo, horizon_ticks, paths, ego_path, ego, exo,
                    GOAL_DISTANCE, layout, obstacle_at)


def _clear(cand: AgentState, placed: list[AgentState], margin: float = 0.5) -> bool:
    """No footprint overlap, and disc clearance so no pair starts inside a velocity obstacle."""
    for other in placed:
        gap = math.hypot(cand.x - other.x, cand.y - other.y)
        need = cand.radius + other.radius + margin
        if other.kind == "ego":
            need = max(need, 8.0)
        if gap < need:
            return False
        if boxes_intersect(cand.x, cand.y, cand.heading, cand.length / 2, cand.width / 2,
                           other.x, other.y, other.heading, other.length / 2, other.width / 2):
            return False
    return True


# ---------------------------------------------------------------------------
# scenario files


def write_scenario_file(path: str | Path, seed: int, template: str, n_exo: int, horizon_ticks: int,
                        ego_speed: float = 3.0) -> None:
    doc = {"seed": int(seed), "template": template, "n_exo": int(n_exo),
           "horizon_ticks": int(horizon_ticks), "ego_speed": float(ego_speed)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_scenario_file(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    missing = {"seed", "template", "n_exo", "horizon_ticks"} - set(doc)
    if missing:
        raise ValueError(f"{path}: scenario file lacks {sorted(missing)}")
    return doc


def scenario_from_params(doc: dict) -> Scenario:
    return generate_scenario(int(doc["seed"]), doc["template"], int(doc["n_exo"]),
                             int(doc["horizon_ticks"]), float(doc.get("ego_speed", 3.0)),
                             doc.get("obstacle_at"))


def footprint(kind: str) -> tuple[float, float]:
    return FOOTPRINTS[kind]
