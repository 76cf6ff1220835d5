"""Poses, footprints, buffered box collision, bicycle kinematics and path tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

DEFAULT_DT = 0.03
DEFAULT_WHEELBASE = 2.8
DEFAULT_MAX_STEER = 0.6
DEFAULT_LOOKAHEAD = 3.0
DEFAULT_COLLISION_BUFFER = 0.3

KINDS = ("ego", "vehicle", "cyclist", "pedestrian")

# (length, width) per kind; logs carry only the kind, so footprints are fixed by it.
FOOTPRINTS = {
    "ego": (4.0, 1.8),
    "vehicle": (4.5, 1.9),
    "cyclist": (1.8, 0.6),
    "pedestrian": (0.6, 0.6),
}

MAX_SPEED = {
    "ego": 6.0,
    "vehicle": 8.0,
    "cyclist": 5.0,
    "pedestrian": 2.5,
}


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(theta, TWO_PI)
    wrapped = np.where(wrapped > math.pi, wrapped - TWO_PI, wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class AgentState:
    pose: Pose2D
    speed: float
    length: float
    width: float
    agent_id: int
    kind: str = "vehicle"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("footprint dimensions must be strictly positive")
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed} for agent {self.agent_id}")

    @classmethod
    def make(cls, agent_id: int, kind: str, x: float, y: float, heading: float,
             speed: float = 0.0) -> "AgentState":
        length, width = FOOTPRINTS[kind]
        return cls(Pose2D(x, y, heading), speed, length, width, agent_id, kind)

    @property
    def x(self) -> float:
        return self.pose.x

    @property
    def y(self) -> float:
        return self.pose.y

    @property
    def heading(self) -> float:
        return self.pose.heading

    @property
    def position(self) -> np.ndarray:
        return np.array([self.pose.x, self.pose.y])

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.pose.heading), math.sin(self.pose.heading)])

    @property
    def radius(self) -> float:
        """Half diagonal of the footprint (disc approximation)."""
        return 0.5 * math.hypot(self.length, self.width)

    def box(self, buffer: float = 0.0) -> "OrientedBox":
        return OrientedBox(self.pose.x, self.pose.y, self.pose.heading,
                           0.5 * self.length + buffer, 0.5 * self.width)

    def with_pose(self, x: float, y: float, heading: float, speed: float) -> "AgentState":
        return replace(self, pose=Pose2D(x, y, heading), speed=speed)


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    heading: float
    half_length: float
    half_width: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([c, s]), np.array([-s, c])

    def corners(self) -> np.ndarray:
        """Corners as a (4, 2) array in counter-clockwise order."""
        return obb_corners_with_buffer(self, 0.0)


def obb_corners_with_buffer(box: OrientedBox, buffer: float) -> np.ndarray:
    """Corners of ``box`` with its half length grown by ``buffer`` (width untouched)."""
    if buffer < 0:
        raise ValueError("buffer must be non-negative")
    hl = box.half_length + buffer
    hw = box.half_width
    c, s = math.cos(box.heading), math.sin(box.heading)
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def _sat_margins(a: OrientedBox, b: OrientedBox) -> list[float]:
    d = np.array([b.cx - a.cx, b.cy - a.cy])
    ax_a, ay_a = a.axes()
    ax_b, ay_b = b.axes()
    margins = []
    for u in (ax_a, ay_a, ax_b, ay_b):
        ra = a.half_length * abs(float(ax_a @ u)) + a.half_width * abs(float(ay_a @ u))
        rb = b.half_length * abs(float(ax_b @ u)) + b.half_width * abs(float(ay_b @ u))
        margins.append(ra + rb - abs(float(d @ u)))
    return margins


def obb_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test over the four face normals; touching counts as overlap."""
    return all(m >= 0.0 for m in _sat_margins(a, b))


def obb_margin(a: OrientedBox, b: OrientedBox) -> float:
    """Smallest SAT overlap margin: positive when overlapping, negative when separated.

    Its magnitude bounds how far the pair is from tangency along the deciding axis.
    """
    return min(_sat_margins(a, b))


def boxes_intersect(ax, ay, ah, ahl, ahw, bx, by, bh, bhl, bhw) -> np.ndarray:
    """Broadcasting SAT test over arrays of boxes (same semantics as obb_intersect)."""
    dx = np.asarray(bx) - ax
    dy = np.asarray(by) - ay
    ca, sa = np.cos(ah), np.sin(ah)
    cb, sb = np.cos(bh), np.sin(bh)
    # |axis_a . axis_b| terms shared across the four projections
    cc = np.abs(ca * cb + sa * sb)
    cs = np.abs(ca * sb - sa * cb)
    overlap = np.ones(np.broadcast(dx, dy, ahl, bhl).shape, dtype=bool)
    # a's axes
    overlap &= np.abs(dx * ca + dy * sa) <= ahl + bhl * cc + bhw * cs
    overlap &= np.abs(-dx * sa + dy * ca) <= ahw + bhl * cs + bhw * cc
    # b's axes
    overlap &= np.abs(dx * cb + dy * sb) <= bhl + ahl * cc + ahw * cs
    overlap &= np.abs(-dx * sb + dy * cb) <= bhw + ahl * cs + ahw * cc
    return overlap


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.hypot(*(a + t * ab - p)))


def box_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Euclidean distance between two boxes (0 when they overlap)."""
    if obb_intersect(a, b):
        return 0.0
    ca, cb = a.corners(), b.corners()
    best = math.inf
    for poly_p, poly_e in ((ca, cb), (cb, ca)):
        for p in poly_p:
            for i in range(4):
                best = min(best, _point_segment_distance(p, poly_e[i], poly_e[(i + 1) % 4]))
    return best


# ---------------------------------------------------------------------------
# kinematics


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite input {v!r}")


def bicycle_step(state: AgentState, accel: float, steer: float, dt: float = DEFAULT_DT,
                 wheelbase: float = DEFAULT_WHEELBASE, max_steer: float = DEFAULT_MAX_STEER,
                 v_max: float | None = None) -> AgentState:
    """One forward-Euler step of the kinematic bicycle model."""
    _check_finite(state.x, state.y, state.heading, state.speed, accel, steer, dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(steer) > max_steer:
        raise ValueError(f"steer {steer} exceeds max steering {max_steer}")
    v_max = MAX_SPEED[state.kind] if v_max is None else v_max
    v, th = state.speed, state.heading
    x = state.x + v * math.cos(th) * dt
    y = state.y + v * math.sin(th) * dt
    th_new = th + (v / wheelbase) * math.tan(steer) * dt
    v_new = min(max(v + accel * dt, 0.0), v_max)
    return state.with_pose(x, y, th_new, v_new)


def point_mass_step(state: AgentState, velocity: Sequence[float], dt: float) -> AgentState:
    """Holonomic step used for pedestrians and cyclists."""
    vx, vy = float(velocity[0]), float(velocity[1])
    speed = math.hypot(vx, vy)
    heading = math.atan2(vy, vx) if speed > 1e-9 else state.heading
    return state.with_pose(state.x + vx * dt, state.y + vy * dt, heading, speed)


# ---------------------------------------------------------------------------
# reference paths


class PathQuery(NamedTuple):
    arc_length: float
    lateral_offset: float
    nearest_index: int


@dataclass(frozen=True, eq=False)
class ReferencePath:
    waypoints: np.ndarray
    arc: np.ndarray = field(repr=False)
    name: str = ""

    @classmethod
    def from_points(cls, points, name: str = "", spacing: float = 0.5) -> "ReferencePath":
        """Resample a polyline so consecutive waypoints are at most ``spacing`` apart."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ValueError("path needs at least one (x, y) point")
        out = [pts[0]]
        for a, b in zip(pts[:-1], pts[1:]):
            seg = float(np.hypot(*(b - a)))
            n = max(1, int(math.ceil(seg / spacing - 1e-12)))
            for k in range(1, n + 1):
                out.append(a + (b - a) * (k / n))
        wp = np.array(out)
        steps = np.hypot(*np.diff(wp, axis=0).T) if len(wp) > 1 else np.zeros(0)
        arc = np.concatenate([[0.0], np.cumsum(steps)])
        wp.setflags(write=False)
        arc.setflags(write=False)
        return cls(wp, arc, name)

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def point_at(self, s):
        """Point(s) at arc length ``s`` (clamped to the path ends)."""
        s_arr = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        x = np.interp(s_arr, self.arc, self.waypoints[:, 0])
        y = np.interp(s_arr, self.arc, self.waypoints[:, 1])
        return np.stack([x, y], axis=-1)

    def heading_at(self, s):
        if len(self.waypoints) < 2:
            return np.zeros_like(np.asarray(s, dtype=float))
        seg = np.clip(np.searchsorted(self.arc, np.asarray(s, dtype=float), side="right") - 1,
                      0, len(self.waypoints) - 2)
        d = self.waypoints[seg + 1] - self.waypoints[seg]
        return np.arctan2(d[..., 1], d[..., 0])

    def query(self, point) -> PathQuery:
        return path_query(self, point)

    def local_arc_length(self, point, s_hint: float, back: float = 2.0, ahead: float = 4.0) -> float:
        """Arc length of the closest point within [s_hint - back, s_hint + ahead]."""
        lo = max(int(np.searchsorted(self.arc, s_hint - back)) - 1, 0)
        hi = min(int(np.searchsorted(self.arc, s_hint + ahead)) + 1, len(self.arc) - 1)
        if hi <= lo:
            return float(self.arc[lo])
        a = self.waypoints[lo:hi]
        d = self.waypoints[lo + 1:hi + 1] - a
        dd = np.einsum("ij,ij->i", d, d)
        rel = np.asarray(point, dtype=float) - a
        t = np.clip(np.einsum("ij,ij->i", rel, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
        diff = rel - t[:, None] * d
        i = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        return float(self.arc[lo + i] + t[i] * (self.arc[lo + i + 1] - self.arc[lo + i]))

    def project(self, points: np.ndarray) -> np.ndarray:
        """Arc length of the closest path point for each row of ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        wp = self.waypoints
        if len(wp) == 1:
            return np.zeros(len(pts))
        a = wp[:-1]
        d = wp[1:] - a
        dd = np.einsum("ij,ij->i", d, d)
        rel = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("kij,ij->ki", rel, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
        diff = rel - t[..., None] * d[None]
        dist2 = np.einsum("kij,kij->ki", diff, diff)
        i = np.argmin(dist2, axis=1)
        seg_len = self.arc[1:] - self.arc[:-1]
        return self.arc[i] + t[np.arange(len(pts)), i] * seg_len[i]


def path_query(path: ReferencePath, point) -> PathQuery:
    """Closest point on ``path``: arc length, signed lateral offset (left +), nearest waypoint.

    Ties go to the smaller arc length.
    """
    p = np.asarray(point, dtype=float)
    wp = path.waypoints
    d_wp = np.hypot(wp[:, 0] - p[0], wp[:, 1] - p[1])
    nearest = int(np.argmin(d_wp))
    if len(wp) == 1:
        return PathQuery(0.0, 0.0, 0)
    a = wp[:-1]
    d = wp[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    rel = p - a
    t = np.clip(np.einsum("ij,ij->i", rel, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
    proj = a + t[:, None] * d
    dist2 = np.einsum("ij,ij->i", p - proj, p - proj)
    i = int(np.argmin(dist2))
    s = float(path.arc[i] + t[i] * (path.arc[i + 1] - path.arc[i]))
    off = p - proj[i]
    cross = d[i, 0] * off[1] - d[i, 1] * off[0]
    lateral = math.copysign(math.sqrt(dist2[i]), cross) if cross != 0 else 0.0
    return PathQuery(s, lateral, nearest)


def steer_toward(pose: Pose2D, target, wheelbase: float = DEFAULT_WHEELBASE,
                 max_steer: float = DEFAULT_MAX_STEER) -> float:
    """Pure-pursuit steering angle that arcs from ``pose`` through ``target``.

    Positive steer turns left (counter-clockwise), matching bicycle_step.
    """
    dx = float(target[0]) - pose.x
    dy = float(target[1]) - pose.y
    ld = math.hypot(dx, dy)
    if ld == 0.0:
        return 0.0
    alpha = normalize_angle(math.atan2(dy, dx) - pose.heading)
    steer = math.atan2(2.0 * wheelbase * math.sin(alpha), ld)
    return min(max(steer, -max_steer), max_steer)


def lookahead_point(path: ReferencePath, point, lookahead: float) -> np.ndarray:
    s0 = path_query(path, point).arc_length
    if s0 + lookahead >= path.length:
        return path.waypoints[-1]
    return path.point_at(s0 + lookahead)


def pure_pursuit_steer(state: AgentState, path: ReferencePath,
                       lookahead: float = DEFAULT_LOOKAHEAD,
                       wheelbase: float = DEFAULT_WHEELBASE,
                       max_steer: float = DEFAULT_MAX_STEER) -> float:
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    target = lookahead_point(path, (state.x, state.y), lookahead)
    return steer_toward(state.pose, target, wheelbase, max_steer)
