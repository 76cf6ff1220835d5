"""Synchronous closed-loop simulator with virtual-time budgets.

Exo agents commit their motion ``T_p * stride`` ticks ahead. Every tick one committed
state is consumed and one new state is appended by a reactive crowd step that sees
the other agents' frontier states and the stretch of path the ego claims up to then.
The crowd therefore reacts to the ego with a delay, while the committed window is
exactly the ground-truth future a perfect predictor could report.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .crowd import CrowdConfig, ExoAgent, crowd_step
from .episode_log import EpisodeLog
from .geometry import AgentState, bicycle_step, boxes_intersect, pure_pursuit_steer
from .predictors import T_OBS, T_PRED, History, PredictionContext, PredictionSet, Predictor
from .scenario import Scenario, scenario_from_params

EGO_V_MAX = 6.0
NODE_OVERHEAD = 10e-6
OBSTACLE_SPACING = 1.5
MODES = ("fixed_time", "fixed_predictions")


class EpisodeError(RuntimeError):
    """Planner or predictor failure, tagged with the tick at which it happened."""

    def __init__(self, tick: int, cause: BaseException):
        super().__init__(f"tick {tick}: {type(cause).__name__}: {cause}")
        self.tick = tick


@dataclass
class Budget:
    virtual_total: float = math.inf
    prediction_calls_remaining: float = math.inf
    virtual_spent: float = 0.0

    def affordable(self, cost: float, calls: int = 0) -> bool:
        return (self.virtual_spent + cost <= self.virtual_total + 1e-12
                and calls <= self.prediction_calls_remaining)

    def charge(self, cost: float, calls: int = 0) -> bool:
        """Spend ``cost`` seconds and ``calls`` predictor calls; False (and no charge) if unaffordable."""
        if cost < 0 or calls < 0:
            raise ValueError("charges must be non-negative")
        if not self.affordable(cost, calls):
            return False
        self.virtual_spent += cost
        self.prediction_calls_remaining -= calls
        return True

    @property
    def remaining(self) -> float:
        return self.virtual_total - self.virtual_spent


@dataclass(frozen=True)
class TickConfig:
    dt_sim: float = 0.03
    tick_rate: float | None = None  # Hz; None means unconstrained
    mode: str = "fixed_time"
    predictor_stride: int = 3
    prediction_calls: int | None = None  # per-decision call budget in fixed_predictions mode

    def __post_init__(self):
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.predictor_stride < 1:
            raise ValueError("predictor_stride must be >= 1")
        if self.tick_rate is not None and not self.tick_rate > 0:
            raise ValueError("tick_rate must be positive")

    @property
    def dt_frame(self) -> float:
        return self.dt_sim * self.predictor_stride

    @property
    def commit_ticks(self) -> int:
        return T_PRED * self.predictor_stride

    def new_budget(self) -> Budget:
        if self.mode == "fixed_time":
            total = math.inf if self.tick_rate is None else 1.0 / self.tick_rate
            return Budget(virtual_total=total)
        calls = math.inf if self.prediction_calls is None else self.prediction_calls
        return Budget(prediction_calls_remaining=calls)

    def describe(self) -> dict:
        return {"dt_sim": self.dt_sim, "tick_rate": self.tick_rate, "mode": self.mode,
                "predictor_stride": self.predictor_stride, "prediction_calls": self.prediction_calls}


@dataclass
class Observation:
    """What the planner sees at a decision tick."""
    tick: int
    ego: AgentState
    ego_path: object
    ego_s: float
    goal_s: float
    exo: list[AgentState]
    predictions: dict[int, PredictionSet]
    histories: dict[int, History]
    latency: float
    dt_sim: float
    dt_frame: float
    decision_dt: float
    paths: dict = field(default_factory=dict)
    seed: int = 0


def quantize_action(a: float) -> float:
    """Actions are applied at 1e-6 resolution so a logged action replays bit-exactly."""
    return round(float(a), 6) + 0.0


class World:
    def __init__(self, scenario: Scenario, tick_config: TickConfig, crowd_cfg: CrowdConfig | None = None):
        self.scenario = scenario
        self.cfg = tick_config
        self.crowd_cfg = crowd_cfg or CrowdConfig()
        self.tick = 0
        self.ego = scenario.ego_start
        self.ego_s = scenario.ego_path.query((self.ego.x, self.ego.y)).arc_length
        agents = []
        for spec in scenario.exo:
            path = scenario.path(spec.path_name)
            s = path.query((spec.state.x, spec.state.y)).arc_length
            agents.append(ExoAgent(spec.state, path, spec.preferred_speed, s))
        self.exo: list[ExoAgent] = agents
        self.histories: dict[int, deque] = {}
        self._seed_histories()
        dt = tick_config.dt_sim
        self.committed: deque[list[ExoAgent]] = deque()
        frontier = agents
        for k in range(tick_config.commit_ticks):
            frontier = crowd_step(frontier, [], dt, self.crowd_cfg, self._ego_claims(self.ego, k * dt))
            self.committed.append(frontier)
        self.frontier = frontier

    # -- state --------------------------------------------------------------

    def _seed_histories(self) -> None:
        """Back-extrapolate T_o frames along each agent's initial velocity."""
        dtf = self.cfg.dt_frame
        for st in [self.ego] + [a.state for a in self.exo]:
            ring = deque(maxlen=T_OBS)
            for k in range(T_OBS - 1, 0, -1):
                ring.append((st.position - st.velocity * k * dtf, st.heading))
            self.histories[st.agent_id] = ring

    def _ego_claims(self, ego: AgentState, lead: float, s: float | None = None) -> list[AgentState]:
        """Poses the crowd reserves for the ego ``lead`` seconds ahead.

        The ego may stop or keep its speed in the meantime, so the stretch of its path from
        the current position to the constant-speed point is claimed.
        """
        path = self.scenario.ego_path
        s = self.ego_s if s is None else s
        s_hi = s + ego.speed * lead
        n = max(1, int(math.ceil((s_hi - s) / OBSTACLE_SPACING)) + 1)
        out = []
        for s_k in np.linspace(s, s_hi, n):
            x, y = path.point_at(s_k)
            h = float(path.heading_at(min(s_k, path.length)))
            out.append(ego.with_pose(float(x), float(y), h, 0.0))
        return out

    def states(self) -> list[AgentState]:
        return [self.ego] + [a.state for a in self.exo]

    def record_frame(self) -> None:
        for st in self.states():
            self.histories[st.agent_id].append((st.position, st.heading))

    def history(self, agent_id: int) -> History:
        ring = self.histories[agent_id]
        return History(agent_id, np.array([p for p, _ in ring]), np.array([h for _, h in ring]))

    def committed_future(self, index: int) -> np.ndarray:
        """Committed positions of exo number ``index`` at the next T_p prediction frames."""
        stride = self.cfg.predictor_stride
        return np.array([self.committed[stride * k - 1][index].state.position for k in range(1, T_PRED + 1)])

    def collisions(self) -> list[int]:
        if not self.exo:
            return []
        e = self.ego
        ex = np.array([[a.state.x, a.state.y, a.state.heading, a.state.length / 2, a.state.width / 2]
                       for a in self.exo])
        hit = boxes_intersect(e.x, e.y, e.heading, e.length / 2, e.width / 2, *ex.T)
        return [self.exo[i].state.agent_id for i in np.flatnonzero(hit)]

    # -- dynamics -----------------------------------------------------------

    def step(self, accel: float) -> None:
        dt = self.cfg.dt_sim
        path = self.scenario.ego_path
        steer = pure_pursuit_steer(self.ego, path)
        self.ego = bicycle_step(self.ego, accel, steer, dt, v_max=EGO_V_MAX)
        self.ego_s = path.query((self.ego.x, self.ego.y)).arc_length
        self.exo = self.committed.popleft()
        lead = (self.cfg.commit_ticks - 1) * dt
        self.frontier = crowd_step(self.frontier, [], dt, self.crowd_cfg, self._ego_claims(self.ego, lead))
        self.committed.append(self.frontier)
        self.tick += 1

    # -- planner interface ----------------------------------------------------

    def predict_all(self, predictor: Predictor, seed: int) -> dict[int, PredictionSet]:
        out = {}
        positions = {st.agent_id: st.position for st in self.states()}
        for i, agent in enumerate(self.exo):
            aid = agent.state.agent_id
            neighbors = tuple(p for other, p in sorted(positions.items()) if other != aid)
            ctx = PredictionContext(self.history(aid), neighbors, self.committed_future(i), self.tick,
                                    seed, self.cfg.dt_frame)
            out[aid] = predictor.predict(ctx)
        return out

    def observe(self, predictions: dict[int, PredictionSet], latency: float, seed: int) -> Observation:
        return Observation(
            tick=self.tick, ego=self.ego, ego_path=self.scenario.ego_path, ego_s=self.ego_s,
            goal_s=self.scenario.goal_s, exo=[a.state for a in self.exo], predictions=predictions,
            histories={aid: self.history(aid) for aid in self.histories},
            latency=latency, dt_sim=self.cfg.dt_sim, dt_frame=self.cfg.dt_frame,
            decision_dt=self.cfg.dt_frame, paths=self.scenario.map, seed=seed)

    @property
    def at_goal(self) -> bool:
        return self.ego_s >= self.scenario.goal_s


def episode_meta(scenario: Scenario, tick_config: TickConfig, seed: int, planner=None,
                 predictor=None) -> dict:
    meta = {"scenario": scenario.params(), "seed": int(seed), "layout": scenario.layout,
            "goal_s": scenario.goal_s}
    meta.update(tick_config.describe())
    meta["planner"] = getattr(planner, "name", None)
    meta["predictor"] = getattr(predictor, "name", None)
    return meta


def run_episode(scenario: Scenario, planner, predictor: Predictor, tick_config: TickConfig,
                seed: int = 0, crowd_cfg: CrowdConfig | None = None) -> EpisodeLog:
    """Closed-loop episode; planner invoked every ``predictor_stride`` ticks, action latched in between."""
    world = World(scenario, tick_config, crowd_cfg)
    log = EpisodeLog(meta=episode_meta(scenario, tick_config, seed, planner, predictor))
    log.record_states(0, world.states())
    if hasattr(planner, "reset"):
        planner.reset(scenario, seed)
    stride = tick_config.predictor_stride
    accel = 0.0
    for t in range(scenario.horizon_ticks):
        if t % stride == 0:
            try:
                world.record_frame()
                predictions = world.predict_all(predictor, seed)
                for aid, ps in predictions.items():
                    log.record_prediction(t, aid, ps.modes)
                budget = tick_config.new_budget()
                accel, fallback = planner.decide(world.observe(predictions, predictor.latency, seed), budget)
            except EpisodeError:
                raise
            except Exception as exc:
                raise EpisodeError(t, exc) from exc
            accel = quantize_action(accel)
            log.record_decision(t, accel, budget.virtual_spent, fallback)
        world.step(accel)
        log.record_states(t + 1, world.states())
        for aid in world.collisions():
            log.collisions.append((t + 1, aid))
        if world.at_goal:
            break
    return log


def replay(log: EpisodeLog, scenario: Scenario | None = None, crowd_cfg: CrowdConfig | None = None):
    """Re-simulate the logged actions; returns (matches, first_mismatch_tick or None)."""
    meta = log.meta
    if scenario is None:
        scenario = scenario_from_params(meta["scenario"])
    cfg = TickConfig(meta.get("dt_sim", 0.03), meta.get("tick_rate"), meta.get("mode", "fixed_time"),
                     meta.get("predictor_stride", 3), meta.get("prediction_calls"))
    world = World(scenario, cfg, crowd_cfg)
    actions = log.actions()
    probe = EpisodeLog()
    probe.record_states(0, world.states())
    if probe.rows[0] != log.rows.get(0):
        return False, 0
    accel = 0.0
    last = max(log.rows)
    for t in range(last):
        if t in actions:
            accel = actions[t]
        world.step(accel)
        probe.record_states(t + 1, world.states())
        if probe.rows[t + 1] != log.rows.get(t + 1):
            return False, t + 1
    return True, None
