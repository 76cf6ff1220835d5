import json
import math

import numpy as np
import pytest

from predloop.crowd import CrowdConfig, ExoAgent, crowd_step, step_exo_agents, yield_speed
from predloop.episode_log import EpisodeLog
from predloop.geometry import AgentState, ReferencePath, obb_intersect
from predloop.predictors import Predictor, make_predictor
from predloop.rvo import RvoPlanner
from predloop.scenario import (PlacementError, generate_scenario, read_scenario_file, scenario_from_params,
                               write_scenario_file)
from predloop.sim import Budget, EpisodeError, TickConfig, World, quantize_action, replay, run_episode


# -- scenarios ------------------------------------------------------------------

def test_empty_straight_scenario():
    sc = generate_scenario(1, "straight", 0)
    assert sc.exo == [] and sc.ego_path.length >= 50.0


def test_scenario_determinism_and_seed_sensitivity():
    a = generate_scenario(1, "mixed", 10).fingerprint()
    assert a == generate_scenario(1, "mixed", 10).fingerprint()
    assert a != generate_scenario(2, "mixed", 10).fingerprint()


@pytest.mark.parametrize("template", ["straight", "intersection", "roundabout", "mixed"])
def test_initial_states_collision_free(template):
    for seed in range(5):
        sc = generate_scenario(seed, template, 15)
        states = [sc.ego_start] + [e.state for e in sc.exo]
        assert sc.ego_path.length >= 50.0
        for i in range(len(states)):
            for j in range(i + 1, len(states)):
                assert not obb_intersect(states[i].box(), states[j].box())


def test_scenario_errors():
    with pytest.raises(ValueError):
        generate_scenario(0, "highway", 3)
    with pytest.raises(ValueError):
        generate_scenario(0, "straight", -1)
    with pytest.raises(PlacementError):
        generate_scenario(0, "straight", 2000)


def test_scenario_file_round_trip(tmp_path):
    path = tmp_path / "sc.json"
    write_scenario_file(path, 7, "roundabout", 5, 400)
    doc = read_scenario_file(path)
    assert doc["seed"] == 7 and doc["template"] == "roundabout"
    sc = scenario_from_params(doc)
    assert sc.fingerprint() == generate_scenario(7, "roundabout", 5, 400).fingerprint()
    json.loads(path.read_text())


# -- crowd ---------------------------------------------------------------------------

def line(a, b):
    return ReferencePath.from_points([a, b])


def test_single_exo_advances_at_preferred_speed():
    path = line((0, 0), (100, 0))
    agent = ExoAgent(AgentState.make(1, "cyclist", 10.0, 0.0, 0.0, 2.0), path, 2.0, 10.0)
    (nxt,) = step_exo_agents([agent], None, 0.03)
    assert nxt.state.x == pytest.approx(10.0 + 2.0 * 0.03, abs=1e-9)
    assert nxt.state.y == pytest.approx(0.0, abs=1e-9)
    car = ExoAgent(AgentState.make(2, "vehicle", 10.0, 0.0, 0.0, 2.0), path, 2.0, 10.0)
    (nc,) = step_exo_agents([car], None, 0.03)
    assert nc.s == pytest.approx(10.0 + 2.0 * 0.03, abs=1e-9)


def test_head_on_pedestrians_avoid_each_other():
    a = ExoAgent(AgentState.make(1, "pedestrian", 0.0, 0.0, 0.0, 1.3), line((0, 0), (20, 0)), 1.3, 0.0)
    b = ExoAgent(AgentState.make(2, "pedestrian", 20.0, 0.0, math.pi, 1.3), line((20, 0), (0, 0)), 1.3, 0.0)
    agents = [a, b]
    gaps = []
    for _ in range(int(10 / 0.03)):
        agents = crowd_step(agents, [], 0.03)
        p, q = agents[0].state, agents[1].state
        gaps.append(math.hypot(p.x - q.x, p.y - q.y))
        assert not obb_intersect(p.box(), q.box())
    assert min(gaps) > 0.0
    assert abs(agents[0].state.y) > 0 or abs(agents[1].state.y) > 0  # somebody stepped aside
    assert agents[0].state.x > agents[1].state.x + 2.0  # they have passed each other


def test_blocked_vehicle_stops():
    car = ExoAgent(AgentState.make(1, "vehicle", 0.0, 0.0, 0.0, 3.0), line((0, 0), (100, 0)), 3.0, 0.0)
    wall = [(AgentState.make(10 + k, "pedestrian", 8.0, -3.0 + 0.5 * k, 0.0, 0.0), np.zeros(2)) for k in range(13)]
    speeds = []
    agents = [car]
    for _ in range(300):
        agents = crowd_step(agents, wall, 0.03)
        speeds.append(agents[0].state.speed)
    assert speeds[-1] == 0.0
    assert all(b <= a + 1e-12 for a, b in zip(speeds, speeds[1:]))
    assert agents[0].state.x + 2.25 < 8.0 - 0.3


def test_vehicle_yields_to_claimed_box():
    car = ExoAgent(AgentState.make(1, "vehicle", 0.0, 0.0, 0.0, 4.0), line((0, 0), (100, 0)), 4.0, 0.0)
    cfg = CrowdConfig()
    assert yield_speed(car, np.zeros((0, 5)), cfg) == math.inf
    ahead = np.array([[12.0, 0.0, math.pi / 2, 2.0, 0.9]])
    cap = yield_speed(car, ahead, cfg)
    assert 0.0 < cap < math.inf
    # stopping from the cap at the vehicle's deceleration limit ends short of the claim
    assert cap ** 2 / (2 * cfg.accel["vehicle"]) <= 12.0 - 0.9 - 2.25
    beside = np.array([[12.0, 6.0, 0.0, 2.0, 0.9]])
    assert yield_speed(car, beside, cfg) == math.inf


# -- episodes ------------------------------------------------------------------------

def test_empty_road_rvo_reaches_goal():
    sc = generate_scenario(1, "straight", 0)
    log = run_episode(sc, RvoPlanner(), make_predictor("cv"), TickConfig())
    end = log.rows[max(log.rows)][0]
    assert sc.ego_path.query(end[:2]).arc_length >= 50.0
    assert log.collisions == []


def test_episode_determinism_and_replay(tmp_path):
    sc = generate_scenario(4, "straight", 8, horizon_ticks=240)
    tc = TickConfig(tick_rate=30.0)
    a = run_episode(sc, RvoPlanner(), make_predictor("noisy_oracle", sigma=0.3), tc, seed=9)
    b = run_episode(sc, RvoPlanner(), make_predictor("noisy_oracle", sigma=0.3), tc, seed=9)
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()
    back = EpisodeLog.read(tmp_path / "a")
    assert back.rows == a.rows and back.decisions == a.decisions
    assert all(np.array_equal(p.modes, q.modes) for p, q in zip(back.predictions, a.predictions))
    assert replay(back) == (True, None)
    back.rows[100][0] = (back.rows[100][0][0] + 1.0,) + back.rows[100][0][1:]
    assert replay(back) == (False, 100)


def test_log_columns(tmp_path):
    sc = generate_scenario(2, "straight", 2, horizon_ticks=12)
    log = run_episode(sc, RvoPlanner(), make_predictor("cv"), TickConfig())
    states, preds, decisions = log.write(tmp_path / "ep")[:3]
    assert states.read_text().splitlines()[0] == "tick,agent_id,kind,x,y,heading,speed"
    assert preds.read_text().splitlines()[0] == "issue_tick,agent_id,mode_index,step_index,x,y"
    assert decisions.read_text().splitlines()[0] == "tick,action,virtual_time_spent,fallback_flag"
    assert sorted(log.rows) == list(range(len(log.rows)))


def test_slow_predictor_always_falls_back_at_30hz():
    sc = generate_scenario(3, "straight", 6, horizon_ticks=150)
    log = run_episode(sc, RvoPlanner(), make_predictor("noisy_oracle", latency=0.224), TickConfig(tick_rate=30.0))
    assert log.decisions and all(d.fallback for d in log.decisions)
    assert all(d.virtual_time == 0.0 for d in log.decisions)


def test_virtual_time_conservation():
    sc = generate_scenario(5, "straight", 10, horizon_ticks=200)
    tc = TickConfig(tick_rate=30.0)
    log = run_episode(sc, RvoPlanner(), make_predictor("noisy_oracle", latency=0.001), tc)
    assert sum(d.virtual_time for d in log.decisions) <= len(log.decisions) / 30.0 + 1e-9
    assert all(d.virtual_time <= 1 / 30 + 1e-12 for d in log.decisions)


def test_planner_errors_carry_tick():
    class Broken(Predictor):
        def predict(self, ctx):
            if ctx.tick >= 6:
                raise RuntimeError("boom")
            return make_predictor("cv").predict(ctx)

    sc = generate_scenario(1, "straight", 2, horizon_ticks=30)
    with pytest.raises(EpisodeError) as info:
        run_episode(sc, RvoPlanner(), Broken(0.001), TickConfig())
    assert info.value.tick == 6


def test_world_histories_spaced_by_stride():
    sc = generate_scenario(6, "straight", 3)
    w = World(sc, TickConfig())
    aid = sc.exo[0].state.agent_id
    for t in range(9):
        if t % 3 == 0:
            w.record_frame()
        w.step(0.0)
    h = w.history(aid)
    assert len(h.positions) <= 20 and len(h.positions) >= 3
    fut = w.committed_future(0)
    assert fut.shape == (30, 2)


def test_budget_and_tick_config():
    b = Budget(virtual_total=0.1, prediction_calls_remaining=2)
    assert b.charge(0.05, 1) and not b.charge(0.06) and b.charge(0.05, 1)
    assert not b.charge(0.0, 1) and b.prediction_calls_remaining == 0
    with pytest.raises(ValueError):
        b.charge(-1.0)
    assert TickConfig(tick_rate=3.0).new_budget().virtual_total == pytest.approx(1 / 3)
    assert TickConfig().new_budget().virtual_total == math.inf
    assert TickConfig(mode="fixed_predictions", prediction_calls=5).new_budget().prediction_calls_remaining == 5
    for bad in ({"dt_sim": 0.0}, {"mode": "async"}, {"predictor_stride": 0}, {"tick_rate": -1.0}):
        with pytest.raises(ValueError):
            TickConfig(**bad)
    assert quantize_action(1.23456789) == 1.234568 and quantize_action(-0.0) == 0.0
