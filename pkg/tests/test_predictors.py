import math

import numpy as np
import pytest

from predloop.episode_log import EpisodeLog
from predloop.geometry import AgentState
from predloop.predictors import (LATENCY, T_OBS, T_PRED, EmptyDatabase, History, InsufficientHistory,
                                 PredictionContext, PredictionError, PredictionSet, TrajectoryDatabase,
                                 build_database, history_feature, make_predictor, neighbor_feature, predict_ca,
                                 predict_cv, predict_knn, predict_noisy_oracle, predict_sknn)
from predloop.sim import Budget


def line_history(speed=1.0, heading=0.0, curve=0.0, n=T_OBS, agent_id=1, origin=(0.0, 0.0)):
    th = heading + curve * np.arange(n)
    steps = speed * np.stack([np.cos(th), np.sin(th)], 1)
    pos = np.asarray(origin) + np.vstack([[0.0, 0.0], np.cumsum(steps, 0)[:-1]])
    return History.from_positions(pos, agent_id)


def rigid(history, theta, shift):
    r = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    return History.from_positions(history.positions @ r.T + shift, history.agent_id), r


# -- CV / CA ---------------------------------------------------------------------

def test_cv_examples():
    ps = predict_cv(History.from_positions([(0, 0), (1, 0)]), dt_frame=1.0)
    assert np.array_equal(ps.best, np.stack([np.arange(2, 32), np.zeros(30)], 1))
    still = predict_cv(History.from_positions([(2, 3)] * 5))
    assert np.all(still.best == [2, 3])
    assert ps.virtual_latency == 0.001
    with pytest.raises(InsufficientHistory):
        predict_cv(History.from_positions([(0, 0)]))


def test_ca_examples():
    ps = predict_ca(History.from_positions([(0, 0), (1, 0), (3, 0)]))
    assert np.allclose(np.diff(np.vstack([[3, 0], ps.best]), axis=0)[:3], [[3, 0], [4, 0], [5, 0]])
    h = line_history(0.7, 0.4)
    assert np.array_equal(predict_ca(h).best, predict_cv(h).best)
    dec = predict_ca(History.from_positions([(0, 0), (2, 0), (3, 0)]))
    xs = dec.best[:, 0]
    assert np.all(np.diff(xs) >= 0) and xs[-1] == xs[1] == 3.0  # frozen once the speed hits zero
    with pytest.raises(InsufficientHistory):
        predict_ca(History.from_positions([(0, 0), (1, 0)]))


# -- prediction set -------------------------------------------------------------------

def test_prediction_set_invariants():
    modes = np.zeros((2, T_PRED, 2))
    ps = PredictionSet(modes + [[[1, 0]], [[2, 0]]], np.array([0.25, 0.75]), 0.1)
    assert ps.best[0, 0] == 2 and ps.weights[0] == 0.75
    for bad in [(np.zeros((1, 29, 2)), [1.0]), (np.zeros((7, T_PRED, 2)), np.full(7, 1 / 7)),
                (np.zeros((2, T_PRED, 2)), [0.5, 0.6]), (np.zeros((2, T_PRED, 2)), [1.5, -0.5])]:
        with pytest.raises(ValueError):
            PredictionSet(bad[0], np.asarray(bad[1]), 0.0)


# -- KNN family ------------------------------------------------------------------------

def straight_db(rng, n=100):
    db = TrajectoryDatabase()
    for i in range(n):
        v = rng.uniform(0.1, 2.0)
        h = line_history(v, rng.uniform(-math.pi, math.pi))
        fut = h.last + v * np.arange(1, T_PRED + 1)[:, None] * [math.cos(h.headings[-1]), math.sin(h.headings[-1])]
        db.add_segment(h, fut)
    return db


def test_knn_identical_query_returns_entry():
    db = TrajectoryDatabase()
    h = line_history(1.0, 0.3, curve=0.02)
    fut = h.last + np.cumsum(np.full((T_PRED, 2), 0.5), 0)
    db.add_segment(h, fut)
    db.add_segment(line_history(2.0), h.last + np.zeros((T_PRED, 2)))
    ps = predict_knn(h, db, 1)
    assert np.allclose(ps.best, fut, atol=1e-12)
    assert ps.virtual_latency == 0.224


def test_knn_clamps_k():
    db = straight_db(np.random.default_rng(0), 3)
    ps = predict_knn(line_history(), db, 6)
    assert len(ps.modes) == 3 and ps.clamped
    assert np.allclose(ps.weights, 1 / 3)


def test_knn_matches_exhaustive_scan(rng):
    db = straight_db(rng)
    q = line_history(1.1, 0.5, curve=0.05)
    feat = history_feature(q)
    dist = [float(np.linalg.norm(feat - f)) for f in db.features]
    want = sorted(range(len(db)), key=lambda i: (dist[i], i))
    for k in (1, 3, 6):
        ps = predict_knn(q, db, k)
        r = np.array([[math.cos(q.headings[-1]), -math.sin(q.headings[-1])],
                      [math.sin(q.headings[-1]), math.cos(q.headings[-1])]])
        expected = np.stack([db.futures[i] @ r.T + q.last for i in want[:k]])
        assert np.allclose(ps.modes, expected, atol=1e-12)


def test_knn_frame_equivariance(rng):
    db = straight_db(rng)
    q = line_history(1.3, 0.2, curve=0.03)
    base = predict_knn(q, db, 6)
    for _ in range(5):
        theta, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-50, 50, 2)
        moved, r = rigid(q, theta, shift)
        out = predict_knn(moved, db, 6)
        assert np.allclose(out.modes, base.modes @ r.T + shift, atol=1e-8)


def test_sknn_reductions(rng):
    db = straight_db(rng)
    q = line_history(0.9, 1.0, curve=-0.02)
    a = predict_knn(q, db, 6)
    b = predict_sknn(q, [], db, 6)
    assert np.array_equal(a.modes, b.modes)
    assert b.virtual_latency == 0.248


def test_sknn_neighbor_feature_breaks_tie():
    db = TrajectoryDatabase()
    h = line_history(1.0)
    far = [h.last + [30.0, 0.0]]
    near = [h.last + [2.0, 1.0]]
    db.add_segment(h, h.last + np.ones((T_PRED, 2)), far)
    db.add_segment(h, h.last + 2 * np.ones((T_PRED, 2)), near)
    # plain KNN sees a tie and keeps insertion order, S-KNN picks the matching layout
    assert np.allclose(predict_knn(h, db, 1).best, h.last + 1)
    assert np.allclose(predict_sknn(h, near, db, 1).best, h.last + 2)
    assert np.allclose(neighbor_feature(h, near)[:2], [2.0, 1.0])


def test_knn_errors():
    with pytest.raises(EmptyDatabase):
        predict_knn(line_history(), TrajectoryDatabase())
    db = straight_db(np.random.default_rng(1), 5)
    with pytest.raises(InsufficientHistory):
        predict_knn(line_history(n=10), db)


def test_database_round_trip(tmp_path, rng):
    db = straight_db(rng, 7)
    db.add_segment(line_history(1.0, 0.1), np.ones((T_PRED, 2)), [np.array([3.0, 4.0])])
    path = tmp_path / "db.csv"
    db.save(path)
    back = TrajectoryDatabase.load(path)
    assert np.array_equal(back.features, db.features)
    assert np.array_equal(back.futures, db.futures)
    assert np.array_equal(back.social, db.social)
    back.save(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def agent_log(frames, stride=3):
    log = EpisodeLog(meta={"predictor_stride": stride})
    for t in range(frames * stride):
        log.record_states(t, [AgentState.make(0, "ego", -20.0, 0.0, 0.0, 0.0),
                              AgentState.make(1, "pedestrian", 0.01 * t, 0.0, 0.0, 1.0)])
    return log


@pytest.mark.parametrize("frames,entries", [(50, 1), (49, 0), (51, 2)])
def test_build_database_window_rule(frames, entries):
    log = agent_log(frames)
    if entries == 0:
        with pytest.raises(EmptyDatabase):
            build_database([log])
    else:
        assert len(build_database([log])) == entries


# -- noisy oracle --------------------------------------------------------------------------

def test_noisy_oracle_rms():
    truth = np.cumsum(np.ones((T_PRED, 2)), 0)
    rng = np.random.default_rng(5)
    errs = np.concatenate([(predict_noisy_oracle(truth, 1.0, 0.01, rng).best - truth).ravel()
                           for _ in range(1700)])  # about 10^5 coordinates
    assert abs(math.sqrt(np.mean(errs ** 2)) - 1.0) < 0.02
    assert np.array_equal(predict_noisy_oracle(truth, 0.0, 0.0).best, truth)
    with pytest.raises(ValueError):
        predict_noisy_oracle(truth, -1.0, 0.0)


def test_noisy_oracle_seeded_and_needs_future():
    p = make_predictor("noisy_oracle", sigma=0.5, latency=0.5)
    fut = np.zeros((T_PRED, 2))
    ctx = PredictionContext(line_history(), future=fut, tick=9, seed=4)
    assert np.array_equal(p.predict(ctx).best, p.predict(ctx).best)
    other = PredictionContext(line_history(), future=fut, tick=12, seed=4)
    assert not np.array_equal(p.predict(ctx).best, p.predict(other).best)
    with pytest.raises(PredictionError):
        p.predict(PredictionContext(line_history()))
    # a 0.5 s call never fits a 1/30 s budget
    assert not Budget(virtual_total=1 / 30).charge(p.latency, 1)


def test_make_predictor_defaults():
    assert make_predictor("cv").latency == LATENCY["cv"]
    assert make_predictor("ca", latency=0.02).latency == 0.02
    with pytest.raises(ValueError):
        make_predictor("knn")
    with pytest.raises(ValueError):
        make_predictor("lstm")
