import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from predloop.stats import (P_FLOOR, DegenerateError, linear_fit_stats, pearson, spearman, t_critical,
                            t_two_sided_p)


def null_p(x, r_obs, draws, rng, chunk=250_000):
    """Monte-Carlo p: share of i.i.d. normal y redraws (x fixed) with |r| >= |r_obs|."""
    xc = (x - x.mean()) / np.linalg.norm(x - x.mean())
    hits = 0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        y = rng.standard_normal((m, len(x)))
        y -= y.mean(axis=1, keepdims=True)
        r = (y @ xc) / np.linalg.norm(y, axis=1)
        hits += int(np.count_nonzero(np.abs(r) >= abs(r_obs) - 1e-12))
        done += m
    return hits / draws


def test_pearson_matches_corrcoef(rng):
    for _ in range(20):
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


def test_fit_matches_reference(rng):
    x = rng.uniform(0, 5, 30)
    y = 2.0 - 0.7 * x + rng.normal(0, 0.5, 30)
    rep = linear_fit_stats(x, y, "m")
    ref = sps.linregress(x, y)
    assert rep.slope == pytest.approx(ref.slope, abs=1e-12)
    assert rep.intercept == pytest.approx(ref.intercept, abs=1e-12)
    assert rep.pearson_r == pytest.approx(ref.rvalue, abs=1e-12)
    assert rep.p_value == pytest.approx(ref.pvalue, rel=1e-6)
    assert rep.r_squared == pytest.approx(rep.pearson_r ** 2, abs=1e-12)
    assert rep.n == 30 and rep.metric == "m"


def test_t_tail_and_critical_values():
    for t, df in [(0.0, 5), (1.0, 3), (2.0, 10), (4.5, 18), (12.0, 4)]:
        assert t_two_sided_p(t, df) == pytest.approx(2 * sps.t.sf(t, df), rel=1e-7, abs=1e-15)
    assert t_critical(18) == pytest.approx(sps.t.ppf(0.975, 18), abs=1e-9)
    assert t_two_sided_p(math.inf, 3) == 0.0


def test_perfect_fit():
    x = np.arange(10.0)
    rep = linear_fit_stats(x, 3 * x + 1)
    assert rep.r_squared == 1.0 and rep.pearson_r == 1.0
    assert rep.p_value < 1e-12
    assert rep.p_display == f"< {P_FLOOR:g}"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=30))
def test_r_squared_identity(points):
    x, y = map(np.array, zip(*points))
    try:
        rep = linear_fit_stats(x, y)
    except DegenerateError:
        return
    if np.ptp(x) < 1e-6 * max(1.0, np.abs(x).max()) or np.ptp(y) < 1e-6 * max(1.0, np.abs(y).max()):
        return  # nearly constant inputs lose the identity to cancellation
    assert rep.r_squared == pytest.approx(rep.pearson_r ** 2, abs=1e-9)
    assert 0.0 <= rep.p_value <= 1.0


def test_band_contains_fit_and_widens_away_from_mean(rng):
    x = rng.uniform(0, 1, 12)
    rep = linear_fit_stats(x, x + rng.normal(0, 0.1, 12))
    lo, hi = rep.band([rep.x_mean, rep.x_mean + 2])
    y = rep.line([rep.x_mean, rep.x_mean + 2])
    assert np.all(lo <= y) and np.all(y <= hi)
    assert hi[1] - lo[1] > hi[0] - lo[0]


def test_degenerate_inputs():
    with pytest.raises(DegenerateError):
        pearson([1, 2], [1, 2])
    with pytest.raises(DegenerateError):
        linear_fit_stats([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])


def test_spearman(rng):
    assert spearman([1, 2, 3, 4], [10, 20, 30, 45]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    for _ in range(10):
        x = rng.integers(0, 5, 12).astype(float)
        y = rng.normal(size=12)
        if np.ptp(x) == 0:
            continue
        assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic, abs=1e-12)


def test_p_value_against_null_resampling(rng):
    x = np.array([0.1, 0.4, 0.5, 0.9, 1.3, 1.4, 2.2, 2.5])
    y = np.array([1.0, 0.7, 1.1, 0.6, 0.4, 0.9, 0.2, 0.5])
    rep = linear_fit_stats(x, y)
    draws = 200_000
    p_mc = null_p(x, rep.pearson_r, draws, rng)
    sd = math.sqrt(rep.p_value * (1 - rep.p_value) / draws)
    assert abs(p_mc - rep.p_value) <= 3 * sd
