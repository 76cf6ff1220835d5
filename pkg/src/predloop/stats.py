"""Pearson correlation and simple linear regression with t-test p-values.

The Student t tail is integrated numerically from its density with scipy's quad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

P_FLOOR = 1e-12


class DegenerateError(ValueError):
    """Input has zero variance or too few points."""


def _check(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(x) < 3:
        raise DegenerateError("need at least 3 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateError("zero variance")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _check(xs, ys)
    dx, dy = x - x.mean(), y - y.mean()
    r = float((dx @ dy) / math.sqrt((dx @ dx) * (dy @ dy)))
    return min(1.0, max(-1.0, r))


def t_density(x: float, df: float) -> float:
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student t with ``df`` degrees of freedom."""
    t = abs(t)
    if math.isinf(t):
        return 0.0
    if t < 1.0:
        body, _ = quad(t_density, 0.0, t, args=(df,), epsabs=1e-14, epsrel=1e-12)
        tail = 0.5 - body
    else:
        # x = 1/u maps the infinite tail onto (0, 1/t]
        tail, _ = quad(_inverted_density, 0.0, 1.0 / t, args=(df,), epsabs=1e-300, epsrel=1e-12, limit=200)
    return min(1.0, max(0.0, 2.0 * tail))


def _inverted_density(u: float, df: float) -> float:
    if u == 0.0:
        return 0.0
    return t_density(1.0 / u, df) / (u * u)


def t_critical(df: float, level: float = 0.95) -> float:
    """Two-sided critical value: t with P(|T| >= t) = 1 - level."""
    alpha = 1.0 - level
    return brentq(lambda t: t_two_sided_p(t, df) - alpha, 0.0, 1e4, xtol=1e-12)


@dataclass(frozen=True)
class CorrelationReport:
    metric: str
    pearson_r: float
    r_squared: float
    p_value: float
    slope: float
    intercept: float
    n: int
    # mean-response 95% band: y_hat +- t_crit * resid_std * sqrt(1/n + (x - x_mean)^2 / sxx)
    x_mean: float = 0.0
    sxx: float = 0.0
    resid_std: float = 0.0
    t_crit: float = 0.0

    def line(self, x) -> np.ndarray:
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def band(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        half = self.t_crit * self.resid_std * np.sqrt(1.0 / self.n + (x - self.x_mean) ** 2 / self.sxx)
        y = self.line(x)
        return y - half, y + half

    @property
    def p_display(self) -> str:
        return f"< {P_FLOOR:g}" if self.p_value < P_FLOOR else format(self.p_value, ".9g")


def linear_fit_stats(xs, ys, metric: str = "") -> CorrelationReport:
    """Least-squares fit of ys on xs with R^2 and the two-sided slope p-value."""
    x, y = _check(xs, ys)
    n = len(x)
    x_mean = float(x.mean())
    dx = x - x_mean
    sxx = float(dx @ dx)
    slope = float(dx @ (y - y.mean())) / sxx
    intercept = float(y.mean()) - slope * x_mean
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float((y - y.mean()) @ (y - y.mean()))
    r = pearson(x, y)
    r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    df = n - 2
    t = math.inf if r * r >= 1.0 else r * math.sqrt(df / (1.0 - r * r))
    p = t_two_sided_p(t, df)
    resid_std = math.sqrt(ss_res / df) if df > 0 else 0.0
    return CorrelationReport(metric, r, r2, p, slope, intercept, n, x_mean, sxx, resid_std, t_critical(df))


def _ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties sharing their mean rank."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Spearman rank correlation: Pearson on average ranks."""
    x, y = _check(xs, ys)
    return pearson(_ranks(x), _ranks(y))
