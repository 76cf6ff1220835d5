"""Shared fixtures: small hand-built episode logs."""

from __future__ import annotations

import numpy as np
import pytest

from predloop.episode_log import EpisodeLog
from predloop.geometry import AgentState


def straight_log(ego_speeds, exo=(), dt=0.03, stride=3):
    """Ego driving along +x at the given per-tick speeds; ``exo`` is a list of (kind, xy_fn(tick))."""
    log = EpisodeLog(meta={"dt_sim": dt, "predictor_stride": stride})
    x = 0.0
    for t, v in enumerate(ego_speeds):
        states = [AgentState.make(0, "ego", x, 0.0, 0.0, float(v))]
        for i, (kind, fn) in enumerate(exo, start=1):
            px, py = fn(t)
            states.append(AgentState.make(i, kind, px, py, 0.0, 0.0))
        log.record_states(t, states)
        x += float(v) * dt
    return log


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ----------------------------------------------------------------

_criteria: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1]
    number, _, title = name.partition("_")
    entry = _criteria.setdefault(int(number), {"title": title.replace("_", " "), "ok": True, "detail": ""})
    if report.failed:
        entry["ok"] = False
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value
    if report.when == "call" and report.skipped:
        entry["ok"] = None


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "SKIP" if e["ok"] is None else "PASS" if e["ok"] else "FAIL"
        detail = f": {e['detail']}" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict} ({e['title']}){detail}")
