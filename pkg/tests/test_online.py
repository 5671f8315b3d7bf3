import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcorun.core import Action, DeviceProfile, QueueState, load_device_table
from fedcorun.gradient import ModelState, gradient_gap
from fedcorun.online import (
    ControllerConfig,
    DecisionReport,
    DriftDiagnostics,
    DurationReport,
    LagReply,
    ParameterServer,
    TaskRegistry,
    decide,
    lag_estimate,
    log_log_slope,
    objective_term,
    server_step,
    theorem1_report,
    threshold_decide,
)

CAT = load_device_table()
PROFILES = [CAT.profile(0, d, a) for d in CAT.devices for a in CAT.apps]
MODEL = ModelState(np.zeros(2), np.array([3.0, 4.0]), lr=0.1, beta=0.5)


def test_zero_backlog_always_idles():
    cfg = ControllerConfig(v_param=0.0)
    for p in PROFILES:
        for app in (False, True):
            d = decide(p, app, QueueState(0, 0), MODEL, 5, 0.0, cfg)
            assert not d.scheduled
            assert d.app == app


def test_threshold_example_nexus6_no_app():
    p = CAT.profile(0, "Nexus6", "Map")
    cfg = ControllerConfig(v_param=10.0)
    thr = 10.0 * (p.p_train - p.p_idle)
    assert not decide(p, False, QueueState(math.floor(thr), 0), MODEL, 1, 0.0, cfg).scheduled
    assert decide(p, False, QueueState(math.ceil(thr), 0), MODEL, 1, 0.0, cfg).scheduled


def test_threshold_hit_exactly_schedules():
    p = DeviceProfile(0, 4.0, 3.0, 2.0, 1.0, 10)
    cfg = ControllerConfig(v_param=4.0)
    assert decide(p, False, QueueState(8.0, 0), MODEL, 1, 0.0, cfg).scheduled  # 4 * (3 - 1) = 8
    assert decide(p, True, QueueState(8.0, 0), MODEL, 1, 0.0, cfg).scheduled  # 4 * (4 - 2) = 8
    assert not decide(p, True, QueueState(7.0, 0), MODEL, 1, 0.0, cfg).scheduled


def test_virtual_queue_pushes_long_waiters():
    p = DeviceProfile(0, 4.0, 3.0, 2.0, 1.0, 10)
    cfg = ControllerConfig(v_param=100.0, gap_increment=1.0)
    q = QueueState(0.0, 50.0)
    # Scheduling leaves gap 0.5 * (1 + 0.5) * 5 = 3.75; idling leaves prev + 1.
    assert not decide(p, False, q, MODEL, 2, 0.0, cfg).scheduled
    assert decide(p, False, q, MODEL, 2, 10.0, cfg).scheduled


def test_v_zero_schedules_any_backlog():
    cfg = ControllerConfig(v_param=0.0)
    assert decide(PROFILES[0], False, QueueState(1, 0), MODEL, 3, 0.0, cfg).scheduled


@settings(max_examples=500)
@given(
    idx=st.integers(0, len(PROFILES) - 1),
    app=st.booleans(),
    q=st.integers(0, 40),
    h=st.floats(0, 1e4),
    v=st.just(0.0) | st.floats(1e-2, 1e5),  # subnormal V rounds powers into ties
    lag=st.integers(0, 30),
    prev=st.floats(0, 100),
    eps=st.floats(0, 2),
)
def test_threshold_form_matches_objective(idx, app, q, h, v, lag, prev, eps):
    p = PROFILES[idx]
    cfg = ControllerConfig(v_param=v, gap_increment=eps)
    queues = QueueState(float(q), h)
    a = decide(p, app, queues, MODEL, lag, prev, cfg)
    b = threshold_decide(p, app, queues, cfg, gradient_gap(MODEL, lag), prev + eps)
    assert a == b


def test_decide_picks_the_smaller_objective():
    p = PROFILES[3]
    cfg = ControllerConfig(v_param=50.0, gap_increment=0.5)
    queues = QueueState(12.0, 30.0)
    d = decide(p, True, queues, MODEL, 4, 2.0, cfg)
    sched = objective_term(p, d.__class__.of(True, True), queues, gradient_gap(MODEL, 4), cfg)
    idle = objective_term(p, d.__class__.of(False, True), queues, 2.5, cfg)
    assert d.scheduled == (sched < idle)


def test_controller_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(v_param=-1)
    with pytest.raises(ValueError):
        ControllerConfig(staleness_bound=0)
    with pytest.raises(ValueError):
        ControllerConfig(gap_increment=-0.1)


def test_messages_never_carry_app_status():
    for msg in (DurationReport, LagReply, DecisionReport):
        names = {f.name for f in dataclasses.fields(msg)}
        assert not any("app" in n for n in names), names
    assert {f.name for f in dataclasses.fields(DecisionReport)} == {"device_id", "action", "gap"}


def test_registry_lag_estimate_is_inclusive():
    reg = TaskRegistry()
    reg.add(0, 10)
    reg.add(1, 15)
    reg.add(2, 16)
    assert reg.lag_estimate(5, 10) == 2
    assert lag_estimate(reg, 6, 10) == 3
    reg.remove(1)
    reg.remove(7)  # unknown ids are ignored
    assert len(reg) == 2
    assert sorted(reg.completions()) == [10, 16]


def test_server_step_examples():
    cfg = ControllerConfig(staleness_bound=5.0)
    from fedcorun.core import CORUN, IDLE, TRAIN

    nxt = server_step([CORUN, TRAIN, IDLE], [1.0, 2.0, 4.0], QueueState(5, 1), 2, cfg)
    assert nxt == QueueState(5.0, 3.0)
    assert server_step([TRAIN] * 4, [0.0] * 4, QueueState(2, 0), 1, cfg) == QueueState(1.0, 0.0)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), max_size=60))
def test_queue_conserves_tasks(steps):
    from fedcorun.core import IDLE, TRAIN

    cfg = ControllerConfig()
    q = QueueState()
    admitted = served = 0
    for a, b in steps:
        eff = min(q.q, b)
        q = server_step([TRAIN] * b + [IDLE], [0.0], q, a, cfg)
        admitted += a
        served += eff
    assert admitted == served + q.q


def test_parameter_server_nets_same_slot_arrivals():
    srv = ParameterServer(ControllerConfig(staleness_bound=10.0))
    for i in range(3):
        srv.arrive(i)
    srv.report(DecisionReport(0, Action.SCHEDULE, 2.0))
    srv.report(DecisionReport(1, Action.IDLE, 0.5))
    srv.report(DecisionReport(2, Action.IDLE, 0.5))
    q = srv.end_slot(extra_gaps=[20.0])
    assert q == QueueState(2.0, 13.0)
    srv.registry.add(0, 5)
    assert srv.request_lag(DurationReport(1, 10)) == LagReply(1, 1)
    srv.report(DecisionReport(1, Action.SCHEDULE, 1.0))
    q = srv.end_slot()
    assert q == QueueState(1.0, 4.0)
    assert srv.diagnostics.a_max == 2 and srv.diagnostics.b_max == 1
    assert srv.now == 2


def test_drift_constant_uses_realized_maxima():
    d = DriftDiagnostics(staleness_bound=4.0)
    d.observe(2, 1, 3.0, -1.0)
    d.observe(1, 3, 1.0, 2.0)
    assert d.b_constant == 0.5 * (4 + 9 + 9 + 16)
    assert d.objective == [-1.0, 2.0]


def test_theorem1_report_on_ideal_curves():
    vs = [1e2, 1e3, 1e4, 3e4, 1e5]
    runs = {v: [(2.0 + 50.0 / v, 0.01 * v), (2.0 + 50.0 / v, 0.01 * v)] for v in vs}
    rep = theorem1_report(runs)
    assert rep.power_fit == pytest.approx((2.0, 50.0))
    assert rep.queue_slope == pytest.approx(1.0)
    assert rep.power_nonincreasing
    assert log_log_slope([1, 10], [3, 300]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        theorem1_report({1.0: [(1, 1)]})
