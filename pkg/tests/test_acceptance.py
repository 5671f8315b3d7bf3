"""Acceptance checks; each test records one pass/fail line in the terminal summary."""

import functools
import math
import time

import numpy as np

from fedcorun.cli import ExperimentConfig, run_experiment
from fedcorun.core import DeviceProfile, QueueState, SlotConfig, load_device_table
from fedcorun.gradient import ModelState, gap_limit, gradient_gap, predict_future_params
from fedcorun.offline import (
    OfflineInstance,
    OfflineUser,
    brute_force_knapsack,
    brute_force_offline,
    knapsack_dp,
    lag_upper_bound,
    replay_lags,
)
from fedcorun.online import ControllerConfig, decide, log_log_slope, threshold_decide
from fedcorun.sim import (
    ImmediateScheduling,
    OfflineKnapsack,
    Online,
    Phase,
    SyncSGD,
    arrival_sweep,
    build_state,
    run,
    step,
)

SEEDS = (0, 1, 2)
V_GRID = (1e2, 1e3, 4e3, 1e4, 1e5)
SLOPE_GRID = (1e4, 3e4, 1e5)


@functools.lru_cache(maxsize=None)
def summary(policy, seed, rate=0.001):
    return run(SlotConfig(arrival_prob=rate), policy, seed).summary


def mean_energy(policy, rate=0.001):
    return float(np.mean([summary(policy, s, rate).total_energy_J for s in SEEDS]))


# -- offline oracle ---------------------------------------------------------------


def _random_users(rng, n, model_of):
    users = []
    for i in range(n):
        begin = int(rng.integers(0, 200))
        users.append(
            OfflineUser(
                begin=begin,
                app_start=begin + int(rng.integers(0, 300)),
                duration=int(rng.integers(1, 250)),
                saving=float(rng.integers(-8, 64)) / 8.0,
                model=model_of(rng),
            )
        )
    return users


def test_criterion_1_knapsack_matches_brute_force(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    exact_bad = real_bad = 0
    n_cases = 500

    def integer_model(r):
        # beta = 0, lr = 1: the gap is exactly the integer g whenever lag >= 1.
        return ModelState(np.zeros(1), np.array([float(r.integers(1, 40))]), lr=1.0, beta=0.0)

    def real_model(r):
        return ModelState(np.zeros(3), r.normal(size=3) * r.uniform(0.1, 5.0), r.uniform(0.05, 1.0), r.uniform(0, 0.95))

    for k in range(n_cases):
        n = int(rng.integers(1, 16))
        cap = float(rng.integers(5, 200))
        inst = OfflineInstance(tuple(_random_users(rng, n, integer_model)), cap)
        dp = knapsack_dp(inst, resolution=1.0)
        bf = brute_force_offline(inst)
        exact_bad += dp.total_saving != bf.total_saving

        inst = OfflineInstance(tuple(_random_users(rng, n, real_model)), float(rng.uniform(1, 40)))
        res = inst.staleness_bound / 50.0
        dp = knapsack_dp(inst, resolution=res)
        hi = brute_force_offline(inst).total_saving
        lo = brute_force_knapsack(inst.savings(), inst.gaps(), inst.staleness_bound - n * res).total_saving
        feasible = dp.gap_total <= inst.staleness_bound
        real_bad += not (feasible and lo - 1e-9 <= dp.total_saving <= hi + 1e-9)
    elapsed = time.perf_counter() - t0
    ok = exact_bad == 0 and real_bad == 0 and elapsed < 10
    report(1, ok, f"integer mismatches {exact_bad}/{n_cases}, real-valued outside one cell {real_bad}/{n_cases}, {elapsed:.1f}s")
    assert ok


# -- gradient gap -------------------------------------------------------------------


def test_criterion_2_gap_identity(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    bad_mono = bad_limit = 0
    for _ in range(10_000):
        dim = int(rng.integers(1, 12))
        st = ModelState(rng.normal(size=dim), rng.normal(size=dim) * rng.uniform(1e-3, 10), rng.uniform(1e-4, 1.0), rng.uniform(0, 0.999))
        lag = int(rng.integers(0, 200))
        g = gradient_gap(st, lag)
        direct = float(np.linalg.norm(st.theta - predict_future_params(st, lag)))
        if direct > 0:
            worst = max(worst, abs(g - direct) / direct)
        elif g != 0:
            worst = math.inf
        bad_mono += gradient_gap(st, lag + 1) < g
        bad_limit += g > gap_limit(st) * (1 + 1e-12)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and bad_mono == 0 and bad_limit == 0 and elapsed < 1.0
    report(2, ok, f"max rel err {worst:.2e}, monotonicity breaks {bad_mono}, limit breaks {bad_limit}, {elapsed:.2f}s")
    assert ok


# -- decision equivalence -----------------------------------------------------------


def test_criterion_3_threshold_equivalence(report):
    rng = np.random.default_rng(303)
    catalog = load_device_table()
    profiles = [catalog.profile(0, d, a) for d in catalog.devices for a in catalog.apps]
    # Dyadic powers, one-hot momentum and power-of-two lr and beta keep every
    # product exact, so constructed ties really are ties.
    dyadic_models = [
        ModelState(np.zeros(2), np.array([float(g), 0.0]), lr=2.0**-e, beta=b)
        for g in (1, 3, 8) for e in (0, 2) for b in (0.0, 0.5, 0.75)
    ]
    dyadic_profiles = []
    for _ in range(64):
        idle = float(rng.integers(1, 16)) / 8
        train = idle + float(rng.integers(1, 40)) / 8
        app_p = float(rng.integers(1, 60)) / 8
        corun = max(train, app_p) + float(rng.integers(1, 24)) / 8
        dyadic_profiles.append(DeviceProfile(0, corun, train, app_p, idle, 100))
    real_models = [ModelState(np.zeros(4), rng.normal(size=4), rng.uniform(0.001, 0.5), rng.uniform(0, 0.99)) for _ in range(64)]
    mismatches = ties = 0
    n_cases = 1_000_000
    for k in range(n_cases):
        app = bool(rng.integers(2))
        if k % 2 == 0:
            prof = dyadic_profiles[int(rng.integers(len(dyadic_profiles)))]
            model = dyadic_models[int(rng.integers(len(dyadic_models)))]
            v = float(rng.integers(0, 8)) * 2.0 ** int(rng.integers(-2, 3))
            cfg = ControllerConfig(v, 500.0, float(rng.integers(0, 9)) / 4, float(2.0 ** int(rng.integers(-1, 2))))
            lag = int(rng.integers(0, 6))
            prev = float(rng.integers(0, 33)) / 4
            h = float(rng.integers(0, 3)) * float(rng.integers(0, 64)) / 8
            s_gap = gradient_gap(model, lag)
            i_gap = prev + cfg.gap_increment
            extra = (prof.p_corun - prof.p_app) if app else (prof.p_train - prof.p_idle)
            thr = cfg.v_param * cfg.slot_len * extra
            if rng.random() < 0.5:
                q = thr - h * (i_gap - s_gap)
                if q >= 0:
                    ties += 1
                else:
                    q = float(rng.integers(0, 30))
            else:
                q = float(rng.integers(0, 30))
        else:
            prof = profiles[int(rng.integers(len(profiles)))]
            model = real_models[int(rng.integers(len(real_models)))]
            cfg = ControllerConfig(float(10 ** rng.uniform(-1, 5)), 500.0, float(rng.uniform(0, 2)), 1.0)
            lag = int(rng.integers(0, 30))
            prev = float(rng.uniform(0, 50)) if rng.random() < 0.8 else 0.0
            h = float(rng.uniform(0, 5000)) if rng.random() < 0.7 else 0.0
            q = float(rng.integers(0, 26)) if rng.random() < 0.9 else float(rng.uniform(0, 1e4))
            s_gap = gradient_gap(model, lag)
        queues = QueueState(q, h)
        a = decide(prof, app, queues, model, lag, prev, cfg)
        b = threshold_decide(prof, app, queues, cfg, s_gap, prev + cfg.gap_increment)
        mismatches += a != b
    report(3, mismatches == 0, f"{mismatches} mismatches over {n_cases} states ({ties} exact ties)")
    assert mismatches == 0


# -- zero-backlog idling --------------------------------------------------------------


def test_criterion_4_zero_backlog_idles(report):
    state = build_state(SlotConfig(), 0)
    policy = Online()
    empty_slots = decisions = started = 0
    prefix = True
    prefix_slots = 0
    for _ in range(state.horizon):
        t = state.slot
        snap = state.server.snapshot()
        step(state, policy)
        if snap.empty:
            # Every device that decided this slot is now waiting or has just started.
            idled = sum(d.phase is Phase.WAITING for d in state.devices)
            began = sum(d.phase is Phase.TRAINING and d.ends_at == t + d.duration for d in state.devices)
            empty_slots += 1
            decisions += idled + began
            started += began
            prefix_slots += prefix
        else:
            prefix = False
    ok = started == 0 and decisions > 0 and prefix_slots >= 1
    report(4, ok, f"{started} schedules out of {decisions} decisions over {empty_slots} empty-queue slots ({prefix_slots} leading)")
    assert ok


# -- simulation shape -----------------------------------------------------------------


def test_criterion_5_energy_vs_v(report):
    online = [mean_energy(Online(v_param=v)) for v in V_GRID]
    offline = mean_energy(OfflineKnapsack())
    immediate = mean_energy(ImmediateScheduling())
    t0 = time.perf_counter()
    run(SlotConfig(), Online(), 99)
    per_run = time.perf_counter() - t0
    monotone = all(b <= a * 1.02 for a, b in zip(online, online[1:]))
    between = offline <= online[-1] <= immediate
    ok = monotone and between and per_run < 60
    pts = ", ".join(f"V={v:g}: {e / 1e3:.1f}kJ" for v, e in zip(V_GRID, online))
    report(5, ok, f"{pts}; offline {offline / 1e3:.1f}kJ, immediate {immediate / 1e3:.1f}kJ; {per_run:.1f}s per run")
    assert ok


def test_criterion_6_queue_growth_linear_in_v(report):
    means = []
    for v in SLOPE_GRID:
        ss = [summary(Online(v_param=v), s) for s in SEEDS]
        means.append(float(np.mean([x.mean_Q + x.mean_H for x in ss])))
    slope = log_log_slope(SLOPE_GRID, means)
    ok = 0.8 <= slope <= 1.2
    pts = ", ".join(f"V={v:g}: {m:.0f}" for v, m in zip(SLOPE_GRID, means))
    report(6, ok, f"mean(Q+H) {pts}; log-log slope {slope:.3f} (target [0.8, 1.2])")
    assert ok


def test_criterion_7_headline_savings(report):
    online = mean_energy(Online())
    immediate = mean_energy(ImmediateScheduling())
    sync = mean_energy(SyncSGD())
    offline = mean_energy(OfflineKnapsack())
    vs_imm = 1 - online / immediate
    vs_sync = 1 - online / sync
    factor = online / offline
    ok = vs_imm >= 0.40 and vs_sync >= 0.40 and factor <= 1.5
    report(
        7,
        ok,
        f"saved {vs_imm:.1%} vs immediate, {vs_sync:.1%} vs Sync-SGD, factor {factor:.3f} vs offline "
        "(reference values: 66%, 63%, 1.14)",
    )
    assert ok


def test_criterion_8_lag_bound_sound(report):
    rng = np.random.default_rng(808)
    model = ModelState(np.zeros(1), np.ones(1))
    violations = checked = 0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        users = _random_users(rng, n, lambda r: model)
        inst = OfflineInstance(tuple(users), float(rng.uniform(0.1, 5)))
        bounds = [lag_upper_bound(inst, i) for i in range(n)]
        plans = [knapsack_dp(inst).decisions, tuple(int(x) for x in rng.integers(0, 2, size=n))]
        for plan in plans:
            for lag, bound in zip(replay_lags(inst, plan), bounds):
                checked += 1
                violations += lag > bound
    report(8, violations == 0, f"{violations} violations over {checked} replayed user lags")
    assert violations == 0


def test_criterion_9_arrival_rate_extremes(report):
    cfg = SlotConfig()
    rows = arrival_sweep([0.2, 1e-4], cfg, [Online(), ImmediateScheduling()], seed=0)
    e = {(r.rate, r.policy): r.total_energy_J for r in rows}
    high = abs(e[(0.2, "online")] - e[(0.2, "immediate")]) / e[(0.2, "immediate")]
    low = e[(1e-4, "online")] / e[(1e-4, "immediate")]
    ok = high <= 0.10 and low <= 0.70
    report(9, ok, f"rate 0.2: |online - immediate| / immediate = {high:.1%}; rate 1e-4: online / immediate = {low:.1%}")
    assert ok


def test_criterion_10_determinism(report, tmp_path):
    texts = []
    for k in range(2):
        cfg = ExperimentConfig(out=str(tmp_path / f"r{k}"), per_slot=True, workers=1)
        status, files = run_experiment(cfg)
        assert status == 0
        texts.append([f.read_bytes() for f in files])
    ok = texts[0] == texts[1]
    report(10, ok, f"{len(texts[0])} output files byte-identical across two runs: {ok}")
    assert ok


def test_criterion_11_convergence(report):
    acc_on = float(np.mean([summary(Online(), s).final_acc for s in SEEDS]))
    acc_imm = float(np.mean([summary(ImmediateScheduling(), s).final_acc for s in SEEDS]))
    gap_pp = abs(acc_on - acc_imm) * 100
    updates = {
        name: [summary(p, s).updates for s in SEEDS]
        for name, p in (("sync", SyncSGD()), ("online", Online()), ("immediate", ImmediateScheduling()), ("offline", OfflineKnapsack()))
    }
    fewer = all(
        updates["sync"][k] < updates[name][k] for name in ("online", "immediate", "offline") for k in range(len(SEEDS))
    )
    ok = gap_pp <= 3.0 and fewer
    report(
        11,
        ok,
        f"final accuracy online {acc_on:.3f} vs immediate {acc_imm:.3f} ({gap_pp:.2f} pp); "
        f"updates sync {updates['sync']}, online {updates['online']}, immediate {updates['immediate']}",
    )
    assert ok
