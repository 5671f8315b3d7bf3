"""Slot-by-slot simulation of a federated fleet under one scheduling policy.

Each slot: apps start per the frozen arrival trace, waiting devices are
asked for a decision, newly scheduled devices pull the global model, and
devices whose training ends push their result (the server replaces the
global model). Queues advance once per slot and a metrics row is logged.

Queue convention: a device that becomes available and is scheduled in the
same slot never enters ``Q``; ``Q`` is the number of devices that have been
waiting since an earlier slot.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .core import (
    AppTimeline,
    Decision,
    DeviceCatalog,
    DeviceProfile,
    QueueState,
    SlotConfig,
    energy_saving,
    load_device_table,
    power_of,
    sample_app_trace,
)
from .gradient import ModelState, ToyTask, async_merge, gradient_gap, local_epoch, make_toy_task
from .offline import plan_window
from .online import (
    ControllerConfig,
    DecisionReport,
    DurationReport,
    ParameterServer,
    decide,
    objective_term,
)

ACCURACY_MARKS = (0.40, 0.45, 0.50, 0.55)

# RNG stream purposes; each (purpose, device) pair gets an independent stream.
_DATA, _FLEET, _APPS, _TRAIN, _INIT, _WARMUP = range(6)


def stream(seed: int, purpose: int, device: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, device)))


# -- policies -----------------------------------------------------------------


@dataclass(frozen=True)
class Online:
    """Drift-plus-penalty controller; ``None`` fields fall back to the SlotConfig."""

    v_param: float | None = None
    staleness_bound: float | None = None
    name: str = field(default="online", init=False)


@dataclass(frozen=True)
class ImmediateScheduling:
    name: str = field(default="immediate", init=False)


@dataclass(frozen=True)
class OfflineKnapsack:
    window: int = 500
    staleness_bound: float = 1000.0
    resolution: float | None = None
    name: str = field(default="offline", init=False)


@dataclass(frozen=True)
class SyncSGD:
    name: str = field(default="sync", init=False)


Policy = Union[Online, ImmediateScheduling, OfflineKnapsack, SyncSGD]

POLICIES = {"online": Online, "immediate": ImmediateScheduling, "offline": OfflineKnapsack, "sync": SyncSGD}


def policy_from_name(name: str) -> Policy:
    try:
        return POLICIES[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None


@dataclass(frozen=True)
class TrainerConfig:
    """Toy-trainer and bookkeeping knobs that are not part of the slot model.

    ``reference_gap`` fixes the gradient-gap unit: the mean parameter change
    per update seen during a 20-update warmup is worth this many units.
    """

    lr: float = 0.005
    beta: float = 0.9
    batch_size: int = 20
    points_per_user: int = 1200
    separation: float = 1.8
    init_scale: float = 0.05
    reference_gap: float = 22.0
    warmup_updates: int = 20
    eval_every: int = 60
    cooldown: int = 0
    max_wait: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must be in [0, 1)")
        if self.batch_size < 1 or self.points_per_user < 1:
            raise ValueError("batch_size and points_per_user must be >= 1")
        if not self.reference_gap > 0:
            raise ValueError("reference_gap must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")
        if self.max_wait is not None and self.max_wait < 1:
            raise ValueError("max_wait must be >= 1")


# -- state --------------------------------------------------------------------


class Phase(enum.Enum):
    WAITING = "waiting"
    TRAINING = "training"
    DONE = "done"


@dataclass
class DeviceRuntime:
    index: int
    kind: str
    base: DeviceProfile
    profiles: dict[str, DeviceProfile]
    timeline: AppTimeline
    model: ModelState
    rng: np.random.Generator
    phase: Phase = Phase.DONE
    ends_at: int = 0
    available_at: int = 0
    prev_gap: float = 0.0
    gap: float = 0.0
    waited: int = 0
    pulled: np.ndarray | None = None
    pulled_version: int = 0
    lag_estimate: int = 0
    app: str | None = None

    @property
    def duration(self) -> int:
        return self.base.train_duration

    def profile(self) -> DeviceProfile:
        return self.profiles[self.app] if self.app is not None else self.base


@dataclass(frozen=True)
class SlotMetrics:
    slot: int
    total_energy_joules: float
    q_len: float
    h_len: float
    decisions: tuple[Decision, ...]
    gaps: tuple[float, ...]
    global_loss: float
    global_accuracy: float


@dataclass(frozen=True)
class LagRecord:
    device: int
    slot: int
    lag: int
    estimate: int


@dataclass(frozen=True)
class TraceRecord:
    slot: int
    device: int
    loss: float
    momentum_norm: float
    gap: float


@dataclass
class SimState:
    slot: int
    horizon: int
    devices: list[DeviceRuntime]
    global_model: np.ndarray
    version: int
    queues: QueueState
    server: ParameterServer
    task: ToyTask
    cfg: SlotConfig
    trainer: TrainerConfig
    ctrl: ControllerConfig
    gap_scale: float
    metrics: list[SlotMetrics] = field(default_factory=list)
    lags: list[LagRecord] = field(default_factory=list)
    traces: list[TraceRecord] = field(default_factory=list)
    started: int = 0
    completed: int = 0
    updates: int = 0
    accuracy: tuple[float, float] = (math.nan, math.nan)
    marks: dict[float, int] = field(default_factory=dict)
    plan: dict[int, int] = field(default_factory=dict)
    sync_round_open: bool = False


# -- setup --------------------------------------------------------------------


def calibrate_gap_units(
    task: ToyTask,
    init: np.ndarray,
    trainer: TrainerConfig,
    rng: np.random.Generator,
) -> float:
    """Mean L2 change of the global model per update over a short sequential warmup."""
    theta = init.copy()
    steps = []
    for k in range(trainer.warmup_updates):
        _, st = local_epoch(task, k % task.n_users, theta, rng, trainer.lr, trainer.beta, trainer.batch_size)
        steps.append(float(np.linalg.norm(st.theta - theta)))
        theta = st.theta
    return float(np.mean(steps)) if steps else 1.0


def build_state(
    cfg: SlotConfig,
    seed: int,
    trainer: TrainerConfig = TrainerConfig(),
    catalog: DeviceCatalog | None = None,
    staleness_bound: float | None = None,
    v_param: float | None = None,
) -> SimState:
    catalog = catalog or load_device_table()
    n = cfg.n_users
    task = make_toy_task(
        max(n, 1), stream(seed, _DATA), points_per_user=trainer.points_per_user, separation=trainer.separation
    )
    init = stream(seed, _INIT).standard_normal(task.model_dim) * trainer.init_scale
    kinds = stream(seed, _FLEET).integers(0, len(catalog.devices), size=n)
    devices = []
    for i, k in enumerate(kinds):
        kind = catalog.devices[int(k)]
        profiles = {app: catalog.profile(i, kind, app, cfg.slot_len) for app in catalog.apps}
        events = sample_app_trace(
            stream(seed, _APPS, i),
            cfg.horizon,
            cfg.arrival_prob,
            catalog.apps,
            lambda app, kind=kind: catalog.app_slots(kind, app, cfg.slot_len),
            device=i,
        )
        devices.append(
            DeviceRuntime(
                index=i,
                kind=kind,
                base=profiles[catalog.apps[0]],
                profiles=profiles,
                timeline=AppTimeline(events),
                model=ModelState.zeros(task.model_dim, trainer.lr, trainer.beta),
                rng=stream(seed, _TRAIN, i),
            )
        )
    per_update = calibrate_gap_units(task, init, trainer, stream(seed, _WARMUP))
    gap_scale = trainer.reference_gap / per_update if per_update > 0 else 1.0
    mean_duration = float(np.mean([d.duration for d in devices])) if devices else 1.0
    eps = cfg.gap_increment if cfg.gap_increment is not None else trainer.reference_gap / mean_duration
    ctrl = ControllerConfig(
        v_param=cfg.v_param if v_param is None else v_param,
        staleness_bound=cfg.staleness_bound if staleness_bound is None else staleness_bound,
        gap_increment=eps,
        slot_len=cfg.slot_len,
    )
    return SimState(
        slot=0,
        horizon=cfg.horizon,
        devices=devices,
        global_model=init,
        version=0,
        queues=QueueState(),
        server=ParameterServer(ctrl),
        task=task,
        cfg=cfg,
        trainer=trainer,
        ctrl=ctrl,
        gap_scale=gap_scale,
    )


# -- policy decisions ---------------------------------------------------------


def _online_decisions(state: SimState, waiting: list[DeviceRuntime], active: dict[int, bool]) -> dict[int, bool]:
    out = {}
    snapshot = state.server.snapshot()
    for dev in waiting:
        reply = state.server.request_lag(DurationReport(dev.index, dev.duration))
        dev.lag_estimate = reply.lag
        d = decide(
            dev.profile(), active[dev.index], snapshot, dev.model, reply.lag, dev.prev_gap, state.ctrl, state.gap_scale
        )
        out[dev.index] = d.scheduled
    return out


def _offline_decisions(state: SimState, policy: OfflineKnapsack, waiting: list[DeviceRuntime]) -> dict[int, bool]:
    t = state.slot
    if t % policy.window == 0:
        stop = min(t + policy.window, state.horizon)
        available: list[int | None] = []
        for dev in state.devices:
            if dev.phase is Phase.WAITING:
                available.append(t)
            elif dev.phase is Phase.TRAINING:
                available.append(dev.ends_at + state.trainer.cooldown)
            else:
                available.append(max(dev.available_at, t))

        def saving_at(i: int, slot: int) -> float:
            dev = state.devices[i]
            return energy_saving(dev.profiles[dev.timeline.peek(slot).app])

        plan = plan_window(
            t,
            stop,
            available,
            [d.timeline for d in state.devices],
            [d.duration for d in state.devices],
            saving_at,
            [d.model for d in state.devices],
            policy.staleness_bound,
            policy.resolution,
            state.gap_scale,
        )
        state.plan = {ps.device: ps.slot for ps in plan.starts}
    out = {}
    for dev in waiting:
        start = state.plan.get(dev.index)
        out[dev.index] = start is not None and start <= t
    return out


def sync_sgd_baseline(state: SimState) -> dict[int, bool]:
    """Barrier rounds: everyone starts together once every device is back."""
    if all(d.phase is Phase.WAITING for d in state.devices):
        return {d.index: True for d in state.devices}
    return {d.index: False for d in state.devices if d.phase is Phase.WAITING}


# -- the slot loop ------------------------------------------------------------


def _evaluate(state: SimState) -> None:
    loss, acc = state.task.evaluate(state.global_model)
    state.accuracy = (loss, acc)
    for m in ACCURACY_MARKS:
        if acc >= m and m not in state.marks:
            state.marks[m] = state.slot


def step(state: SimState, policy: Policy) -> SimState:
    """Advance ``state`` by one slot under ``policy`` (mutates and returns it)."""
    t = state.slot
    if t >= state.horizon:
        raise ValueError("simulation already reached its horizon")
    if t == 0:
        _evaluate(state)
    sync = isinstance(policy, SyncSGD)

    # Devices coming back from training or cool-down.
    newly = []
    for dev in state.devices:
        if dev.phase is Phase.DONE and dev.available_at <= t and not (sync and state.sync_round_open):
            dev.phase = Phase.WAITING
            dev.prev_gap = 0.0
            dev.waited = 0
            newly.append(dev.index)
            state.server.arrive(dev.index)
    if sync and state.sync_round_open and all(d.phase is Phase.DONE for d in state.devices):
        _close_sync_round(state)
        for dev in state.devices:
            dev.phase = Phase.WAITING
            dev.prev_gap = 0.0
            dev.waited = 0
            newly.append(dev.index)
            state.server.arrive(dev.index)

    active = {}
    for dev in state.devices:
        app = dev.timeline.advance(t)
        dev.app = app.app if app is not None else None
        active[dev.index] = app is not None

    waiting = [d for d in state.devices if d.phase is Phase.WAITING]
    if isinstance(policy, Online):
        chosen = _online_decisions(state, waiting, active)
    elif isinstance(policy, ImmediateScheduling):
        chosen = {d.index: True for d in waiting}
    elif isinstance(policy, OfflineKnapsack):
        chosen = _offline_decisions(state, policy, waiting)
    elif sync:
        chosen = sync_sgd_baseline(state)
        if any(chosen.values()):
            state.sync_round_open = True
    else:
        raise TypeError(f"unknown policy {policy!r}")

    max_wait = state.trainer.max_wait
    objective = 0.0
    snapshot = state.server.snapshot()
    for dev in waiting:
        go = chosen[dev.index] or (max_wait is not None and dev.waited >= max_wait)
        decision = Decision.of(go, active[dev.index])
        if go:
            if not isinstance(policy, Online):
                dev.lag_estimate = state.server.registry.lag_estimate(dev.duration, t)
            dev.gap = state.gap_scale * gradient_gap(dev.model, dev.lag_estimate)
            dev.phase = Phase.TRAINING
            dev.ends_at = t + dev.duration
            dev.pulled = state.global_model.copy()
            dev.pulled_version = state.version
            if active[dev.index]:
                dev.timeline.truncate(dev.ends_at)
            state.started += 1
        else:
            dev.gap = dev.prev_gap + state.ctrl.gap_increment
            dev.prev_gap = dev.gap
            dev.waited += 1
        objective += objective_term(dev.profile(), decision, snapshot, dev.gap, state.ctrl)
        state.server.report(DecisionReport(dev.index, decision.action, dev.gap))
    # Registry updates after every device has decided against the same snapshot.
    for dev in waiting:
        if dev.phase is Phase.TRAINING:
            state.server.registry.add(dev.index, dev.ends_at)

    decisions = []
    gaps = []
    energy = 0.0
    extra_gaps = []
    deciding = {d.index for d in waiting}
    for dev in state.devices:
        training = dev.phase is Phase.TRAINING
        d = Decision.of(training, active[dev.index])
        decisions.append(d)
        energy += power_of(dev.profile(), d, state.cfg.slot_len)
        g = dev.gap if (training or dev.index in deciding) else 0.0
        gaps.append(g)
        if training and dev.index not in deciding:
            extra_gaps.append(g)

    for dev in state.devices:
        if dev.phase is Phase.TRAINING and dev.ends_at == t + 1:
            _complete(state, dev, sync)

    q, h = snapshot.q, snapshot.h
    state.queues = state.server.end_slot(extra_gaps, objective)
    state.slot = t + 1
    if state.slot % state.trainer.eval_every == 0 or state.slot == state.horizon:
        _evaluate(state)
    state.metrics.append(
        SlotMetrics(t, energy, q, h, tuple(decisions), tuple(gaps), state.accuracy[0], state.accuracy[1])
    )
    return state


def _complete(state: SimState, dev: DeviceRuntime, sync: bool) -> None:
    t = state.slot
    losses, new = local_epoch(
        state.task,
        dev.index,
        dev.pulled,
        dev.rng,
        state.trainer.lr,
        state.trainer.beta,
        state.trainer.batch_size,
        momentum=dev.model.momentum,
    )
    dev.model = new
    state.server.registry.remove(dev.index)
    state.completed += 1
    state.traces.append(TraceRecord(t, dev.index, losses[-1], new.momentum_norm, dev.gap))
    if not sync:
        lag = state.version - dev.pulled_version
        state.global_model = async_merge(state.global_model, new.theta)
        state.version += 1
        state.updates += 1
        state.lags.append(LagRecord(dev.index, t, lag, dev.lag_estimate))
    else:
        state.lags.append(LagRecord(dev.index, t, 0, 0))
    dev.pulled = None
    dev.phase = Phase.DONE
    dev.available_at = t + 1 + state.trainer.cooldown
    dev.gap = 0.0


def _close_sync_round(state: SimState) -> None:
    state.global_model = np.mean([d.model.theta for d in state.devices], axis=0)
    state.version += 1
    state.updates += 1
    state.sync_round_open = False


# -- runs -----------------------------------------------------------------------


SUMMARY_COLUMNS = (
    "policy",
    "V",
    "L_b",
    "rate",
    "seed",
    "total_energy_J",
    "mean_Q",
    "mean_H",
    "final_acc",
    "t_acc_40",
    "t_acc_45",
    "t_acc_50",
    "t_acc_55",
)
SUMMARY_SCHEMA_VERSION = 1

SLOT_COLUMNS = tuple(f.name for f in fields(SlotMetrics))


@dataclass(frozen=True)
class RunSummary:
    policy: str
    v_param: float
    staleness_bound: float
    rate: float
    seed: int
    total_energy_J: float
    mean_Q: float
    mean_H: float
    final_acc: float
    t_acc: tuple[int | None, ...]
    updates: int = 0
    started: int = 0
    completed: int = 0
    in_flight: int = 0
    b_constant: float = 0.0
    horizon: int = 0
    slot_len: float = 1.0

    @property
    def mean_power(self) -> float:
        """Average fleet power in watts."""
        span = self.horizon * self.slot_len
        return self.total_energy_J / span if span else 0.0

    def row(self) -> list[str]:
        def num(x: float) -> str:
            return "" if math.isnan(x) else repr(float(x))

        marks = ["" if m is None else str(m) for m in self.t_acc]
        return [
            self.policy,
            num(self.v_param),
            num(self.staleness_bound),
            num(self.rate),
            str(self.seed),
            num(self.total_energy_J),
            num(self.mean_Q),
            num(self.mean_H),
            num(self.final_acc),
            *marks,
        ]


@dataclass
class RunResult:
    summary: RunSummary
    metrics: list[SlotMetrics]
    lags: list[LagRecord]
    traces: list[TraceRecord]
    state: SimState


def run(
    cfg: SlotConfig,
    policy: Policy,
    seed: int,
    trainer: TrainerConfig = TrainerConfig(),
    catalog: DeviceCatalog | None = None,
) -> RunResult:
    if isinstance(policy, Online):
        state = build_state(cfg, seed, trainer, catalog, policy.staleness_bound, policy.v_param)
    else:
        state = build_state(cfg, seed, trainer, catalog)
    for _ in range(cfg.horizon):
        step(state, policy)
    return RunResult(summarize(state, policy, seed), state.metrics, state.lags, state.traces, state)


def summarize(state: SimState, policy: Policy, seed: int) -> RunSummary:
    m = state.metrics
    total = math.fsum(x.total_energy_joules for x in m)
    if isinstance(policy, OfflineKnapsack):
        lb = policy.staleness_bound
    else:
        lb = state.ctrl.staleness_bound
    v = state.ctrl.v_param if isinstance(policy, Online) else math.nan
    in_flight = sum(1 for d in state.devices if d.phase is Phase.TRAINING)
    return RunSummary(
        policy=policy.name,
        v_param=v,
        staleness_bound=lb,
        rate=state.cfg.arrival_prob,
        seed=seed,
        total_energy_J=total,
        mean_Q=float(np.mean([x.q_len for x in m])) if m else 0.0,
        mean_H=float(np.mean([x.h_len for x in m])) if m else 0.0,
        final_acc=state.accuracy[1] if m else math.nan,
        t_acc=tuple(state.marks.get(k) for k in ACCURACY_MARKS),
        updates=state.updates,
        started=state.started,
        completed=state.completed,
        in_flight=in_flight,
        b_constant=state.server.diagnostics.b_constant,
        horizon=len(m),
        slot_len=state.cfg.slot_len,
    )


def max_realized_lag(durations: Sequence[int], device: int) -> int:
    """Most pushes other devices can land in ``device``'s closed training span.

    A device shorter than ``device`` may push more than once, so this exceeds
    ``n - 1`` on mixed fleets.
    """
    d = durations[device]
    return sum(d // dj + 1 for j, dj in enumerate(durations) if j != device)


def check_invariants(result: RunResult) -> list[str]:
    """Bookkeeping violations in a finished run (empty when consistent)."""
    s, state = result.summary, result.state
    problems = []
    if s.total_energy_J != math.fsum(m.total_energy_joules for m in result.metrics):
        problems.append("total energy differs from the sum of slot energies")
    if s.started != s.completed + s.in_flight:
        problems.append(f"started {s.started} != completed {s.completed} + in flight {s.in_flight}")
    durations = [d.duration for d in state.devices]
    if any(r.lag > max_realized_lag(durations, r.device) for r in result.lags):
        problems.append("a realized lag exceeds the push-count bound")
    if any(d.phase is Phase.TRAINING and d.ends_at <= state.slot for d in state.devices):
        problems.append("a training device is past its end slot")
    return problems


def arrival_sweep(
    rates: Sequence[float],
    cfg: SlotConfig,
    policies: Sequence[Policy],
    seed: int,
    trainer: TrainerConfig = TrainerConfig(),
) -> list[RunSummary]:
    if not rates:
        raise ValueError("rates must be non-empty")
    out = []
    for rate in rates:
        c = replace(cfg, arrival_prob=rate)
        for p in policies:
            out.append(run(c, p, seed, trainer).summary)
    return out


# -- CSV output -----------------------------------------------------------------


def summary_csv(summaries: Iterable[RunSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow(s.row())
    return buf.getvalue()


def slot_csv(metrics: Iterable[SlotMetrics]) -> str:
    """Per-slot rows; decisions and gaps are ``;``-joined per device."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SLOT_COLUMNS)
    for m in metrics:
        w.writerow(
            [
                m.slot,
                repr(m.total_energy_joules),
                repr(m.q_len),
                repr(m.h_len),
                ";".join(d.code() for d in m.decisions),
                ";".join(repr(g) for g in m.gaps),
                repr(m.global_loss),
                repr(m.global_accuracy),
            ]
        )
    return buf.getvalue()


def trace_csv(traces: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("slot", "device", "loss", "momentum_norm", "gap"))
    for r in traces:
        w.writerow([r.slot, r.device, repr(r.loss), repr(r.momentum_norm), repr(r.gap)])
    return buf.getvalue()
