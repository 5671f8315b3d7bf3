"""Drift-plus-penalty controller for deferring training to app co-runs.

Each waiting device compares, for its own app status, the per-slot cost

    V * energy(decision) - Q * served(decision) + H * gap(decision)

of scheduling against idling, using only the shared backlog snapshot
``(Q, H)``, its own momentum vector and the lag estimate the server sends
back. The server sums the outcomes and advances both queues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Action,
    Decision,
    DeviceProfile,
    QueueState,
    power_of,
    service_rate,
    update_queues,
)
from .gradient import ModelState, gradient_gap


@dataclass(frozen=True)
class ControllerConfig:
    v_param: float = 4000.0
    staleness_bound: float = 500.0
    gap_increment: float = 0.0
    slot_len: float = 1.0

    def __post_init__(self):
        if self.v_param < 0:
            raise ValueError("v_param must be >= 0")
        if not self.staleness_bound > 0:
            raise ValueError("staleness_bound must be > 0")
        if self.gap_increment < 0:
            raise ValueError("gap_increment must be >= 0")
        if not self.slot_len > 0:
            raise ValueError("slot_len must be > 0")


def objective_term(
    device: DeviceProfile,
    decision: Decision,
    queues: QueueState,
    gap_if: float,
    cfg: ControllerConfig,
) -> float:
    """One device's share of the drift-plus-penalty bound under ``decision``."""
    return (
        cfg.v_param * power_of(device, decision, cfg.slot_len)
        - queues.q * service_rate(decision)
        + queues.h * gap_if
    )


def decide(
    device: DeviceProfile,
    app_active: bool,
    queues: QueueState,
    model: ModelState,
    lag_if_scheduled: int,
    prev_gap: float,
    cfg: ControllerConfig,
    gap_scale: float = 1.0,
) -> Decision:
    """Pick the action with the smaller objective.

    On an exact tie the device trains if there is any backlog (matching the
    ``>=`` of the closed-form thresholds) and idles otherwise.
    """
    schedule = Decision.of(True, app_active)
    idle = Decision.of(False, app_active)
    gap_s = gap_scale * gradient_gap(model, lag_if_scheduled)
    gap_i = prev_gap + cfg.gap_increment
    cost_s = objective_term(device, schedule, queues, gap_s, cfg)
    cost_i = objective_term(device, idle, queues, gap_i, cfg)
    if cost_s < cost_i or (cost_s == cost_i and not queues.empty):
        return schedule
    return idle


def threshold_decide(
    device: DeviceProfile,
    app_active: bool,
    queues: QueueState,
    cfg: ControllerConfig,
    sched_gap: float = 0.0,
    idle_gap: float = 0.0,
) -> Decision:
    """Closed-form version of :func:`decide`.

    With ``H = 0`` a device trains once ``Q`` reaches ``V t_d`` times the extra
    power training costs in its current app state. With ``H > 0`` the backlog
    is credited with ``H`` times the gap avoided by training now
    (``idle_gap - sched_gap``). ``sched_gap`` and ``idle_gap`` are the gaps
    each action would leave, in the same units as ``H``.
    """
    if app_active:
        extra = device.p_corun - device.p_app
    else:
        extra = device.p_train - device.p_idle
    threshold = cfg.v_param * cfg.slot_len * extra
    if queues.h == 0:
        go = queues.q >= threshold and queues.q > 0
    else:
        go = queues.q + queues.h * (idle_gap - sched_gap) >= threshold
    return Decision.of(go, app_active)


# -- server side ----------------------------------------------------------------


@dataclass(frozen=True)
class DurationReport:
    """Device -> server: how long the device's next training would take."""

    device_id: int
    duration: int


@dataclass(frozen=True)
class LagReply:
    """Server -> device: updates expected to land while it would train."""

    device_id: int
    lag: int


@dataclass(frozen=True)
class DecisionReport:
    """Device -> server: the chosen action and the gap it leaves.

    Carries the action only; app status never leaves the device.
    """

    device_id: int
    action: Action
    gap: float


class TaskRegistry:
    """In-flight training tasks keyed by device, with expected completion slot."""

    def __init__(self):
        self._completion: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._completion)

    def add(self, device: int, completes_at: int) -> None:
        self._completion[device] = completes_at

    def remove(self, device: int) -> None:
        self._completion.pop(device, None)

    def completions(self) -> list[int]:
        return list(self._completion.values())

    def lag_estimate(self, duration: int, now: int) -> int:
        """In-flight tasks completing within ``[now, now + duration]``."""
        hi = now + duration
        return sum(1 for c in self._completion.values() if now <= c <= hi)


def lag_estimate(registry: TaskRegistry, duration: int, now: int) -> int:
    return registry.lag_estimate(duration, now)


def server_step(
    decisions: Sequence[Decision],
    gaps: Sequence[float],
    queues: QueueState,
    arrivals: float,
    cfg: ControllerConfig,
) -> QueueState:
    served = sum(service_rate(d) for d in decisions)
    return update_queues(queues, arrivals, served, math.fsum(gaps), cfg.staleness_bound)


@dataclass
class DriftDiagnostics:
    """Realized maxima of arrivals, services and summed gaps, and the bound
    constant ``B`` built from them, plus the per-slot minimized objective."""

    staleness_bound: float
    a_max: float = 0.0
    b_max: float = 0.0
    g_max: float = 0.0
    objective: list[float] = field(default_factory=list)

    def observe(self, arrivals: float, served: float, gap_sum: float, objective: float) -> None:
        self.a_max = max(self.a_max, arrivals)
        self.b_max = max(self.b_max, served)
        self.g_max = max(self.g_max, gap_sum)
        self.objective.append(objective)

    @property
    def b_constant(self) -> float:
        return 0.5 * (self.a_max**2 + self.b_max**2 + self.g_max**2 + self.staleness_bound**2)


class ParameterServer:
    """Holds ``Q``, ``H`` and the task registry; answers lag queries and
    folds each slot's decision reports into the queues."""

    def __init__(self, cfg: ControllerConfig):
        self.cfg = cfg
        self.queues = QueueState()
        self.registry = TaskRegistry()
        self.diagnostics = DriftDiagnostics(cfg.staleness_bound)
        self.now = 0
        self._reports: list[DecisionReport] = []
        self._arrived: set[int] = set()

    def snapshot(self) -> QueueState:
        return self.queues

    def arrive(self, device_id: int) -> None:
        """A device became available for training this slot."""
        self._arrived.add(device_id)

    def request_lag(self, msg: DurationReport) -> LagReply:
        return LagReply(msg.device_id, self.registry.lag_estimate(msg.duration, self.now))

    def report(self, msg: DecisionReport) -> None:
        self._reports.append(msg)

    def end_slot(self, extra_gaps: Sequence[float] = (), objective: float = 0.0) -> QueueState:
        """Advance the queues with this slot's reports.

        A device that arrived and was scheduled in the same slot is counted
        neither as an arrival nor as served. ``extra_gaps`` holds the gaps of
        devices that did not decide this slot (mid-training).
        """
        started = {r.device_id for r in self._reports if r.action is Action.SCHEDULE}
        arrivals = len(self._arrived - started)
        served = len(started - self._arrived)
        gap_sum = math.fsum([r.gap for r in self._reports] + list(extra_gaps))
        self.queues = update_queues(self.queues, arrivals, served, gap_sum, self.cfg.staleness_bound)
        self.diagnostics.observe(arrivals, served, gap_sum, objective)
        self._reports = []
        self._arrived = set()
        self.now += 1
        return self.queues


# -- trade-off report ---------------------------------------------------------


@dataclass(frozen=True)
class Theorem1Row:
    v_param: float
    mean_power: float
    mean_queue: float


@dataclass(frozen=True)
class Theorem1Report:
    rows: tuple[Theorem1Row, ...]
    power_fit: tuple[float, float]  # (c1, c2) in power ~ c1 + c2 / V
    queue_slope: float  # log-log slope of mean queue vs V over the largest three V
    power_nonincreasing: bool


def theorem1_report(
    runs: Mapping[float, Sequence[tuple[float, float]]],
    noise_band: float = 0.02,
) -> Theorem1Report:
    """Summarize a V-sweep. ``runs[V]`` lists ``(mean_power, mean_queue)`` per
    seed; seeds are averaged. Power counts as non-increasing if each point is
    at most ``1 + noise_band`` times the previous one."""
    if len(runs) < 3:
        raise ValueError("need at least three values of V")
    rows = []
    for v in sorted(runs):
        pts = np.asarray(runs[v], dtype=float)
        rows.append(Theorem1Row(float(v), float(pts[:, 0].mean()), float(pts[:, 1].mean())))
    vs = np.array([r.v_param for r in rows])
    power = np.array([r.mean_power for r in rows])
    queue = np.array([r.mean_queue for r in rows])
    design = np.column_stack([np.ones_like(vs), 1.0 / np.maximum(vs, 1e-300)])
    (c1, c2), *_ = np.linalg.lstsq(design, power, rcond=None)
    tail = slice(-3, None)
    if np.all(queue[tail] > 0) and np.all(vs[tail] > 0):
        slope = float(np.polyfit(np.log(vs[tail]), np.log(queue[tail]), 1)[0])
    else:
        slope = float("nan")
    nonincreasing = bool(np.all(power[1:] <= power[:-1] * (1.0 + noise_band)))
    return Theorem1Report(tuple(rows), (float(c1), float(c2)), slope, nonincreasing)


def log_log_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
