"""Offline co-run scheduling as a 0/1 knapsack over gradient-gap budget.

Every user in an instance can either train as soon as it is available
(``x = 0``) or wait for a known app arrival and co-run (``x = 1``), which
saves ``s_i`` watts. Co-running user ``i`` costs its estimated gradient gap,
computed from an upper bound on how many other updates can land while it
trains. The total gap of co-running users must stay within ``L_b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import AppEvent, AppTimeline
from .gradient import ModelState, gradient_gap

BRUTE_FORCE_MAX_USERS = 20


@dataclass(frozen=True)
class OfflineUser:
    begin: int
    app_start: int
    duration: int
    saving: float
    model: ModelState
    device: int = -1

    def __post_init__(self):
        if self.app_start < self.begin:
            raise ValueError(f"app_start ({self.app_start}) precedes begin ({self.begin})")
        if self.duration < 1:
            raise ValueError("duration must be >= 1 slot")
        if not math.isfinite(self.saving):
            raise ValueError("saving must be finite")

    @property
    def finish_alone(self) -> int:
        return self.begin + self.duration

    @property
    def finish_corun(self) -> int:
        return self.app_start + self.duration


@dataclass(frozen=True)
class OfflineInstance:
    users: tuple[OfflineUser, ...]
    staleness_bound: float
    gap_scale: float = 1.0  # gap units per unit of parameter-space L2 norm

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))

    @property
    def n(self) -> int:
        return len(self.users)

    def gaps(self) -> list[float]:
        """Per-user gap at the closed-interval lag upper bound, in gap units."""
        return [
            self.gap_scale * gradient_gap(u.model, lag_upper_bound(self, i))
            for i, u in enumerate(self.users)
        ]

    def savings(self) -> list[float]:
        return [u.saving for u in self.users]


@dataclass(frozen=True)
class OfflineSolution:
    decisions: tuple[int, ...]
    total_saving: float
    gap_total: float

    @classmethod
    def empty(cls) -> "OfflineSolution":
        return cls((), 0.0, 0.0)


def lag_upper_bound(instance: OfflineInstance, user: int) -> int:
    """Count of other users that could finish inside either of ``user``'s
    possible training intervals (closed on both ends)."""
    if not 0 <= user < instance.n:
        raise IndexError(f"user {user} out of range")
    me = instance.users[user]
    spans = (
        (me.begin, me.begin + me.duration),
        (me.app_start, me.app_start + me.duration),
    )

    def inside(t: int) -> bool:
        return any(lo <= t <= hi for lo, hi in spans)

    return sum(
        1
        for j, other in enumerate(instance.users)
        if j != user and (inside(other.finish_corun) or inside(other.finish_alone))
    )


def replay_lags(instance: OfflineInstance, decisions: Sequence[int]) -> list[int]:
    """Realized lag of every user when the instance is executed with ``decisions``.

    Each user pulls when it starts training and pushes when it ends; its lag
    is the number of other pushes between its pull and its push, endpoints
    included.
    """
    if len(decisions) != instance.n:
        raise ValueError("one decision per user required")
    starts = [u.app_start if x else u.begin for u, x in zip(instance.users, decisions)]
    pushes = sorted(s + u.duration for s, u in zip(starts, instance.users))
    lags = []
    for s, u in zip(starts, instance.users):
        f = s + u.duration
        upto_finish = int(np.searchsorted(pushes, f, side="right"))
        before_pull = int(np.searchsorted(pushes, s, side="left"))
        lags.append(upto_finish - before_pull - 1)  # minus own push
    return lags


def _validate_capacity(capacity: float) -> None:
    if not capacity > 0:
        raise ValueError(f"staleness bound must be > 0, got {capacity}")


def solve_knapsack(
    savings: Sequence[float],
    gaps: Sequence[float],
    capacity: float,
    resolution: float | None = None,
) -> OfflineSolution:
    """Tabulated 0/1 knapsack on a discretized gap axis, with back-tracing.

    Gaps are rounded up to whole cells of ``resolution`` (default
    ``capacity / 1000``) and the capacity rounded down, so the returned
    selection never exceeds ``capacity`` in real-valued gap.
    """
    _validate_capacity(capacity)
    if resolution is None:
        resolution = capacity / 1000.0
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    n = len(savings)
    if len(gaps) != n:
        raise ValueError("savings and gaps differ in length")
    cells = int(math.floor(capacity / resolution + 1e-9))
    weights = [math.ceil(g / resolution - 1e-9) for g in gaps]

    table = np.zeros((n + 1, cells + 1))
    take = np.zeros((n + 1, cells + 1), dtype=bool)
    for i in range(1, n + 1):
        s, w = savings[i - 1], weights[i - 1]
        prev = table[i - 1]
        row = prev.copy()
        if s > 0 and w <= cells:
            cand = prev[: cells + 1 - w] + s
            better = cand > prev[w:]
            row[w:][better] = cand[better]
            take[i, w:] = better
        table[i] = row

    decisions = [0] * n
    y = cells
    for i in range(n, 0, -1):
        if take[i, y]:
            decisions[i - 1] = 1
            y -= weights[i - 1]
    return _solution(decisions, savings, gaps)


def _solution(decisions: Sequence[int], savings: Sequence[float], gaps: Sequence[float]) -> OfflineSolution:
    chosen = [i for i, x in enumerate(decisions) if x]
    return OfflineSolution(
        tuple(int(x) for x in decisions),
        math.fsum(savings[i] for i in chosen),
        math.fsum(gaps[i] for i in chosen),
    )


def brute_force_knapsack(savings: Sequence[float], gaps: Sequence[float], capacity: float) -> OfflineSolution:
    """Exact optimum by enumerating every subset.

    Ties resolve to the lexicographically smallest decision vector.
    """
    n = len(savings)
    if n > BRUTE_FORCE_MAX_USERS:
        raise ValueError(f"brute force supports at most {BRUTE_FORCE_MAX_USERS} users, got {n}")
    if n == 0:
        return OfflineSolution.empty()
    # Row m is the decision vector whose bits, first user most significant,
    # spell m; ascending m is ascending lexicographic order.
    masks = np.arange(2**n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(bool)
    total_gap = bits @ np.asarray(gaps, dtype=float)
    value = bits @ np.asarray(savings, dtype=float)
    value[total_gap > capacity] = -np.inf
    best = int(np.argmax(value))
    return _solution(bits[best].astype(int).tolist(), savings, gaps)


def knapsack_dp(instance: OfflineInstance, resolution: float | None = None) -> OfflineSolution:
    _validate_capacity(instance.staleness_bound)
    if instance.n == 0:
        return OfflineSolution.empty()
    return solve_knapsack(instance.savings(), instance.gaps(), instance.staleness_bound, resolution)


def brute_force_offline(instance: OfflineInstance) -> OfflineSolution:
    if instance.n > BRUTE_FORCE_MAX_USERS:
        raise ValueError(f"brute force supports at most {BRUTE_FORCE_MAX_USERS} users, got {instance.n}")
    return brute_force_knapsack(instance.savings(), instance.gaps(), instance.staleness_bound)


# -- rolling windows ----------------------------------------------------------


@dataclass
class PlannedStart:
    device: int
    slot: int
    corun: bool


@dataclass
class WindowPlan:
    start: int
    stop: int
    instance: OfflineInstance
    solution: OfflineSolution
    starts: list[PlannedStart] = field(default_factory=list)


def plan_window(
    start: int,
    stop: int,
    available: Sequence[int | None],
    timelines: Sequence[AppTimeline],
    durations: Sequence[int],
    saving_of: Callable[[int, int], float],
    models: Sequence[ModelState],
    staleness_bound: float,
    resolution: float | None = None,
    gap_scale: float = 1.0,
) -> WindowPlan:
    """Build and solve the instance for window ``[start, stop)``.

    ``available[i]`` is the slot device ``i`` can next start training
    (``None`` when it is busy past the window). Devices with no app running
    at any point between their availability and ``stop`` are left out and
    keep waiting. ``saving_of(device, slot)`` is the co-run saving for the
    app that is running on ``device`` at ``slot``.
    """
    users = []
    for dev, avail in enumerate(available):
        if avail is None or avail >= stop:
            continue
        begin = max(avail, start)
        app_at = timelines[dev].next_active(begin, stop)
        if app_at is None:
            continue
        users.append(OfflineUser(begin, app_at, durations[dev], saving_of(dev, app_at), models[dev], dev))
    instance = OfflineInstance(tuple(users), staleness_bound, gap_scale)
    solution = knapsack_dp(instance, resolution)
    starts = [
        PlannedStart(u.device, u.app_start if x else u.begin, bool(x))
        for u, x in zip(users, solution.decisions)
    ]
    return WindowPlan(start, stop, instance, solution, starts)


def rolling_offline(
    trace: Iterable[AppEvent],
    durations: Sequence[int],
    saving_of: Callable[[int, str], float],
    models: Sequence[ModelState],
    horizon: int,
    window: int,
    staleness_bound: float,
    resolution: float | None = None,
    gap_scale: float = 1.0,
) -> list[WindowPlan]:
    """Plan the whole horizon window by window with full knowledge of app arrivals.

    Devices start available at slot 0 and become available again as soon as
    their planned training ends. ``saving_of(device, app_name)`` gives the
    per-watt co-run saving.
    """
    n = len(durations)
    if n and window < max(durations):
        raise ValueError("window must be at least the longest training duration")
    per_device: list[list[AppEvent]] = [[] for _ in range(n)]
    for ev in trace:
        per_device[ev.device].append(ev)
    timelines = [AppTimeline(evs) for evs in per_device]
    available: list[int] = [0] * n
    plans = []
    for w0 in range(0, horizon, window):
        stop = min(w0 + window, horizon)

        def saving_at(dev: int, slot: int) -> float:
            return saving_of(dev, timelines[dev].peek(slot).app)

        plan = plan_window(
            w0, stop, available, timelines, durations, saving_at, models,
            staleness_bound, resolution, gap_scale,
        )
        for ps in plan.starts:
            tl = timelines[ps.device]
            tl.advance(ps.slot)
            end = ps.slot + durations[ps.device]
            if ps.corun:
                tl.truncate(end)
            available[ps.device] = end
        plans.append(plan)
    return plans


# -- serialization ------------------------------------------------------------


def instance_to_dict(instance: OfflineInstance) -> dict:
    return {
        "staleness_bound": instance.staleness_bound,
        "gap_scale": instance.gap_scale,
        "users": [
            {
                "device": u.device,
                "begin": u.begin,
                "app_start": u.app_start,
                "duration": u.duration,
                "saving": u.saving,
                "lr": u.model.lr,
                "beta": u.model.beta,
                "theta": u.model.theta.tolist(),
                "momentum": u.model.momentum.tolist(),
            }
            for u in instance.users
        ],
    }


def instance_from_dict(data: dict) -> OfflineInstance:
    users = tuple(
        OfflineUser(
            begin=u["begin"],
            app_start=u["app_start"],
            duration=u["duration"],
            saving=u["saving"],
            model=ModelState(np.array(u["theta"]), np.array(u["momentum"]), u["lr"], u["beta"]),
            device=u.get("device", -1),
        )
        for u in data["users"]
    )
    return OfflineInstance(users, data["staleness_bound"], data.get("gap_scale", 1.0))


def solution_to_dict(solution: OfflineSolution) -> dict:
    return {
        "decisions": list(solution.decisions),
        "total_saving": solution.total_saving,
        "gap_total": solution.gap_total,
    }


def solution_from_dict(data: dict) -> OfflineSolution:
    return OfflineSolution(tuple(data["decisions"]), data["total_saving"], data["gap_total"])


def dumps(instance: OfflineInstance, solution: OfflineSolution | None = None) -> str:
    """JSON text holding an instance and, optionally, its solution."""
    doc = {"instance": instance_to_dict(instance)}
    if solution is not None:
        doc["solution"] = solution_to_dict(solution)
    return json.dumps(doc, indent=2, sort_keys=True)


def loads(text: str) -> tuple[OfflineInstance, OfflineSolution | None]:
    doc = json.loads(text)
    sol = doc.get("solution")
    return instance_from_dict(doc["instance"]), (solution_from_dict(sol) if sol else None)
