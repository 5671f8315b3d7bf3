"""Domain types and per-slot dynamics shared by every scheduler.

A device is in one of four power states per slot, selected by the control
action (schedule training or stay idle) and whether a foreground app is
running. Queue updates follow the max-plus recurrences for the task backlog
``Q`` and the virtual staleness queue ``H``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable


class Action(enum.Enum):
    SCHEDULE = "schedule"
    IDLE = "idle"


class AppStatus(enum.Enum):
    APP = "app"
    NO_APP = "no_app"


@dataclass(frozen=True)
class Decision:
    """Control action joined with the app status it was taken under."""

    action: Action
    app_status: AppStatus

    @property
    def scheduled(self) -> bool:
        return self.action is Action.SCHEDULE

    @property
    def app(self) -> bool:
        return self.app_status is AppStatus.APP

    def code(self) -> str:
        """Two-letter code used in CSV output, e.g. ``SA`` for co-running."""
        return ("S" if self.scheduled else "I") + ("A" if self.app else "N")

    @classmethod
    def of(cls, schedule: bool, app: bool) -> "Decision":
        return _DECISIONS[(schedule, app)]


_DECISIONS = {
    (s, a): Decision(
        Action.SCHEDULE if s else Action.IDLE, AppStatus.APP if a else AppStatus.NO_APP
    )
    for s in (True, False)
    for a in (True, False)
}

CORUN = Decision.of(True, True)
TRAIN = Decision.of(True, False)
APP_ONLY = Decision.of(False, True)
IDLE = Decision.of(False, False)


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    """Power levels (W) of one device running one app, plus its training time.

    ``p_train`` and ``p_idle`` belong to the device; ``p_app`` and ``p_corun``
    are specific to the app. ``train_duration`` is in whole slots.
    """

    id: int
    p_corun: float
    p_train: float
    p_app: float
    p_idle: float
    train_duration: int
    device: str = ""
    app: str = ""

    def __post_init__(self):
        for name in ("p_corun", "p_train", "p_app", "p_idle"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ProfileError(f"{name} must be positive and finite, got {value}")
        # Both schedule states must cost more than their idle counterpart, and
        # co-running is the most expensive state. The measured table does not
        # order p_app against p_train/p_idle consistently, so that is not required.
        if not self.p_corun > self.p_app:
            raise ProfileError(f"p_corun ({self.p_corun}) must exceed p_app ({self.p_app})")
        if not self.p_corun > self.p_train:
            raise ProfileError(f"p_corun ({self.p_corun}) must exceed p_train ({self.p_train})")
        if not self.p_train > self.p_idle:
            raise ProfileError(f"p_train ({self.p_train}) must exceed p_idle ({self.p_idle})")
        if self.train_duration < 1:
            raise ProfileError("train_duration must be at least one slot")

    @property
    def fully_ordered(self) -> bool:
        """True when p_corun > p_app > p_train > p_idle holds."""
        return self.p_corun > self.p_app > self.p_train > self.p_idle


@dataclass(frozen=True)
class AppEvent:
    device: int
    start: int
    duration: int
    app: str = ""

    def __post_init__(self):
        if self.start < 0:
            raise ValueError("app start must be >= 0")
        if self.duration < 1:
            raise ValueError("app duration must be >= 1 slot")

    @property
    def end(self) -> int:
        """First slot after the app has stopped."""
        return self.start + self.duration

    def active_at(self, slot: int) -> bool:
        return self.start <= slot < self.end


@dataclass(frozen=True)
class QueueState:
    q: float = 0.0
    h: float = 0.0

    def __post_init__(self):
        if self.q < 0 or self.h < 0:
            raise ValueError(f"queues must be non-negative, got q={self.q}, h={self.h}")

    @property
    def empty(self) -> bool:
        return self.q == 0 and self.h == 0


@dataclass(frozen=True)
class SlotConfig:
    """Slot length (s), horizon (slots), fleet size and controller knobs."""

    slot_len: float = 1.0
    horizon: int = 10800
    n_users: int = 25
    arrival_prob: float = 0.001
    gap_increment: float | None = None
    staleness_bound: float = 500.0
    v_param: float = 4000.0

    def __post_init__(self):
        if not self.slot_len > 0:
            raise ValueError("slot_len must be > 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.n_users < 0:
            raise ValueError("n_users must be >= 0")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ValueError("arrival_prob out of [0,1]")
        if self.gap_increment is not None and self.gap_increment < 0:
            raise ValueError("gap_increment must be >= 0")
        if not self.staleness_bound > 0:
            raise ValueError("staleness_bound must be > 0")
        if self.v_param < 0:
            raise ValueError("v_param must be >= 0")


def power_of(profile: DeviceProfile, decision: Decision, slot_len: float) -> float:
    """Energy in joules drawn by ``profile`` over one slot under ``decision``."""
    if decision.scheduled:
        watts = profile.p_corun if decision.app else profile.p_train
    else:
        watts = profile.p_app if decision.app else profile.p_idle
    return watts * slot_len


def service_rate(decision: Decision) -> int:
    return 1 if decision.scheduled else 0


def energy_saving(profile: DeviceProfile) -> float:
    """Watts saved by co-running instead of running app and training apart.

    Can be negative; schedulers treat such pairs as never worth co-running.
    """
    return profile.p_train + profile.p_app - profile.p_corun


def update_queues(
    state: QueueState,
    arrivals: float,
    served: float,
    gap_sum: float,
    staleness_bound: float,
) -> QueueState:
    if min(arrivals, served, gap_sum, staleness_bound) < 0:
        raise ValueError("queue inputs must be non-negative")
    q = max(state.q - served, 0.0) + arrivals
    h = max(state.h + gap_sum - staleness_bound, 0.0)
    return QueueState(float(q), float(h))


# -- device table -------------------------------------------------------------

TABLE_COLUMNS = (
    "device",
    "app",
    "p_app",
    "p_corun",
    "p_train",
    "p_idle",
    "train_seconds",
    "corun_seconds",
    "idle_estimated",
)


@dataclass(frozen=True)
class TableRow:
    device: str
    app: str
    p_app: float
    p_corun: float
    p_train: float
    p_idle: float
    train_seconds: float
    corun_seconds: float
    idle_estimated: bool


def slots_for(seconds: float, slot_len: float) -> int:
    """Whole slots covering ``seconds`` (rounded up, at least one)."""
    return max(1, math.ceil(seconds / slot_len - 1e-9))


class DeviceCatalog:
    """The device/app power table, indexed by device model then app."""

    def __init__(self, rows: Iterable[TableRow]):
        self.rows = list(rows)
        self.devices: list[str] = []
        self.apps: list[str] = []
        self._by_key: dict[tuple[str, str], TableRow] = {}
        for row in self.rows:
            if row.device not in self.devices:
                self.devices.append(row.device)
            if row.app not in self.apps:
                self.apps.append(row.app)
            self._by_key[(row.device, row.app)] = row
            # Validates the power ordering; raises ProfileError on bad rows.
            self.profile(0, row.device, row.app)
        for device in self.devices:
            per_device = {(r.p_train, r.p_idle, r.train_seconds) for r in self.rows if r.device == device}
            if len(per_device) != 1:
                raise ProfileError(f"{device}: p_train, p_idle and train_seconds must not vary by app")
            missing = [a for a in self.apps if (device, a) not in self._by_key]
            if missing:
                raise ProfileError(f"{device} lacks rows for apps {missing}")

    def row(self, device: str, app: str) -> TableRow:
        return self._by_key[(device, app)]

    def profile(self, idx: int, device: str, app: str, slot_len: float = 1.0) -> DeviceProfile:
        row = self._by_key[(device, app)]
        return DeviceProfile(
            id=idx,
            p_corun=row.p_corun,
            p_train=row.p_train,
            p_app=row.p_app,
            p_idle=row.p_idle,
            train_duration=slots_for(row.train_seconds, slot_len),
            device=device,
            app=app,
        )

    def app_slots(self, device: str, app: str, slot_len: float = 1.0) -> int:
        return slots_for(self._by_key[(device, app)].corun_seconds, slot_len)


def parse_device_table(text: str) -> DeviceCatalog:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    if tuple(reader.fieldnames or ()) != TABLE_COLUMNS:
        raise ValueError(f"device table columns must be {TABLE_COLUMNS}, got {reader.fieldnames}")
    rows = []
    for i, rec in enumerate(reader, start=1):
        try:
            rows.append(
                TableRow(
                    device=rec["device"],
                    app=rec["app"],
                    p_app=float(rec["p_app"]),
                    p_corun=float(rec["p_corun"]),
                    p_train=float(rec["p_train"]),
                    p_idle=float(rec["p_idle"]),
                    train_seconds=float(rec["train_seconds"]),
                    corun_seconds=float(rec["corun_seconds"]),
                    idle_estimated=rec["idle_estimated"].strip() == "1",
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"device table record {i}: {exc}") from None
    return DeviceCatalog(rows)


def load_device_table(path: str | None = None) -> DeviceCatalog:
    """Load the power table from ``path``, or the bundled one if omitted."""
    if path is None:
        text = resources.files("fedcorun.data").joinpath("device_table.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_device_table(text)


# -- app arrival traces -------------------------------------------------------


class AppTimeline:
    """Candidate app arrivals of one device, replayed in slot order.

    An arrival that lands while another app is still running is dropped; a
    device runs at most one foreground app. ``end`` is the first slot after
    the currently running app (``<= slot`` when none is running).
    """

    def __init__(self, events: Iterable[AppEvent]):
        self.events = sorted(events, key=lambda e: e.start)
        self.ptr = 0
        self.end = 0
        self.current: AppEvent | None = None

    def advance(self, slot: int) -> AppEvent | None:
        """Move to ``slot`` and return the app running in it, if any."""
        while self.ptr < len(self.events) and self.events[self.ptr].start <= slot:
            ev = self.events[self.ptr]
            self.ptr += 1
            if ev.start >= self.end:
                self.current = ev
                self.end = ev.end
        if self.end > slot:
            return self.current
        return None

    def active(self, slot: int) -> bool:
        return self.end > slot

    def peek(self, slot: int) -> AppEvent | None:
        """App running at ``slot`` (>= the current slot), without mutating."""
        end, current = self.end, self.current
        for ev in self.events[self.ptr :]:
            if ev.start > slot:
                break
            if ev.start >= end:
                current, end = ev, ev.end
        return current if end > slot else None

    def truncate(self, end: int) -> None:
        """Make the running app stop at ``end`` (co-running ends with training)."""
        self.end = end

    def next_active(self, begin: int, stop: int) -> int | None:
        """First slot in ``[begin, stop)`` with an app running, without mutating.

        Assumes no truncation happens before ``begin``.
        """
        end = self.end
        ptr = self.ptr
        events = self.events
        while ptr < len(events) and events[ptr].start < begin:
            ev = events[ptr]
            if ev.start >= end:
                end = ev.end
            ptr += 1
        if end > begin:
            return begin if begin < stop else None
        while ptr < len(events) and events[ptr].start < stop:
            if events[ptr].start >= end:
                return events[ptr].start
            ptr += 1
        return None


def sample_app_trace(
    rng,
    horizon: int,
    arrival_prob: float,
    apps: list[str],
    duration_of,
    device: int = 0,
) -> list[AppEvent]:
    """Bernoulli(arrival_prob) candidate arrivals per slot, app drawn uniformly.

    ``duration_of(app)`` gives the app's run time in slots.
    """
    if horizon <= 0 or arrival_prob <= 0:
        return []
    hits = (rng.random(horizon) < arrival_prob).nonzero()[0]
    picks = rng.integers(0, len(apps), size=len(hits))
    return [
        AppEvent(device, int(t), duration_of(apps[k]), apps[k]) for t, k in zip(hits, picks)
    ]
