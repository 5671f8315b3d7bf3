"""Command-line experiment runner.

Config files are flat ``key = value`` TOML. Every key is optional; see
``ExperimentConfig`` for names, units and defaults.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import SlotConfig, load_device_table
from .sim import (
    ImmediateScheduling,
    OfflineKnapsack,
    Online,
    Policy,
    RunSummary,
    SyncSGD,
    TrainerConfig,
    check_invariants,
    policy_from_name,
    run,
    slot_csv,
    summary_csv,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # slot model
    slot_len: float = 1.0  # seconds per slot
    horizon: int = 10800  # slots
    n_users: int = 25
    arrival_prob: float = 0.001  # app arrivals per device per slot
    gap_increment: float | None = None  # gap units per idle slot; derived when unset
    staleness_bound: float = 500.0  # L_b, gap units per slot
    v_param: float = 4000.0
    # policies
    policies: tuple[str, ...] = ("online",)
    offline_window: int = 500  # slots
    offline_staleness_bound: float = 1000.0
    offline_resolution: float | None = None  # gap units; L_b / 1000 when unset
    # trainer
    lr: float = 0.005
    beta: float = 0.9
    batch_size: int = 20
    points_per_user: int = 1200  # training points per user
    reference_gap: float = 22.0  # gap units per average model update
    init_scale: float = 0.05  # std of the random initial parameters
    eval_every: int = 60  # slots
    cooldown: int = 0  # slots before a finished device is available again
    max_wait: int | None = None  # starvation guard, slots; off when unset
    # experiment
    seed: int = 0
    repeat: int = 1
    out: str = "results"
    per_slot: bool = False
    device_table: str = ""  # CSV path; bundled table when empty
    workers: int = 0  # sweep worker processes; 0 picks the CPU count
    # sweep axes
    v_values: tuple[float, ...] = ()
    lb_values: tuple[float, ...] = ()
    rates: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("policies", "v_values", "lb_values", "rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        try:
            self.slot_config()
            self.trainer_config()
            for p in self.policies:
                policy_from_name(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.policies:
            raise ConfigError("policies must be non-empty")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if self.offline_window < 1:
            raise ConfigError("offline_window must be >= 1")
        if not self.offline_staleness_bound > 0:
            raise ConfigError("offline_staleness_bound must be > 0")
        if any(v < 0 for v in self.v_values):
            raise ConfigError("v_values must be >= 0")
        if any(not lb > 0 for lb in self.lb_values):
            raise ConfigError("lb_values must be > 0")
        if any(not 0 <= r <= 1 for r in self.rates):
            raise ConfigError("arrival_prob out of [0,1] in rates")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")

    def slot_config(self) -> SlotConfig:
        return SlotConfig(
            slot_len=self.slot_len,
            horizon=self.horizon,
            n_users=self.n_users,
            arrival_prob=self.arrival_prob,
            gap_increment=self.gap_increment,
            staleness_bound=self.staleness_bound,
            v_param=self.v_param,
        )

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            lr=self.lr,
            beta=self.beta,
            batch_size=self.batch_size,
            points_per_user=self.points_per_user,
            reference_gap=self.reference_gap,
            init_scale=self.init_scale,
            eval_every=self.eval_every,
            cooldown=self.cooldown,
            max_wait=self.max_wait,
        )

    def has_sweep(self) -> bool:
        return bool(self.v_values or self.lb_values or self.rates)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TUPLES = {"policies": str, "v_values": float, "lb_values": float, "rates": float}
_OPTIONAL = {"gap_increment": float, "offline_resolution": float, "max_wait": int}


def _coerce(key: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def config_from_mapping(data: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in data.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: tables are not supported; use flat keys")
        if key in _TUPLES:
            if isinstance(value, str) and key == "policies":
                value = [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list")
            kwargs[key] = tuple(_coerce(key, v, _TUPLES[key]) for v in value)
        elif key in _OPTIONAL:
            kwargs[key] = _coerce(key, value, _OPTIONAL[key])
        else:
            default = _FIELDS[key].default
            kwargs[key] = _coerce(key, value, type(default))
    return ExperimentConfig(**kwargs)


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return config_from_mapping(data)


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    return "[" + ", ".join(_toml_value(v) for v in value) + "]"


def serialize_config(cfg: ExperimentConfig) -> str:
    """Flat TOML text that parses back to ``cfg``; unset optionals are omitted."""
    lines = []
    for key, value in asdict(cfg).items():
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


PRESETS: dict[str, tuple[str, dict]] = {
    "default": ("single run at the reference settings, all four policies", {
        "policies": ("online", "immediate", "offline", "sync"),
    }),
    "fig4a": ("energy against V for all four policies", {
        "policies": ("online", "immediate", "offline", "sync"),
        "v_values": (1e2, 1e3, 4e3, 1e4, 1e5),
    }),
    "fig4bc": ("queue and virtual-queue growth against V", {
        "policies": ("online",),
        "v_values": (1e3, 4e3, 1e4, 3e4, 1e5),
    }),
    "fig4d": ("energy against the staleness bound", {
        "policies": ("online",),
        "lb_values": (250.0, 500.0, 1000.0, 2000.0),
    }),
    "fig5": ("convergence traces with per-slot output", {
        "policies": ("online", "immediate", "sync"),
        "per_slot": True,
    }),
    "fig7a": ("energy against app arrival rate", {
        "policies": ("online", "immediate", "offline"),
        "rates": (1e-4, 1e-3, 1e-2, 0.05, 0.2),
    }),
}


def preset(name: str) -> ExperimentConfig:
    try:
        _, values = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ExperimentConfig(**values)


# -- running --------------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    policy: str
    v_param: float
    staleness_bound: float
    rate: float
    seed: int


def _policy_for(cfg: ExperimentConfig, job: Job) -> Policy:
    if job.policy == "online":
        return Online(v_param=job.v_param, staleness_bound=job.staleness_bound)
    if job.policy == "offline":
        return OfflineKnapsack(cfg.offline_window, cfg.offline_staleness_bound, cfg.offline_resolution)
    if job.policy == "immediate":
        return ImmediateScheduling()
    return SyncSGD()


def plan_jobs(cfg: ExperimentConfig, sweep: bool = True) -> list[Job]:
    """Every (policy, sweep point, seed); axes a policy ignores are collapsed."""
    vs = cfg.v_values if sweep and cfg.v_values else (cfg.v_param,)
    lbs = cfg.lb_values if sweep and cfg.lb_values else (cfg.staleness_bound,)
    rates = cfg.rates if sweep and cfg.rates else (cfg.arrival_prob,)
    seeds = [cfg.seed + k for k in range(cfg.repeat)]
    jobs = []
    for name in cfg.policies:
        if name == "online":
            points = itertools.product(vs, lbs, rates)
        else:
            points = ((math.nan, math.nan, r) for r in rates)
        for v, lb, r in points:
            jobs.extend(Job(name, v, lb, r, s) for s in seeds)
    return jobs


def _execute(args: tuple[ExperimentConfig, Job]) -> tuple[RunSummary, list[str], str | None]:
    cfg, job = args
    catalog = load_device_table(cfg.device_table or None)
    slot = replace(cfg.slot_config(), arrival_prob=job.rate)
    result = run(slot, _policy_for(cfg, job), job.seed, cfg.trainer_config(), catalog)
    per_slot = slot_csv(result.metrics) if cfg.per_slot else None
    return result.summary, check_invariants(result), per_slot


def _aggregate_rows(summaries: Sequence[RunSummary]) -> list[list[str]]:
    """Mean and stddev rows for every group of repeated seeds."""
    groups: dict[tuple, list[RunSummary]] = {}
    for s in summaries:
        groups.setdefault((s.policy, s.v_param, s.staleness_bound, s.rate), []).append(s)
    rows = []
    for group in groups.values():
        if len(group) < 2:
            continue
        head = group[0].row()[:4]
        numeric = [[float(x) if x != "" else math.nan for x in g.row()[5:]] for g in group]
        for label, fn in (("mean", statistics.fmean), ("std", statistics.stdev)):
            cols = []
            for col in zip(*numeric):
                vals = [v for v in col if not math.isnan(v)]
                cols.append(repr(fn(vals)) if len(vals) >= (2 if label == "std" else 1) else "")
            rows.append(head + [label] + cols)
    return rows


def headline(summaries: Sequence[RunSummary], v_param: float) -> list[str]:
    """Energy comparisons of online (at ``v_param``) against the other policies."""

    def mean_energy(name: str, v: float | None = None) -> float | None:
        xs = [
            s.total_energy_J
            for s in summaries
            if s.policy == name and (v is None or s.v_param == v) and s.rate == summaries[0].rate
        ]
        return statistics.fmean(xs) if xs else None

    online = mean_energy("online", v_param)
    if online is None:
        online = mean_energy("online")
    lines = []
    if online is None:
        return lines
    for name in ("immediate", "sync"):
        other = mean_energy(name)
        if other:
            lines.append(f"online vs {name}: {100.0 * (1.0 - online / other):.1f}% energy saved")
    offline = mean_energy("offline")
    if offline:
        lines.append(f"online / offline energy: {online / offline:.3f}")
    return lines


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from None


def run_experiment(cfg: ExperimentConfig, sweep: bool = False, stream=None) -> tuple[int, list[Path]]:
    """Run every job, write CSVs under ``cfg.out`` and print the headline."""
    stream = stream or sys.stdout
    out = Path(cfg.out)
    _check_writable(out)
    if sweep and not cfg.has_sweep():
        raise ConfigError("sweep needs at least one non-empty axis (v_values, lb_values, rates)")
    jobs = plan_jobs(cfg, sweep)
    tasks = [(cfg, j) for j in jobs]
    workers = cfg.workers or os.cpu_count() or 1
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_execute, tasks))
    else:
        results = [_execute(t) for t in tasks]

    summaries = [r[0] for r in results]
    files = []
    text = summary_csv(summaries)
    extra = _aggregate_rows(summaries)
    if extra:
        text += "".join(",".join(r) + "\n" for r in extra)
    path = out / "summary.csv"
    path.write_text(text)
    files.append(path)
    for job, (_, _, per_slot) in zip(jobs, results):
        if per_slot is not None:
            v = "" if math.isnan(job.v_param) else f"_V{job.v_param:g}"
            p = out / f"slots_{job.policy}{v}_rate{job.rate:g}_seed{job.seed}.csv"
            p.write_text(per_slot)
            files.append(p)

    failed = False
    for job, (_, problems, _) in zip(jobs, results):
        for msg in problems:
            failed = True
            print(f"invariant violated ({job.policy}, seed {job.seed}): {msg}", file=sys.stderr)
    for line in headline(summaries, cfg.v_param):
        print(line, file=stream)
    print(f"wrote {len(files)} file(s) to {out}", file=stream)
    return (1 if failed else 0), files


# -- entry point ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--preset", metavar="NAME")
    common.add_argument("--seed", type=int)
    common.add_argument("--repeat", type=int, metavar="K")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--per-slot", action="store_true", default=None)
    common.add_argument("--policy", metavar="NAME", help="policy name or comma-separated list")

    parser = argparse.ArgumentParser(prog="fedcorun", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every policy at a single point")
    sub.add_parser("sweep", parents=[common], help="run every policy across the sweep axes")
    sub.add_parser("validate", parents=[common], help="check a config and print it normalized")
    pre = sub.add_parser("presets", help="list presets or print one as a config file")
    pre.add_argument("name", nargs="?")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.repeat is not None:
        overrides["repeat"] = args.repeat
    if args.out is not None:
        overrides["out"] = args.out
    if args.per_slot:
        overrides["per_slot"] = True
    if args.policy:
        overrides["policies"] = tuple(p.strip() for p in args.policy.split(",") if p.strip())
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            if args.name:
                sys.stdout.write(serialize_config(preset(args.name)))
            else:
                for name, (desc, _) in PRESETS.items():
                    print(f"{name:8s} {desc}")
            return 0
        cfg = load_config(args)
        if args.command == "validate":
            sys.stdout.write(serialize_config(cfg))
            return 0
        status, _ = run_experiment(cfg, sweep=args.command == "sweep")
        return status
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
