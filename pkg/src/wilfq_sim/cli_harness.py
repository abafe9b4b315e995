"""Experiment configuration, matrix execution and CSV/summary output."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .env_model import ClientClass, ClientState, TransitionPair
from .policies import POLICY_NAMES
from .sim_engine import (
    Replication, RunResult, SimConfig, TaskConfig, aggregate_results, run_simulation, summarize_metric,
)
from .whittle_core import SubsidySet

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Base class for configuration problems; ``key`` names the culprit."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class UnknownKeyError(ConfigError):
    pass


class InvalidValueError(ConfigError):
    pass


class MissingFileError(ConfigError):
    pass


# --- value converters ---------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str):
    return None if text.strip().lower() in ("none", "auto", "") else float(text)


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def conv(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v
    return conv


def _matrix(text: str) -> np.ndarray:
    vals = _float_list(text)
    if len(vals) != 9:
        raise ValueError(f"expected 9 comma-separated entries, got {len(vals)}")
    return np.array(vals).reshape(3, 3)


def parse_seeds(text: str) -> list[int]:
    """``a..b`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(v) for v in text.split("..", 1))
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    seeds = [int(v) for v in text.split(",") if v.strip()]
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _policies(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in POLICY_NAMES]
    if bad:
        raise ValueError(f"unknown policy {bad[0]!r}; choose from {', '.join(POLICY_NAMES)}")
    if not names:
        raise ValueError("no policies given")
    return names


SIM_KEYS: dict[str, Callable] = {
    "budget": int, "discount": float, "lam": float, "alpha": float,
    "eta_exponent": float, "gamma_exponent": float, "latency_cap": _optional_float, "cap_factor": float,
    "max_rounds": int, "stop_at_threshold": _bool, "observability": _choice("oracle", "inferred"),
    "sharing": _choice("class", "client"), "subsidy_update": _choice("index", "all"),
    "eta_mode": _choice("round", "visit"), "shared_penalty": _bool, "carry_passive": _bool,
    "noise_power": float, "transmit_power": float, "base_seconds_per_sample": float, "seed": int,
    "subsidies": _float_list,
}
TASK_KEYS: dict[str, Callable] = {
    "n": int, "dim": int, "classes": int, "tau": float, "lr": float, "batch": int, "epochs": int,
    "cluster_spread": float, "center_scale": float, "n_test": int, "oracle_tol": float,
}
CLASS_KEYS: dict[str, Callable] = {
    "population": int, "capacity_low": float, "capacity_high": float, "bandwidth": float,
    "channel_gain_mean": float, "p_selected": _matrix, "p_unselected": _matrix,
}
EXPERIMENT_KEYS: dict[str, Callable] = {
    "policies": _policies, "tau": _float_list, "seeds": parse_seeds, "out": str, "workers": int,
}


@dataclass
class ExperimentSpec:
    base: SimConfig = field(default_factory=SimConfig)
    policies: list = field(default_factory=lambda: list(POLICY_NAMES))
    tau_values: list = field(default_factory=lambda: [0.1, 10.0])
    seeds: list = field(default_factory=lambda: list(range(5)))
    out_dir: Path = Path("results")
    workers: int = 1

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.validate()

    def validate(self) -> None:
        if not self.policies:
            raise ValueError("at least one policy is required")
        for p in self.policies:
            if p not in POLICY_NAMES:
                raise ValueError(f"unknown policy {p!r}")
        if not self.tau_values:
            raise ValueError("at least one tau value is required")
        if any(t <= 0 for t in self.tau_values):
            raise ValueError("tau values must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def cells(self) -> list[tuple[str, float]]:
        return [(p, t) for t in self.tau_values for p in self.policies]


def _read_pairs(path) -> list[tuple[int, str, str]]:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"config file not found: {p}")
    pairs = []
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((lineno, key, value))
    return pairs


def _convert(key: str, conv: Callable, value: str):
    try:
        return conv(value)
    except (ValueError, TypeError) as exc:
        raise InvalidValueError(f"invalid value for {key!r}: {exc}", key) from None


def _class_with(cls: ClientClass, field_name: str, value) -> ClientClass:
    if field_name in ("capacity_low", "capacity_high"):
        lo, hi = cls.capacity_range
        rng = (value, hi) if field_name == "capacity_low" else (lo, value)
        return dataclasses.replace(cls, capacity_range=rng)
    if field_name in ("p_selected", "p_unselected"):
        t = cls.transitions
        pair = TransitionPair(value, t.p_unselected) if field_name == "p_selected" \
            else TransitionPair(t.p_selected, value)
        return dataclasses.replace(cls, transitions=pair)
    return dataclasses.replace(cls, **{field_name: value})


def _apply(spec_parts: dict, key: str, value) -> None:
    """Fold one converted setting into the mutable pieces of a spec."""
    head, _, rest = key.partition(".")
    if head == "task":
        spec_parts["task"][rest] = value
    elif head == "experiment":
        spec_parts["experiment"][rest] = value
    elif head == "classes":
        cid, _, name = rest.partition(".")
        classes = spec_parts["classes"]
        classes[int(cid)] = _class_with(classes[int(cid)], name, value)
    else:
        spec_parts["sim"][key] = value


def _build(parts: dict) -> ExperimentSpec:
    sim = dict(parts["sim"])
    if "subsidies" in sim:
        sim["subsidies"] = SubsidySet(sim["subsidies"])
    task = TaskConfig(**parts["task"])
    base = SimConfig(classes=tuple(parts["classes"].values()), task=task, **sim)
    exp = dict(parts["experiment"])
    kwargs = {}
    if "policies" in exp:
        kwargs["policies"] = exp["policies"]
    if "tau" in exp:
        kwargs["tau_values"] = exp["tau"]
    if "seeds" in exp:
        kwargs["seeds"] = exp["seeds"]
    if "out" in exp:
        kwargs["out_dir"] = Path(exp["out"])
    if "workers" in exp:
        kwargs["workers"] = exp["workers"]
    return ExperimentSpec(base=base, **kwargs)


def _lookup(key: str) -> Callable:
    head, _, rest = key.partition(".")
    if head == "task" and rest in TASK_KEYS:
        return TASK_KEYS[rest]
    if head == "experiment" and rest in EXPERIMENT_KEYS:
        return EXPERIMENT_KEYS[rest]
    if head == "classes":
        cid, _, name = rest.partition(".")
        if cid.isdigit() and name in CLASS_KEYS:
            return CLASS_KEYS[name]
    if not rest and key in SIM_KEYS:
        return SIM_KEYS[key]
    raise UnknownKeyError(f"unknown config key {key!r}", key)


def _parse_pairs(pairs: Sequence[tuple[int, str, str]]) -> ExperimentSpec:
    parts = {"sim": {}, "task": {}, "experiment": {},
             "classes": {c.id: c for c in SimConfig().classes}}
    seen = set()
    for lineno, key, raw in pairs:
        conv = _lookup(key)
        if key in seen:
            raise InvalidValueError(f"line {lineno}: {key!r} set twice", key)
        seen.add(key)
        value = _convert(key, conv, raw)
        if key.startswith("classes."):
            cid = int(key.split(".")[1])
            if cid not in parts["classes"]:
                raise UnknownKeyError(f"unknown class id in {key!r}", key)
        try:
            _apply(parts, key, value)
            # validate incrementally so that the error names the key that broke it
            _build(parts)
        except ConfigError:
            raise
        except ValueError as exc:
            raise InvalidValueError(f"invalid value for {key!r}: {exc}", key) from None
    return _build(parts)


def parse_config(path) -> ExperimentSpec:
    """Read a flat ``key = value`` file with dotted prefixes (``task.tau``,
    ``classes.1.population``, ``experiment.policies``). Missing keys keep
    their defaults, so an empty file yields the default spec."""
    return _parse_pairs(_read_pairs(path))


# --- output ---------------------------------------------------------------------------

ROUND_HEADER = ("round", "cum_delay_s", "round_latency_s", "loss_gap", "full_loss", "test_acc", "n_selected",
                "n_included", "frac_normal", "frac_limited", "frac_busy", "explored")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{float(x):.9g}"


def write_round_csv(result: RunResult, path) -> None:
    if not result.records:
        raise ValueError("result has no rounds")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_HEADER)
        for r in result.records:
            hist = np.asarray(r.state_hist, dtype=float)
            frac = hist / hist.sum()
            w.writerow([fmt(r.round), fmt(r.cum_delay), fmt(r.round_latency), fmt(r.loss_gap), fmt(r.full_loss),
                        fmt(r.test_acc), fmt(len(r.selected)), fmt(len(r.included)),
                        fmt(frac[ClientState.NORMAL]), fmt(frac[ClientState.LIMITED]),
                        fmt(frac[ClientState.BUSY]), fmt(bool(r.explored))])


def write_aggregate_csv(rep: Replication, path) -> None:
    """Seed-averaged accuracy against cumulative delay on the shared grid."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("delay_s", "mean_test_acc"))
        for d, a in zip(rep.delay_grid, rep.mean_curve):
            w.writerow((fmt(d), fmt(a)))


def _tau_tag(tau: float) -> str:
    return f"{tau:g}"


def run_file(out_dir: Path, policy: str, tau: float, seed: int) -> Path:
    return out_dir / "runs" / f"{policy}_tau{_tau_tag(tau)}_seed{seed}.csv"


def cell_file(out_dir: Path, policy: str, tau: float) -> Path:
    return out_dir / "cells" / f"{policy}_tau{_tau_tag(tau)}.csv"


@dataclass
class SummaryRow:
    policy: str
    tau: float
    n_runs: int
    n_converged: int
    convergence_rate: float
    convergence_half_width: float
    mean_delay: float
    delay_half_width: float
    mean_rounds: float
    rounds_half_width: float
    mean_final_acc: float
    acc_half_width: float
    reduction_pct: float | None = None
    reduction_half_width: float | None = None


SUMMARY_HEADER = ("policy", "tau", "n_runs", "n_converged", "convergence_rate", "convergence_ci_hw",
                  "mean_delay_s", "delay_ci_hw_s", "mean_rounds", "rounds_ci_hw", "mean_final_acc", "acc_ci_hw",
                  "reduction_vs_ran_pct", "reduction_ci_hw_pct")


def _reduction(m: float, hw: float, m0: float, hw0: float) -> tuple[float, float]:
    """Percent reduction of ``m`` against ``m0`` with a first-order
    propagated half-width (the two cells are independent)."""
    red = 100.0 * (1.0 - m / m0)
    terms = [hw / m0, m * hw0 / m0 ** 2]
    half = 100.0 * math.sqrt(sum(t * t for t in terms)) if all(math.isfinite(t) for t in terms) else math.nan
    return red, half


def summarize(cells: Mapping[tuple[str, float], Replication]) -> list[SummaryRow]:
    """One row per (policy, tau). Delay and round counts average converged
    runs only; ``n_converged`` reports how many that was."""
    if not cells:
        raise ValueError("no cells to summarize")
    rows = []
    for (policy, tau), rep in cells.items():
        n = len(rep.results)
        conv = summarize_metric([float(r.converged) for r in rep.results])
        rows.append(SummaryRow(policy, tau, n, rep.n_converged, rep.n_converged / n, conv.half_width,
                               rep.total_delay.mean, rep.total_delay.half_width,
                               rep.rounds.mean, rep.rounds.half_width,
                               rep.final_accuracy.mean, rep.final_accuracy.half_width))
    for row in rows:
        base = cells.get(("ran", row.tau))
        if base is None:
            logger.warning("no RAN cell at tau=%g; reduction column left empty", row.tau)
            continue
        if base.total_delay.n == 0 or math.isnan(row.mean_delay):
            continue
        row.reduction_pct, row.reduction_half_width = _reduction(
            row.mean_delay, row.delay_half_width, base.total_delay.mean, base.total_delay.half_width)
    return rows


def write_summary_csv(rows: Sequence[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.policy, fmt(r.tau), fmt(r.n_runs), fmt(r.n_converged), fmt(r.convergence_rate),
                        fmt(r.convergence_half_width), fmt(r.mean_delay), fmt(r.delay_half_width),
                        fmt(r.mean_rounds), fmt(r.rounds_half_width), fmt(r.mean_final_acc),
                        fmt(r.acc_half_width), fmt(r.reduction_pct), fmt(r.reduction_half_width)])


def format_summary(rows: Sequence[SummaryRow]) -> str:
    lines = [f"{'policy':<7}{'tau':>6}{'conv':>7}{'delay_s':>12}{'+/-':>9}{'rounds':>9}{'+/-':>7}"
             f"{'acc':>7}{'vs RAN %':>10}"]
    for r in rows:
        red = "" if r.reduction_pct is None else f"{r.reduction_pct:.1f}"
        lines.append(f"{r.policy:<7}{r.tau:>6g}{r.n_converged:>4}/{r.n_runs:<2}{r.mean_delay:>12.2f}"
                     f"{r.delay_half_width:>9.2f}{r.mean_rounds:>9.1f}{r.rounds_half_width:>7.1f}"
                     f"{r.mean_final_acc:>7.3f}{red:>10}")
    return "\n".join(lines)


def _run_one(args):
    config, policy = args
    return run_simulation(config, policy)


def run_experiment(spec: ExperimentSpec) -> int:
    """Run every (policy, tau, seed), write per-run and per-cell CSVs and
    ``summary.csv`` under ``spec.out_dir``; returns 0 on success."""
    out = Path(spec.out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    jobs = [(spec.base.replace(task_tau=tau, seed=seed), policy)
            for policy, tau in spec.cells() for seed in spec.seeds]
    if spec.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            logger.info("running %s tau=%g seed=%d", job[1], job[0].task.tau, job[0].seed)
            results.append(_run_one(job))
    cells = {}
    it = iter(results)
    for policy, tau in spec.cells():
        runs = [next(it) for _ in spec.seeds]
        for seed, res in zip(spec.seeds, runs):
            write_round_csv(res, run_file(out, policy, tau, seed))
        rep = aggregate_results(runs)
        write_aggregate_csv(rep, cell_file(out, policy, tau))
        cells[(policy, tau)] = rep
    rows = summarize(cells)
    write_summary_csv(rows, out / "summary.csv")
    logger.info("summary:\n%s", format_summary(rows))
    return 0


__all__ = [
    "ConfigError", "UnknownKeyError", "InvalidValueError", "MissingFileError", "ExperimentSpec", "parse_config",
    "parse_seeds", "write_round_csv", "write_aggregate_csv", "write_summary_csv", "summarize", "SummaryRow",
    "format_summary", "run_experiment", "run_file", "cell_file", "ROUND_HEADER", "SUMMARY_HEADER",
]
