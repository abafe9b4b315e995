"""Command-line entry point: ``simulate``, ``exact-index`` and ``validate``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .cli_harness import ConfigError, ExperimentSpec, format_summary, parse_config, parse_seeds, run_experiment
from .env_model import ClientState
from .policies import POLICY_NAMES
from .sim_engine import Simulation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("wilfq_sim")


def _configure_logging() -> None:
    name = os.environ.get("SIM_LOG", "error").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    if name not in LOG_LEVELS:
        log.error("SIM_LOG=%r not recognized; using 'error'", name)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wilfq-sim", description="Whittle-index client selection simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", help="run a policy x tau x seed matrix")
    sim.add_argument("--config", required=True)
    sim.add_argument("--policy", action="append", choices=POLICY_NAMES, help="repeatable; overrides the config")
    sim.add_argument("--tau", action="append", type=float, help="repeatable; overrides the config")
    sim.add_argument("--seeds", help="a..b (inclusive) or a comma list")
    sim.add_argument("--out")
    sim.add_argument("--workers", type=int)
    for name, text in (("exact-index", "print the exact index per (class, state)"),
                       ("validate", "check the config and exit")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True)
    return p


def _override(spec: ExperimentSpec, args) -> ExperimentSpec:
    changes = {}
    if args.policy:
        changes["policies"] = list(dict.fromkeys(args.policy))
    if args.tau:
        changes["tau_values"] = list(dict.fromkeys(args.tau))
    if args.seeds:
        try:
            changes["seeds"] = parse_seeds(args.seeds)
        except ValueError as exc:
            raise ConfigError(f"invalid --seeds: {exc}", "seeds") from None
    if args.out:
        changes["out_dir"] = args.out
    if args.workers is not None:
        changes["workers"] = args.workers
    try:
        return dataclasses.replace(spec, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def exact_index_table(spec: ExperimentSpec) -> str:
    sim = Simulation(spec.base, "ran")
    idx = sim.compute_exact_indices()
    lines = ["class,state,index"]
    for cid in sorted(sim.classes):
        for s in ClientState:
            lines.append(f"{cid},{s.name.lower()},{idx[(cid, s)]:.9g}")
    return "\n".join(lines)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        spec = parse_config(args.config)
        if args.command == "simulate":
            spec = _override(spec, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            print(f"ok: {len(spec.policies)} policies x {len(spec.tau_values)} tau x {len(spec.seeds)} seeds, "
                  f"{spec.base.n_clients} clients, budget {spec.base.budget}")
            return EXIT_OK
        if args.command == "exact-index":
            print(exact_index_table(spec))
            return EXIT_OK
        run_experiment(spec)
        print(open(spec.out_dir / "summary.csv").read() if log.isEnabledFor(logging.DEBUG) else
              f"wrote {spec.out_dir}")
        return EXIT_OK
    except Exception as exc:  # any failure past validation is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
