"""Command-line front end: ``popstab run|sweep|verify|baselines``.

Exit codes: 0 ok, 1 population left the allowed interval, 2 config error,
3 adversary exceeded its budget, 4 verification failed.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import EpochRecorder, LemmaTolerances, check_lemmas, lemma_report, summaries_csv
from .battery import CHECKS, BatteryOptions, run_battery
from .config import build_run_config, grid_axes, load_values
from .core import ConfigError
from .engine import Simulation, SimulationResult, thread_count, write_run_outputs

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_VERIFY = 4

log = logging.getLogger("popstab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, action="append", help="master seed (repeatable)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    length = p.add_mutually_exclusive_group()
    length.add_argument("--rounds", type=int)
    length.add_argument("--epochs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="popstab", description="Population stability protocol simulator.")
    sub = ap.add_subparsers(dest="verb", required=True)
    _common(sub.add_parser("run", help="run one simulation per seed"))
    sweep = sub.add_parser("sweep", help="run a parameter grid")
    _common(sweep)
    sweep.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    verify = sub.add_parser("verify", help="run the verification battery")
    _common(verify)
    verify.add_argument("--only", action="append", choices=sorted(CHECKS), help="run only these checks")
    base = sub.add_parser("baselines", help="compare the naive protocols with the main one")
    _common(base)
    base.add_argument("--variant", choices=("attempt1", "attempt2", "all"), default="all")
    return ap


def _seeds(args, values) -> list[int | None]:
    return list(args.seed) if args.seed else [None]


def _execute(cfg) -> SimulationResult:
    return Simulation(cfg, EpochRecorder()).run()


def _status(result: SimulationResult) -> int:
    if result.aborted:
        return EXIT_BUDGET
    if result.first_violation_round is not None:
        return EXIT_VIOLATION
    return EXIT_OK


def _write(result: SimulationResult, out: Path, stem: str) -> None:
    write_run_outputs(result, out, stem)
    echo = result.config.echo()
    (out / f"{stem}_epochs.csv").write_text(summaries_csv(result.summaries, echo))
    tol = LemmaTolerances(null_adversary=result.config.strategy == "null")
    if result.config.protocol == "main":
        report = check_lemmas(result.trajectory, result.summaries, result.config.params, tol)
        (out / f"{stem}_lemmas.json").write_text(lemma_report(report, echo))


def cmd_run(args) -> int:
    values = load_values(args.config, args.overrides)
    threads = thread_count(0) or None
    worst = EXIT_OK
    for seed in _seeds(args, values):
        cfg = build_run_config(values, seed, args.rounds, args.epochs, threads)
        result = _execute(cfg)
        stem = f"run_seed{cfg.seed}"
        _write(result, args.out, stem)
        code = _status(result)
        print(
            f"seed={cfg.seed} rounds={len(result.trajectory)} final_size={result.population.size} "
            f"first_violation_round={result.first_violation_round} exit={code}"
        )
        if result.aborted:
            print(result.aborted, file=sys.stderr)
        worst = max(worst, code, key=_severity)
    return worst


def _severity(code: int) -> int:
    return {EXIT_OK: 0, EXIT_VIOLATION: 1, EXIT_BUDGET: 2}.get(code, 3)


SWEEP_COLUMNS = ("runs", "failures", "violation_rate", "mean_first_violation_round", "mean_abs_drift")


def cmd_sweep(args) -> int:
    values = load_values(args.config, args.overrides)
    axes = grid_axes(values, args.grid)
    if not axes:
        raise ConfigError("sweep needs at least one grid axis (grid.KEY = a,b or --grid KEY=a,b)")
    base = {k: v for k, v in values.items() if not k.startswith("grid.")}
    keys = list(axes)
    threads = thread_count(0) or None
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    worst = EXIT_OK
    for point in itertools.product(*(axes[k] for k in keys)):
        point_values = {**base, **dict(zip(keys, point))}
        label = "_".join(f"{k}-{v}".replace("/", "_") for k, v in zip(keys, point))
        violations, firsts, drifts, failures, runs = 0, [], [], 0, 0
        for seed in _seeds(args, values):
            runs += 1
            try:
                cfg = build_run_config(point_values, seed, args.rounds, args.epochs, threads)
                result = _execute(cfg)
            except ConfigError as exc:
                failures += 1
                log.error("grid point %s: %s", label, exc)
                continue
            _write(result, args.out, f"{label}_seed{cfg.seed}")
            if result.aborted:
                failures += 1
                worst = EXIT_BUDGET
                continue
            if result.first_violation_round is not None:
                violations += 1
                firsts.append(result.first_violation_round)
            drifts += [abs(s.drift) for s in result.summaries]
        completed = runs - failures
        rows.append(
            dict(zip(keys, point))
            | {
                "runs": runs,
                "failures": failures,
                "violation_rate": violations / completed if completed else "",
                "mean_first_violation_round": float(np.mean(firsts)) if firsts else "",
                "mean_abs_drift": float(np.mean(drifts)) if drifts else "",
            }
        )
        print(json.dumps(rows[-1]))
    with open(args.out / "sweep.csv", "w", newline="") as fh:
        fh.write(f"# popstab-sweep/1 base={json.dumps(base, sort_keys=True)} seeds={_seeds(args, values)}\n")
        writer = csv.DictWriter(fh, fieldnames=keys + list(SWEEP_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    return worst


def cmd_verify(args) -> int:
    values = load_values(args.config, args.overrides)
    opts = BatteryOptions(mutation=values.get("mutation", "none"))
    if args.seed:
        opts = replace(opts, seeds=tuple(args.seed))
    results = run_battery(opts, args.only, progress=lambda r: print(r.line(), flush=True))
    args.out.mkdir(parents=True, exist_ok=True)
    report = {"mutation": opts.mutation, "options": asdict(opts), "config": values, "checks": [r.as_json() for r in results]}
    (args.out / "verify_report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_baselines(args) -> int:
    values = load_values(args.config, args.overrides)
    variants = ["attempt1", "attempt2"] if args.variant == "all" else [args.variant]
    threads = thread_count(0) or None
    worst = EXIT_OK
    for protocol in variants + ["main"]:
        for seed in _seeds(args, values):
            cfg = build_run_config({**values, "protocol": protocol}, seed, args.rounds, args.epochs, threads)
            result = _execute(cfg)
            _write(result, args.out, f"{protocol}_seed{cfg.seed}")
            sizes = [o.population_size for o in result.trajectory]
            print(
                f"{protocol:9s} seed={cfg.seed} rounds={len(sizes)} min={min(sizes)} max={max(sizes)} "
                f"final={sizes[-1]} first_violation_round={result.first_violation_round}"
            )
            if result.aborted:
                worst = EXIT_BUDGET
    return worst


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "baselines": cmd_baselines}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
