"""Recompute the frozen lemma constants from null-adversary runs.

Usage: python3 scripts/calibrate.py [--seeds 10] [--epochs 50]
"""

import argparse
import json
from dataclasses import asdict

from popstab.analysis import EpochRecorder, calibrate
from popstab.core import validate_and_derive
from popstab.engine import RunConfig, Simulation

CALIBRATION_SEED_BASE = 1000


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--n-target", default="2^16")
    args = ap.parse_args()
    params = validate_and_derive({"n_target": args.n_target, "gamma": 1, "adversary_budget": 0, "alpha": "0.1"})
    summaries = []
    for k in range(args.seeds):
        cfg = RunConfig(params, seed=CALIBRATION_SEED_BASE + k, max_rounds=args.epochs * params.epoch_length)
        summaries += Simulation(cfg, EpochRecorder()).run().summaries
    print(json.dumps(asdict(calibrate(summaries, params)), indent=2))


if __name__ == "__main__":
    main()
