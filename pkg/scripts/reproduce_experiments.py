"""Run every study end to end: simulate, transfer, ablations, quantization.

Each stage is one `locaris run` on a checked-in config. Expect roughly an
hour on one CPU core; the few-shot transfer sweep dominates. Results land
under runs/<study>/results.csv with manifests for exact re-runs.

Usage: python scripts/reproduce_experiments.py [--only fewshot,quantize]
"""

import argparse
import sys
import time
from pathlib import Path

from locaris.cli import main as locaris

ROOT = Path(__file__).resolve().parent.parent
STAGES = ("simulate", "fewshot", "telemetry_ablation", "ap_ablation", "quantize")


def run_stage(name: str) -> None:
    cfg = ROOT / "configs" / f"{name}.json"
    command = "simulate" if name == "simulate" else "run"
    t0 = time.time()
    code = locaris([command, str(cfg)])
    minutes = (time.time() - t0) / 60.0
    if code != 0:
        sys.exit(f"{name} failed with exit code {code}")
    print(f"[{name}] done in {minutes:.1f} min")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--only", help="comma-separated stage subset")
    args = parser.parse_args()
    picked = args.only.split(",") if args.only else list(STAGES)
    unknown = set(picked) - set(STAGES)
    if unknown:
        sys.exit(f"unknown stages: {sorted(unknown)}; choose from {STAGES}")
    for stage in picked:
        run_stage(stage)
