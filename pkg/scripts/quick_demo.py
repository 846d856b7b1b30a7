"""Minute-scale smoke demo on a tiny custom environment.

Simulates a 6x4 m room with two APs, trains a one-layer model on it, and
prints the evaluation table. Useful as a first run after install.
"""

import json
import sys
import tempfile
from pathlib import Path

from locaris.cli import main as locaris

MICRO = {
    "name": "demo", "width": 6.0, "height": 4.0, "n_aps": 2,
    "ap_positions": [[0.0, 0.0], [6.0, 4.0]], "regime": "los",
    "path_loss_exponent": 2.0, "samples_per_rp": 4, "grid_spacing": 0.8,
}

if __name__ == "__main__":
    work = Path(tempfile.mkdtemp(prefix="locaris_demo_"))
    sim_cfg = work / "simulate.json"
    sim_cfg.write_text(json.dumps({
        "kind": "simulate", "output_dir": str(work / "sim"),
        "custom_environments": [MICRO],
    }))
    if locaris(["simulate", str(sim_cfg)]) != 0:
        sys.exit("simulate failed")

    datasets = work / "sim" / "datasets"
    run_cfg = work / "train.json"
    run_cfg.write_text(json.dumps({
        "kind": "train", "output_dir": str(work / "train"),
        "dataset": {"train": str(datasets / "demo_train.csv"),
                    "test": str(datasets / "demo_test.csv"), "name": "demo"},
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
        "train": {"lr": 0.002, "batch_size": 16, "epochs": 10},
    }))
    if locaris(["run", str(run_cfg)]) != 0:
        sys.exit("train failed")
    locaris(["report", str(work / "train")])
    print(f"\nartifacts under {work}")
