#!/usr/bin/env python3
"""End-to-end toy pipeline: train both backbones, fit exit heads, sample,
profile exits, and benchmark. Runs in a few minutes on one CPU core.

Usage: python scripts/toy_pipeline.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from duodiff.cli import main as cli


def run(out_dir: str) -> None:
    cfg_text = f"""
seed = 0
out_dir = {out_dir}
data.image_size = 16
data.count = 1024
schedule.T = 200
schedule.beta_start = 5e-4
schedule.beta_end = 0.1
model.full.num_layers = 6
model.shallow.num_layers = 2
train.steps = 600
train.batch_size = 16
train.warmup_steps = 50
adadiff.steps = 400
adadiff.batch_size = 16
sampler.t_s = 60
"""
    cfg_path = Path(out_dir) / "toy.cfg"
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(cfg_text)
    args = ["--config", str(cfg_path)]

    steps = [
        ["train", *args, "--role", "full"],
        ["train", *args, "--role", "shallow"],
        ["train-adadiff", *args, "--backbone", f"{out_dir}/full.ckpt"],
        ["sample", *args, "--full", f"{out_dir}/full.ckpt",
         "--shallow", f"{out_dir}/shallow.ckpt", "-n", "64"],
        ["profile-exits", *args, "--adadiff", f"{out_dir}/adadiff.ckpt",
         "--thetas", "0.05,0.07,0.09", "-n", "64"],
        ["bench", *args, "--full", f"{out_dir}/full.ckpt",
         "--shallow", f"{out_dir}/shallow.ckpt",
         "--adadiff", f"{out_dir}/adadiff.ckpt",
         "--ts-list", "0,60,80,100", "--runs", "3", "--batch-size", "8"],
    ]
    for argv in steps:
        print(f"\n$ duodiff {' '.join(argv)}")
        rc = cli(argv)
        if rc != 0:
            sys.exit(rc)
    print(f"\nall artifacts in {out_dir}/")


if __name__ == "__main__":
    run(sys.argv[1] if len(sys.argv) > 1 else
        tempfile.mkdtemp(prefix="duodiff_toy_"))
