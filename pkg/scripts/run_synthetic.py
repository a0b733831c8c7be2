"""Train CASS-NAT and the AT baseline on the shipped synthetic task, then benchmark them.

Usage: python3 scripts/run_synthetic.py [OUT_DIR] [--config PATH]

Writes OUT_DIR/nat, OUT_DIR/at (checkpoints and logs) and prints the latency
table. Expect roughly 20 minutes on a single core.
"""
import argparse
import sys
from pathlib import Path

from cassnat.cli import main
from cassnat.io import shipped_config


def run() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default="runs/synthetic")
    ap.add_argument("--config", default=str(shipped_config()))
    args = ap.parse_args()
    out = Path(args.out)
    steps = [
        ["train", "--config", args.config, "--out", str(out / "nat")],
        ["train", "--config", args.config, "--out", str(out / "at"), "--at-baseline"],
        ["bench", "--ckpt-nat", str(out / "nat" / "model.ckpt"), "--ckpt-at", str(out / "at" / "model.ckpt")],
    ]
    for argv in steps:
        print("$ cassnat " + " ".join(argv), flush=True)
        code = main(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
