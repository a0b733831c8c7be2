"""Decode-latency table for two checkpoints over a range of output lengths.

Usage: python3 scripts/bench_decoding.py NAT_CKPT AT_CKPT [--lengths 10,25,50,100] [--repeats 5]
"""
import argparse
import sys

from cassnat.cli import main


def run() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("nat")
    ap.add_argument("at")
    ap.add_argument("--lengths", default="10,25,50,100")
    ap.add_argument("--repeats", default="5")
    args = ap.parse_args()
    return main(["bench", "--ckpt-nat", args.nat, "--ckpt-at", args.at,
                 "--lengths", args.lengths, "--repeats", args.repeats])


if __name__ == "__main__":
    sys.exit(run())
