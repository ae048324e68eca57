#!/usr/bin/env python3
"""Train, certify and analyze the desk-scale blobs configuration end to end.

    python3 scripts/desk_run.py [--config configs/desk_blobs.cfg] [--workers 1]

Artifacts land in the config's ``run.output_dir``.
"""
import argparse
import sys
from pathlib import Path

from spacte import cli
from spacte.certify import read_records
from spacte.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_blobs.cfg"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--threshold", type=float, default=None, help="easy/hard radius split (default: median radius)")
    args = ap.parse_args()

    out = Path(load_config(args.config)["run.output_dir"])
    ckpt = out / "checkpoints" / "final.ckpt"
    steps = [["train", args.config], ["certify", args.config, str(ckpt), "--workers", str(args.workers)]]
    for argv in steps:
        print("$ spacte", " ".join(argv))
        if (code := cli.main(argv)) != 0:
            return code

    tsv = out / "certify.tsv"
    radii = sorted(r.radius for r in read_records(tsv))
    threshold = args.threshold if args.threshold is not None else radii[len(radii) // 2]
    for argv in (["analyze", str(tsv), str(ckpt), "--mode", "gap-histogram", "--draws", "10000"],
                 ["analyze", str(tsv), str(ckpt), "--mode", "easy-hard", "--threshold", f"{threshold:.3f}"]):
        print("$ spacte", " ".join(argv))
        if (code := cli.main(argv)) != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
