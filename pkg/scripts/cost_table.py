#!/usr/bin/env python3
"""Parameter and FLOPs table for ResNet-110 with 1..L heads at each split point."""
import argparse

from spacte.model import cost_report, resnet110


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-heads", type=int, default=5)
    args = ap.parse_args()
    print(f"{'heads':>5} {'split':>5} {'params':>12} {'GFLOPs':>8} {'ratio':>7}")
    for split in (0, 1, 2, 3):
        for heads in range(1, args.max_heads + 1):
            rep = cost_report(resnet110(heads, split_stage=split))
            print(f"{heads:>5} {split:>5} {rep.params_total_multihead:>12,} "
                  f"{rep.flops_multihead / 1e9:>8.3f} {rep.flops_ratio:>7.3f}")
    print(f"\n{cost_report(resnet110(1)).convention}")


if __name__ == "__main__":
    main()
