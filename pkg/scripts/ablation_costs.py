"""Parameter and FLOP cost of each substitution, alone and combined.

M = MAKDF bottlenecks in the C3k2 stages, R = re-calibration neck,
S = ScConv in front of the detection head.  Accuracy needs training and is
not reported; this table is the structural half of an ablation.

    python3 scripts/ablation_costs.py [--widths 24 48 96 192] [--size 64]
"""

import argparse
import itertools

from mrsyolo.model import ModelConfig, build, count_flops


def main():
    ap = argparse.ArgumentParser(description="cost of each substitution")
    ap.add_argument("--widths", type=int, nargs=4, default=(24, 48, 96, 192))
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--classes", type=int, default=4)
    args = ap.parse_args()

    print(f"{'M':>2} {'R':>2} {'S':>2} {'params':>10} {'GFLOPs':>9}")
    for m, r, s in itertools.product((False, True), repeat=3):
        cfg = ModelConfig(widths=tuple(args.widths), num_classes=args.classes,
                          input_size=(args.size, args.size), variant="baseline",
                          makdf=m, rcfpn=r, sc_detect=s)
        rep = count_flops(build(cfg))
        mark = lambda v: "x" if v else "."
        print(f"{mark(m):>2} {mark(r):>2} {mark(s):>2} {rep.total_params:>10} {rep.gflops:>9.4f}")


if __name__ == "__main__":
    main()
