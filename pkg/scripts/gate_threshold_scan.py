"""Fraction of activations the SRU gate marks informative, per threshold.

Runs the toy model on random inputs and reports, for each head level, the
share of elements with W1 = 1.  Useful for picking a threshold that keeps
both masks populated.

    python3 scripts/gate_threshold_scan.py [--thresholds 0,0.2,0.4,0.5,0.6,0.8] [--seed 0]
"""

import argparse

import numpy as np

from mrsyolo.head import SRU
from mrsyolo.model import ModelConfig, build
from mrsyolo.rng import SplitMix64
from mrsyolo.tensor import Tensor, no_grad


def main():
    ap = argparse.ArgumentParser(description="SRU gate occupancy per threshold")
    ap.add_argument("--thresholds", default="0,0.2,0.4,0.5,0.6,0.8")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch", type=int, default=2)
    args = ap.parse_args()

    model = build(ModelConfig(), args.seed)
    srus = [(n, m) for n, m in model.named_modules() if isinstance(m, SRU)]
    feats = {}
    for name, sru in srus:
        orig = sru.forward

        def capture(x, _name=name, _orig=orig):
            feats[_name] = x
            return _orig(x)
        sru.forward = capture
    h, w = model.config.input_size
    x = Tensor(SplitMix64(args.seed + 1).normal((args.batch, 3, h, w)))
    with no_grad():
        model(x)

    thresholds = [float(t) for t in args.thresholds.split(",")]
    print(f"{'threshold':>9} " + " ".join(f"{n.split('.')[2]:>8}" for n, _ in srus))
    for t in thresholds:
        cells = []
        for name, sru in srus:
            sru.threshold = t
            cells.append(f"{np.mean(sru.gate(feats[name])):>8.3f}")
        print(f"{t:>9g} " + " ".join(cells))


if __name__ == "__main__":
    main()
