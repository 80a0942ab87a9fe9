"""Channel-pruning sweep on the reference toy model: rate vs params vs GFLOPs.

    python3 scripts/prune_sweep.py [--rates 0.1:0.9:0.1] [--seed 0] [--json out.json]
"""

import argparse
import json

from mrsyolo.cli import parse_rates, sweep
from mrsyolo.model import ModelConfig, build, count_flops


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="0.1:0.9:0.1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=("channel", "unstructured"), default="channel")
    ap.add_argument("--json")
    args = ap.parse_args()

    model = build(ModelConfig(), args.seed)
    base = count_flops(model)
    rows = sweep(model, parse_rates(args.rates), args.mode)
    print(f"{'rate':>5} {'achieved':>9} {'params':>10} {'GFLOPs':>8} {'params %':>9} {'FLOPs %':>8}")
    print(f"{0:>5} {0:>9.4f} {base.total_params:>10} {base.gflops:>8.4f} {100:>9.1f} {100:>8.1f}")
    for r in rows:
        print(f"{r['rate']:>5g} {r['achieved_rate']:>9.4f} {r['params']:>10} {r['gflops']:>8.4f} "
              f"{100 * r['params'] / base.total_params:>9.1f} {100 * r['flops'] / base.total_flops:>8.1f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"params_before": base.total_params, "flops_before": base.total_flops,
                       "rows": rows}, f, indent=2)


if __name__ == "__main__":
    main()
