"""Command-line driver: build, summarize, gradcheck, prune, sweep, eval, run."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evalkit, fileio
from .gradcheck import BLOCKS, check_block
from .head import decode_detections
from .model import ConfigError, ModelConfig, build, count_flops
from .prune import ChannelPruner, apply_masks, unstructured_prune
from .tensor import Tensor, no_grad


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MRS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CLIError(f"MRS_SEED must be an integer, got {env!r}") from None


def _emit(obj, as_json: bool, text: str) -> None:
    print(json.dumps(obj, indent=2) if as_json else text)


def parse_rates(text: str) -> list:
    """``start:stop:step`` (inclusive stop) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise CLIError(f"bad --rates {text!r}; use start:stop:step or a comma list") from None


# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    cfg = ModelConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            try:
                cfg = ModelConfig.from_json(json.load(f))
            except json.JSONDecodeError as e:
                raise CLIError(f"{args.config}: invalid JSON ({e})") from None
    model = build(cfg, _seed(args))
    fileio.save_checkpoint(model, args.out)
    print(f"wrote {args.out}: {model.num_params()} parameters")
    return 0


def cmd_summarize(args) -> int:
    model = fileio.load_checkpoint(args.ckpt)
    report = count_flops(model, tuple(args.input_size) if args.input_size else None)
    _emit(report.to_json(), args.json, report.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    res = check_block(args.block, _seed(args) or 1, args.tol)
    obj = {"block": args.block, "tol": args.tol, "passed": res.passed,
           "max_rel_error": res.max_error,
           "checks": [{"name": c.name, "n": c.n_checked, "rel_error": c.rel_error}
                      for c in res.checks]}
    lines = [f"{c.name:<48} n={c.n_checked:<3} rel_err={c.rel_error:.3e}" for c in res.checks]
    lines.append(f"{args.block}: {'PASS' if res.passed else 'FAIL'} "
                 f"(max rel error {res.max_error:.3e}, tol {args.tol:g})")
    _emit(obj, args.json, "\n".join(lines))
    return 0 if res.passed else 1


def _prune_once(model, rate, mode, pruner=None, tolerance=None):
    if mode == "unstructured":
        plan = unstructured_prune(model, rate)
        return apply_masks(model, plan), plan
    pruner = pruner or ChannelPruner(model)
    return pruner.prune(rate, tolerance)


def cmd_prune(args) -> int:
    model = fileio.load_checkpoint(args.ckpt)
    new, plan = _prune_once(model, args.rate, args.mode, tolerance=args.tolerance)
    flops_before = count_flops(model).total_flops
    flops_after = count_flops(new).total_flops if args.mode == "channel" else flops_before
    fileio.save_checkpoint(new, args.out)
    if args.plan:
        with open(args.plan, "w", encoding="utf-8") as f:
            json.dump(plan.to_json(), f)
    obj = {"mode": args.mode, "rate": args.rate, "achieved_rate": plan.achieved_rate,
           "params_before": plan.params_before, "params_after": plan.params_after,
           "flops_before": flops_before, "flops_after": flops_after}
    text = (f"params: {plan.params_before} -> {plan.params_after}\n"
            f"FLOPs:  {flops_before} -> {flops_after}\n"
            f"achieved rate: {plan.achieved_rate:.4f} (requested {args.rate:g})")
    _emit(obj, args.json, text)
    return 0


def sweep(model, rates, mode: str = "channel") -> list:
    """Rows of (rate, achieved, params, flops, gflops) for each requested rate."""
    pruner = ChannelPruner(model) if mode == "channel" else None
    rows = []
    for r in rates:
        new, plan = _prune_once(model, r, mode, pruner)
        flops = count_flops(new).total_flops
        with no_grad():
            h, w = model.config.input_size
            outs = new(Tensor(np.zeros((1, 3, h, w))))
        finite = all(np.all(np.isfinite(t.data)) for lvl in outs for t in lvl)
        rows.append({"rate": r, "achieved_rate": plan.achieved_rate,
                     "params": plan.params_after, "flops": flops, "gflops": flops / 1e9,
                     "finite": bool(finite)})
    return rows


def cmd_sweep(args) -> int:
    model = fileio.load_checkpoint(args.ckpt)
    rows = sweep(model, parse_rates(args.rates), args.mode)
    obj = {"mode": args.mode, "params_before": model.num_params(),
           "flops_before": count_flops(model).total_flops, "rows": rows}
    lines = [f"{'rate':>6} {'achieved':>9} {'params':>10} {'GFLOPs':>10}",
             f"{'0':>6} {0.0:>9.4f} {obj['params_before']:>10} {obj['flops_before'] / 1e9:>10.4f}"]
    lines += [f"{r['rate']:>6g} {r['achieved_rate']:>9.4f} {r['params']:>10} {r['gflops']:>10.4f}"
              for r in rows]
    _emit(obj, args.json, "\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    preds = fileio.read_records(args.preds, require_score=True)
    gts = fileio.read_records(args.gts, require_score=False)
    summary = evalkit.evaluate(preds, gts)
    thresholds = evalkit.COCO_THRESHOLDS if args.coco_range else (args.iou,)
    res = evalkit.mean_ap(preds, gts, thresholds)
    summary["ap_thresholds"] = list(thresholds)
    summary["class_ap"] = {str(c): float(np.mean(v)) for c, v in res.ap.items()}
    summary["map"] = res.map
    label = "AP50:95" if args.coco_range else f"AP@{args.iou:g}"
    lines = [f"{'class':>6} {'P':>8} {'R':>8} {label:>10}"]
    for row in summary["classes"]:
        c = row["class_id"]
        lines.append(f"{c:>6} {row['precision']:>8.4f} {row['recall']:>8.4f} "
                     f"{summary['class_ap'][str(c)]:>10.4f}")
    lines.append(f"P {summary['precision']:.4f}  R {summary['recall']:.4f}  "
                 f"mAP50 {summary['map50']:.4f}  mAP50:95 {summary['map50_95']:.4f}")
    if summary["skipped_classes"]:
        lines.append(f"skipped (no ground truth): {summary['skipped_classes']}")
    _emit(summary, args.json, "\n".join(lines))
    return 0


def cmd_run(args) -> int:
    model = fileio.load_checkpoint(args.ckpt)
    x = fileio.load_tensor(args.input)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise CLIError(f"{args.input}: expected a rank-3 or rank-4 tensor, got rank {x.ndim}")
    with no_grad():
        outs = model(Tensor(x))
    dets = decode_detections([o[0] for o in outs], [o[1] for o in outs], model.strides,
                             args.conf, args.nms)
    fileio.write_records(dets, args.out)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrsyolo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", help="build and initialize a model checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("summarize", help="parameter and FLOP table")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check of a block")
    s.add_argument("--block", required=True, choices=BLOCKS)
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("prune", help="prune a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--mode", choices=("channel", "unstructured"), default="channel")
    s.add_argument("--out", required=True)
    s.add_argument("--plan")
    s.add_argument("--tolerance", type=float,
                   help="fail if the achieved rate differs from --rate by more than this")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("sweep", help="rate vs params vs GFLOPs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rates", default="0.1:0.9:0.1")
    s.add_argument("--mode", choices=("channel", "unstructured"), default="channel")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("eval", help="precision, recall, AP and mAP")
    s.add_argument("--preds", required=True)
    s.add_argument("--gts", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--iou", type=float, default=0.5)
    g.add_argument("--coco-range", action="store_true")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="forward and decode a tensor file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--conf", type=float, default=0.25)
    s.add_argument("--nms", type=float, default=0.65)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        msg = str(e)
    except (CLIError, OSError, ValueError, KeyError) as e:
        msg = str(e) if not isinstance(e, KeyError) else f"missing key {e}"
    msg = " ".join(msg.split())
    print(f"error: {msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
