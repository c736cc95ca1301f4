"""Command line harness.

Subcommands: describe, verify-cost, gradcheck, bench, train-toy.
Exit codes: 0 success, 1 verification failure (reconcile mismatch, inequality
violation, gradcheck over tolerance, NaN loss), 2 usage or config errors.
The default seed comes from S2A_SEED; an explicit --seed wins.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from . import costs
from .backbone import (VARIANTS, ORDERED_VARIANTS, VariantConfig, build_variant,
                       synthetic_blobs, train_toy)
from .bench import CSV_HEADER, bench_attention
from .errors import NumericError, S2AError, ConfigError
from .gradcheck import module_gradcheck
from .rng import DATA_STREAM, DROPOUT_STREAM, RngStream
from .tensor import DTYPES


def _resolve_seed(value):
    if value is not None:
        return value
    env = os.environ.get("S2A_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError("S2A_SEED must be an integer, got %r" % env) from None


def _resolve_config(args):
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("cannot read config: %s" % exc) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config is not valid JSON: %s" % exc) from None
        return VariantConfig.from_dict(raw)
    name = args.variant
    if name not in VARIANTS:
        raise ConfigError("unknown variant %r (have: %s)"
                          % (name, ", ".join(sorted(VARIANTS))))
    return VARIANTS[name]


def _group(n):
    return "{:,}".format(n)


def cmd_describe(args):
    config = _resolve_config(args)
    model = build_variant(config, seed=_resolve_seed(args.seed))
    report = costs.build_cost_report(model, args.res)
    shapes = model.pyramid_shapes((args.res, args.res))
    stage_nodes = [m for m in report.modules if m["name"].startswith("stage")]

    stages = []
    for cfg, (c, h, w), node in zip(config.stages, shapes, stage_nodes):
        stages.append({"channels": cfg.channels, "blocks": cfg.blocks,
                       "sr_ratio": cfg.sr_ratio, "heads": cfg.heads,
                       "mlp_ratio": cfg.mlp_ratio, "tokens": h * w,
                       "params": node["params"], "macs": node["macs"]})

    if args.format == "json":
        payload = {"variant": config.name, "res": args.res,
                   "params": report.params, "macs": report.macs, "stages": stages}
        if args.layers:
            payload["modules"] = report.to_json_dict()["modules"]
        print(json.dumps(payload, indent=2))
        return 0

    print("variant %s  res %d  params %s  macs %s"
          % (config.name, args.res, _group(report.params), _group(report.macs)))
    print("%-7s %8s %7s %3s %6s %5s %8s %12s %14s"
          % ("stage", "channels", "blocks", "sr", "heads", "mlp", "tokens", "params", "macs"))
    for i, s in enumerate(stages):
        print("%-7s %8d %7d %3d %6d %5.1f %8d %12s %14s"
              % ("stage%d" % (i + 1), s["channels"], s["blocks"], s["sr_ratio"],
                 s["heads"], s["mlp_ratio"], s["tokens"],
                 _group(s["params"]), _group(s["macs"])))
    if args.layers:
        print()
        print(report.to_text())
    return 0


def cmd_verify_cost(args):
    if getattr(args, "config", None) or args.variant != "all":
        configs = [_resolve_config(args)]
    else:
        configs = [VARIANTS[name] for name in ORDERED_VARIANTS]

    failed = False
    saw_k1 = False
    for config in configs:
        for i, fi in enumerate(costs.stage_formula_inputs(config, args.res)):
            rec = costs.reconcile_ssa(fi, sr_mode=config.sr_mode)
            ineq = costs.verify_inequality(fi)
            ok = rec.holds and ineq.holds
            failed = failed or not ok
            saw_k1 = saw_k1 or fi.k == 1
            print("%-5s stage%d n=%-5d d=%-4d h=%d k=%d  formula=%-12d counted=%-12d "
                  "reconcile=%s  ssa<=A<mhsa=%s%s"
                  % (config.name, i + 1, fi.n, fi.d, fi.h, fi.k,
                     rec.formula, rec.counted,
                     "ok" if rec.holds else "FAIL",
                     "ok" if ineq.holds else "FAIL",
                     "" if ineq.strict else " (not strict)"))
    if saw_k1:
        print("warning: k=1 stages use the degenerate bound; chain is not strict there",
              file=sys.stderr)
    return 1 if failed else 0


def cmd_gradcheck(args):
    results = module_gradcheck(args.module, _resolve_seed(args.seed),
                               dtype=DTYPES[args.dtype], step=args.step)
    worst = 0.0
    for name, err in results:
        print("%-44s %.3e" % (name, err))
        worst = max(worst, err)
    ok = worst < args.tol
    print("max rel err %.3e (tol %.1e): %s" % (worst, args.tol, "ok" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_bench(args):
    record = bench_attention(args.mixer, args.n, args.dim, heads=args.heads,
                             sr=args.sr, iters=args.iters, warmup=args.warmup,
                             seed=_resolve_seed(args.seed))
    if args.out == "json":
        print(json.dumps([record.to_json_dict()], indent=2))
    else:
        print(CSV_HEADER)
        print(record.csv_row())
    return 0


def cmd_train_toy(args):
    seed = _resolve_seed(args.seed)
    config = replace(VARIANTS["toy2"], num_classes=args.classes)
    model = build_variant(config, seed=seed)
    images, labels = synthetic_blobs(args.samples, args.classes, args.res,
                                     RngStream(seed, DATA_STREAM))
    losses = train_toy(model, images, labels, args.steps, lr=args.lr,
                       rng=RngStream(seed, DROPOUT_STREAM))
    lines = ["step,loss"] + ["%d,%.8f" % (i, v) for i, v in enumerate(losses)]
    text = "\n".join(lines) + "\n"
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print("final loss %.6f after %d steps" % (losses[-1], len(losses)), file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="s2aformer",
        description="Strip-attention backbone harness: structure, costs, "
                    "gradients, latency, toy training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="variant structure and cost summary")
    p.add_argument("--variant", default="mini")
    p.add_argument("--config", help="variant config JSON (overrides --variant)")
    p.add_argument("--res", type=int, default=224)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--layers", action="store_true", help="include per-layer breakdown")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("verify-cost", help="reconcile counted MACs against the closed forms")
    p.add_argument("--variant", default="all")
    p.add_argument("--config", help="variant config JSON (overrides --variant)")
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_verify_cost)

    p = sub.add_parser("gradcheck", help="backward vs finite differences")
    p.add_argument("--module", choices=("ssa", "lim", "hpb", "backbone"), required=True)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time one mixer forward")
    p.add_argument("--mixer", choices=("ssa", "mhsa"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--sr", type=int, default=1)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="overfit the toy variant on synthetic blobs")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="write the step,loss CSV to this path")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except NumericError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except S2AError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
