"""Command-line entry points.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
Output root defaults to $SMN_OUT_DIR (falling back to ./out); experiment
subcommands take --config plus dotted key=value overrides.
"""

import argparse
import json
import os
import sys

import numpy as np


def _out_dir(args):
    if args.out:
        return args.out
    return os.environ.get("SMN_OUT_DIR", "out")


def _experiment_args(parser):
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path")
    parser.add_argument("--out", help="output directory (default $SMN_OUT_DIR or ./out)")


def _load_cfg(args, method=None):
    from .harness import load_experiment_config

    cfg = load_experiment_config(args.config, args.set)
    if method is not None:
        cfg.method = method
    cfg.out_dir = _out_dir(args)
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="selfmask",
                                description="binary-mask adaptation toolkit")
    p.add_argument("--precision", choices=["f32", "f64"], default=None,
                   help="override training precision")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--kind", required=True)
    sp.add_argument("--params", default="{}", help="JSON generator parameters")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output directory")

    for name, method in [("pretrain", None), ("mask", "mask-supervised"),
                         ("smn", "smn"), ("cascade", "smn+cascade"),
                         ("eval", "knn"), ("lowshot", None)]:
        sp = sub.add_parser(name)
        _experiment_args(sp)
        sp.set_defaults(method=method)

    sp = sub.add_parser("compress", help="benchmark codecs on a mask file")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--codec", action="append", default=None)

    sp = sub.add_parser("report-sparsity", help="sparsity CSV for a mask file")
    sp.add_argument("--masks", required=True)

    sp = sub.add_parser("verify-theorems", help="paired-run equivalence check")
    sp.add_argument("--transform", choices=["translate", "scale", "composed"],
                    default="composed")
    sp.add_argument("--a", type=float, default=0.5)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--mode", choices=["exact", "float"], default="exact")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--out", help="output directory")
    return p


def cmd_gen_data(args):
    from .data import gen_dataset

    made = gen_dataset(args.kind, json.loads(args.params), args.seed)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    pairs = made if isinstance(made, tuple) else (made,)
    names = ("source", "target") if len(pairs) == 2 else ("data",)
    for name, ds in zip(names, pairs):
        path = os.path.join(out, f"{name}.npz")
        np.savez(path, x=ds.x, y=ds.y, train_idx=ds.train_idx, test_idx=ds.test_idx,
                 descriptor=json.dumps(ds.descriptor))
        print(f"wrote {path}: {ds.x.shape[0]} points, dim {ds.dim}, "
              f"{ds.n_classes} classes")
    return 0


def cmd_compress(args):
    from .maskio import available_codecs, compression_benchmark

    with open(args.masks, "rb") as f:
        data = f.read()
    codecs = args.codec or available_codecs()
    report = compression_benchmark(data, codecs, method="mask")
    print(report.to_json())
    return 0


def cmd_report_sparsity(args):
    from .maskio import unpack_masks

    with open(args.masks, "rb") as f:
        masks = unpack_masks(f.read())
    print("layer,id,n_params,n_active,fraction")
    total_n = total_a = 0
    for i, m in enumerate(masks):
        n, a = m.size, int(np.count_nonzero(m))
        total_n += n
        total_a += a
        print(f"dense{i},{i},{n},{a},{a / n}")
    print(f"overall,-1,{total_n},{total_a},{total_a / total_n}")
    return 0


def cmd_verify_theorems(args):
    from .invariance import (ConfigTransform, default_toy_problem, rational_oracle,
                             run_paired, transform_config_dict)

    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    if args.mode == "exact":
        base = {"lr": "1/8", "score_init": 1, "threshold": 0, "weight_decay": 0}
        if args.transform == "translate":
            other = transform_config_dict(base, ConfigTransform("translate", args.a))
        elif args.transform == "scale":
            other = transform_config_dict(base, ConfigTransform("scale", args.alpha))
        else:
            other = transform_config_dict(
                transform_config_dict(base, ConfigTransform("scale", args.alpha)),
                ConfigTransform("translate", args.a))
        result = rational_oracle(default_toy_problem(), base, other, steps=args.steps)
        doc = {"transform": args.transform, "steps": args.steps,
               "identical": result.identical,
               "first_difference": result.first_difference}
        print(json.dumps(doc, indent=2))
        return 0 if result.identical else 2
    from .data import gen_dataset
    from .harness import pretrain_backbone
    from .invariance import PairedProblem
    from .nn import TrainConfig

    source, target = gen_dataset("shifted-blobs", {"classes": 10, "per_class": 64},
                                 seed=0)
    pre = TrainConfig(lr=0.05, epochs=20, batch_size=64, precision="f64")
    backbone = pretrain_backbone(source, (source.dim, 64, 48, 24), pre)
    problem = PairedProblem(backbone, target.x_train, target.y_train,
                            target.n_classes)
    cfg_a = TrainConfig(lr=50.0, epochs=args.epochs, precision="f64")
    if args.transform == "translate":
        from .invariance import equivalent_config

        cfg_b = equivalent_config(cfg_a, ConfigTransform("translate", args.a))
    elif args.transform == "scale":
        from .invariance import equivalent_config

        cfg_b = equivalent_config(cfg_a, ConfigTransform("scale", args.alpha))
    else:
        from .invariance import equivalent_config

        cfg_b = equivalent_config(
            equivalent_config(cfg_a, ConfigTransform("scale", args.alpha)),
            ConfigTransform("translate", args.a))
    result = run_paired(cfg_a, cfg_b, problem, label=args.transform)
    with open(os.path.join(out, "paired.json"), "w") as f:
        f.write(result.to_json())
    with open(os.path.join(out, "paired_losses.csv"), "w") as f:
        f.write(result.loss_csv())
    print(result.to_json())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_help()
        return 1
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "compress":
            return cmd_compress(args)
        if args.command == "report-sparsity":
            return cmd_report_sparsity(args)
        if args.command == "verify-theorems":
            return cmd_verify_theorems(args)
        # experiment-style commands
        from .harness import run_experiment, run_lowshot

        cfg = _load_cfg(args, getattr(args, "method", None))
        if args.precision:
            cfg.train = cfg.train.with_overrides(precision=args.precision)
            cfg.pretrain = cfg.pretrain.with_overrides(precision=args.precision)
        if args.command == "lowshot":
            rows = run_lowshot(cfg)
            print(json.dumps(rows, indent=2))
            return 0
        if args.command == "pretrain":
            cfg.method = "knn"  # pretraining plus frozen eval, no adaptation
        summary = run_experiment(cfg)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
