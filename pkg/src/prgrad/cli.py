"""Command line entry point: ``prgrad <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness, verify
from .products import ProductMode

MODES = [m.value for m in ProductMode]


def _gradcheck(args):
    reports = verify.gradcheck_suite(seed=args.seed)
    verify.write_report(reports, args.out)
    failed = [r for r in reports if not r.passed]
    for r in failed:
        print(f"FAIL {r.case} {r.parameter} rel_err={r.max_rel_error:.3e} tol={r.tolerance:g}")
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; report at {args.out}")
    return 1 if failed else 0


def _train(args):
    cfg = harness.TrainConfig.load(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir:
        cfg.out_dir = args.out_dir
    result = harness.run_experiment(cfg)
    print(f"mode {cfg.mode}: final test accuracy {result.final_test_acc:.4f} -> {result.out_dir}")
    return 0


def _ablation(args):
    cfg = harness.ablation_config(args.data_dir, args.out_dir, args.epochs, args.subset, args.seed)
    results = harness.intro_ablation(cfg)
    print(f"{'mode':<18} {'top-1':>7}")
    for mode, r in results.items():
        print(f"{mode:<18} {r.final_test_acc:7.4f}")
    return 0


def _cifar(args):
    _, summary = harness.cifar_small(args.data_dir, args.seeds, args.out_dir, args.epochs)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _angles(args):
    stats = harness.checkpoint_angle_stats(args.checkpoint, args.data_dir, args.config, args.samples)
    print("layer,min_abs_sin,mean_abs_cos")
    for s in stats:
        print(f"{s.layer},{s.min_abs_sin:.8g},{s.mean_abs_cos:.8g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="prgrad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="gradcheck.csv")
    p.set_defaults(func=_gradcheck)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=_train)

    p = sub.add_parser("ablation-fmnist", help="P / no-length / no-direction MLPs on Fashion-MNIST")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", default="runs/ablation")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--subset", type=int, help="use only the first N training images")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_ablation)

    p = sub.add_parser("cifar-small", help="P vs PR on a 6-conv CNN, several seeds")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out-dir", default="runs/cifar_small")
    p.set_defaults(func=_cifar)

    p = sub.add_parser("angle-stats", help="min |sin theta| per layer of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--config", help="defaults to config.json next to the checkpoint")
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(func=_angles)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get("PRGRAD_THREADS")
    try:
        with threadpool_limits(int(threads) if threads else None):
            return args.func(args)
    except (harness.ConfigError, FileNotFoundError, harness.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
