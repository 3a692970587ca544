"""Command-line interface.

Subcommands:

* ``train``        repeated seeded training runs with per-run metrics,
                   checkpoints, and a mean±std summary
* ``eval``         score a stored checkpoint on its test split
* ``predict-map``  render a classification map from a checkpoint
* ``gradcheck``    finite-difference verification of all gradients
* ``complexity``   per-layer parameter/MAC/FLOP breakdown

Options layer in a fixed order: built-in defaults, then ``--preset``,
then ``--config`` (a JSON run config), then individual flags.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .errors import MixerError
from .gradcheck import run_checks, summarize
from .metrics import (
    REFERENCE_CONFIG,
    REFERENCE_TOTALS,
    count_complexity,
    format_mean_std,
)
from .pipeline import evaluate_checkpoint, predict_map, run_training
from .runconfig import PRESETS, RunConfig


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON run config file")
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="named dataset preset (patch size, channels, fraction)")
    parser.add_argument("--cube", metavar="PATH", help="hyperspectral cube file")
    parser.add_argument("--labels", metavar="PATH", help="ground-truth label file")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--patch-size", type=int, metavar="S")
    parser.add_argument("--pca", type=int, metavar="C", help="retained PCA channels")
    parser.add_argument("--train-frac", type=float, metavar="F",
                        help="per-class training fraction")
    parser.add_argument("--seed", type=int, metavar="N")
    parser.add_argument("--runs", type=int, metavar="N", help="seeded repetitions")
    parser.add_argument("--epochs", type=int, metavar="N", help="maximum epochs")
    parser.add_argument("--batch", type=int, metavar="M", help="batch size")
    parser.add_argument("--lr", type=float, metavar="R", help="learning rate")
    parser.add_argument("--patience", type=int, metavar="N",
                        help="early-stopping patience in epochs")
    parser.add_argument("--attention", choices=["ca", "none"],
                        help="coordinate attention or plain ablation")


_FLAG_TO_FIELD = {
    "cube": "cube",
    "labels": "labels",
    "out": "out_dir",
    "patch_size": "patch_size",
    "pca": "pca_count",
    "train_frac": "train_fraction",
    "seed": "seed",
    "runs": "runs",
    "epochs": "max_epochs",
    "batch": "batch_size",
    "lr": "learning_rate",
    "patience": "patience",
    "attention": "attention",
}


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        base = RunConfig.load(args.config).with_overrides(**PRESETS[args.preset])
    elif getattr(args, "config", None):
        base = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        base = RunConfig.preset(args.preset)
    else:
        base = RunConfig()
    overrides = {}
    for flag, fieldname in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fieldname] = value
    return base.with_overrides(**overrides) if overrides else base


def _cmd_train(args: argparse.Namespace) -> int:
    run_cfg = _resolve_config(args)
    summary = run_training(run_cfg)
    report = summary.report
    for idx, output in enumerate(summary.outputs, start=1):
        print(f"run {idx:02d}: oa={output.scores.overall_accuracy:.4f} "
              f"aa={output.scores.average_accuracy:.4f} "
              f"kappa={output.scores.kappa:.4f} "
              f"epochs={len(output.result.history)} "
              f"best_epoch={output.result.best_epoch}")
    print(f"runs={len(report.runs)}")
    print(f"oa={format_mean_std(report.oa_mean, report.oa_std)}")
    print(f"aa={format_mean_std(report.aa_mean, report.aa_std)}")
    print(f"kappa={format_mean_std(report.kappa_mean, report.kappa_std)}")
    print(f"summary written to {summary.summary_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    run_cfg = _resolve_config(args)
    run_scores, cm = evaluate_checkpoint(run_cfg, args.checkpoint)
    print(f"oa={run_scores.overall_accuracy!r}")
    print(f"aa={run_scores.average_accuracy!r}")
    print(f"kappa={run_scores.kappa!r}")
    for idx, value in enumerate(run_scores.per_class, start=1):
        print(f"class_{idx:02d}={float(value)!r}")
    print("confusion (rows true, columns predicted):")
    for row in cm.counts:
        print(" ".join(str(int(v)) for v in row))
    return 0


def _cmd_predict_map(args: argparse.Namespace) -> int:
    run_cfg = _resolve_config(args)
    image_path, grid_path = predict_map(
        run_cfg, args.checkpoint, run_cfg.out_dir,
        full=args.full, image_format=args.format,
    )
    print(f"map image written to {image_path}")
    print(f"prediction grid written to {grid_path}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    seeds = list(range(args.seeds))
    results = run_checks(seeds=seeds, include_model=not args.ops_only)
    worst = summarize(results)
    failed = 0
    for (op, target), error in worst.items():
        tolerance = max(r.tolerance for r in results if (r.op, r.target) == (op, target))
        ok = error <= tolerance
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {op}.{target}: "
              f"max rel err {error:.3e} (tol {tolerance:.0e})")
    print(f"{len(worst) - failed}/{len(worst)} gradient checks passed "
          f"({args.seeds} seeds)")
    return 0 if failed == 0 else 1


def _cmd_complexity(args: argparse.Namespace) -> int:
    run_cfg = _resolve_config(args)
    num_classes = args.classes if args.classes is not None else run_cfg.num_classes
    if num_classes is None:
        num_classes = 9
    config = run_cfg.mixer_config(num_classes)
    report = count_complexity(config)
    print(report.to_table())
    if config == REFERENCE_CONFIG:
        ours = report.total_parameters
        ref = REFERENCE_TOTALS["parameters"]
        delta = (ours - ref) / ref
        print()
        print(f"reference parameters {ref}: counted {ours} ({delta:+.2%})")
        print(f"reference macs {REFERENCE_TOTALS['macs']}: counted {report.total_macs}")
        print(f"reference flops {REFERENCE_TOTALS['flops']}: counted {report.total_flops}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixerca",
        description="Hyperspectral patch classifier: training, evaluation, maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run seeded training repetitions")
    _add_run_options(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on its test split")
    _add_run_options(p_eval)
    p_eval.add_argument("--checkpoint", required=True, metavar="PATH")
    p_eval.set_defaults(func=_cmd_eval)

    p_map = sub.add_parser("predict-map", help="render a classification map")
    _add_run_options(p_map)
    p_map.add_argument("--checkpoint", required=True, metavar="PATH")
    p_map.add_argument("--full", action="store_true",
                       help="classify every pixel, not only labeled ones")
    p_map.add_argument("--format", choices=["ppm", "png"], default="ppm")
    p_map.set_defaults(func=_cmd_predict_map)

    p_grad = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p_grad.add_argument("--seeds", type=int, default=5, metavar="N",
                        help="number of random seeds per check")
    p_grad.add_argument("--ops-only", action="store_true",
                        help="skip the slower end-to-end model check")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_cx = sub.add_parser("complexity", help="parameter/MAC/FLOP breakdown")
    _add_run_options(p_cx)
    p_cx.add_argument("--classes", type=int, metavar="L",
                      help="class count when no label file is involved")
    p_cx.set_defaults(func=_cmd_complexity)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MixerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
