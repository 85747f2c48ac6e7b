"""Command-line entry point.

Each subcommand maps to one workflow; results print as JSON on stdout
with every artifact path included, and failures print one JSON error
line on stderr with a nonzero exit status.  The default output root is
the CTSYNTH_OUT_ROOT environment variable (falling back to ./runs),
with each run writing under its own run-id directory unless --out is
given.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_experiment_config
from . import workflows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctsynth",
        description=(
            "phantom CT data, lung segmentation, cycle-consistent slice "
            "synthesis, and classifier benchmarks"
        ),
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="experiment config file (INI)")
        p.add_argument("--out", default=None, help="output directory for this run")
        p.add_argument("--registry", default=None, help="run registry file path")

    p = sub.add_parser("phantom", help="render a labelled phantom dataset")
    common(p)
    p.add_argument("--count", type=int, required=True, help="number of normal slices")
    p.add_argument("--covid", type=int, default=0, help="number of positive slices")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("segment", help="segment and mask every slice in a manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="input manifest TSV")
    p.add_argument("--save-masks", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("pretrain", help="warm up the translators on normal slices")
    common(p)
    p.add_argument("--normals", required=True, help="manifest of normal slices")

    p = sub.add_parser("train", help="fit the translator pair on normals vs positives")
    common(p)
    p.add_argument("--normals", required=True, help="manifest of normal slices")
    p.add_argument("--positives", required=True, help="manifest of positive slices")
    p.add_argument("--pretrained", default=None, help="warm-start checkpoint")

    p = sub.add_parser("generate", help="synthesize positive slices from normals")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="manifest of source normals")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--remask", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("classify", help="benchmark baseline vs augmented at one k")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--k", type=int, default=None, help="real positives per arm")
    p.add_argument("--checkpoint", default=None, help="reuse a trained checkpoint")

    p = sub.add_parser("stress", help="sweep k with and without augmentation")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)

    p = sub.add_parser("ablate", help="benchmark pipeline variants")
    common(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)

    p = sub.add_parser("report", help="bundle tables, curves, and sample grids")
    common(p)
    p.add_argument("--runs", nargs="*", default=[], help="run ids to include")

    return parser


def _dispatch(args: argparse.Namespace) -> dict:
    cfg = load_experiment_config(args.config)
    registry = workflows.resolve_registry(args.registry)
    if args.subcommand == "phantom":
        return workflows.run_phantom(
            cfg, registry, args.out, args.count, args.covid,
            split=args.split, seed=args.seed,
        )
    if args.subcommand == "segment":
        return workflows.run_segment(
            cfg, registry, args.out, args.manifest, save_masks=args.save_masks
        )
    if args.subcommand == "pretrain":
        return workflows.run_pretrain(cfg, registry, args.out, args.normals)
    if args.subcommand == "train":
        return workflows.run_train(
            cfg, registry, args.out, args.normals, args.positives,
            pretrained=args.pretrained,
        )
    if args.subcommand == "generate":
        return workflows.run_generate(
            cfg, registry, args.out, args.checkpoint, args.source,
            count=args.count, seed=args.seed, remask=args.remask,
        )
    if args.subcommand == "classify":
        return workflows.run_classify(
            cfg, registry, args.out, args.train_manifest, args.test_manifest,
            k=args.k, checkpoint=args.checkpoint,
        )
    if args.subcommand == "stress":
        return workflows.run_stress(
            cfg, registry, args.out, args.train_manifest, args.test_manifest
        )
    if args.subcommand == "ablate":
        return workflows.run_ablate(
            cfg, registry, args.out, args.train_manifest, args.test_manifest
        )
    if args.subcommand == "report":
        return workflows.run_report(cfg, registry, args.out, args.runs)
    raise AssertionError(f"unhandled subcommand {args.subcommand!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = _dispatch(args)
    except Exception as exc:  # the CLI boundary reports, not crashes
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
