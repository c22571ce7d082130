"""``diffclass`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..data import DataError
from ..training import CheckpointError
from . import commands
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("diffclass")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="experiment YAML file")
    parser.add_argument("--seed", type=int, default=default,
                        help="experiment seed (data, split, training, explain noise)")
    parser.add_argument("--out", type=Path, default=default, help="run directory")
    parser.add_argument("--overwrite", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="replace existing outputs")
    parser.add_argument("-q", "--quiet", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def _model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--oracle", action="store_true", help="use the Gaussian oracle denoiser")
    group.add_argument("--checkpoint", type=Path, help="checkpoint file (default: <out>/train)")
    parser.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffclass", description="Diffusion classifier experiments.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", parents=[common], help="write dataset and split files")

    p = sub.add_parser("train", parents=[common], help="train the conditional denoiser")
    p.add_argument("--resume", action="store_true", help="continue from <out>/train/checkpoint.pt")
    p.add_argument("--steps", type=int, help="override train.total_steps")

    p = sub.add_parser("classify", parents=[common], help="classify the evaluation split")
    _model_flags(p)
    p.add_argument("--N", type=int, help="classification steps")
    p.add_argument("--rule", choices=("majority", "average"))
    p.add_argument("--seeds", type=int, nargs="+", help="inference seeds")

    p = sub.add_parser("ablate-steps", parents=[common], help="accuracy against N")
    _model_flags(p)
    p.add_argument("--N-list", type=int, nargs="+", dest="n_list")
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("uncertainty", parents=[common], help="coverage curve from classify records")
    p.add_argument("--fractions", type=float, nargs="+")

    p = sub.add_parser("explain", parents=[common], help="counterfactual difference maps")
    _model_flags(p)
    p.add_argument("--source", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--n-images", type=int)
    p.add_argument("--scale", type=float, help="guidance scale w")
    p.add_argument("--noise-level", type=float, help="start time t*")

    sub.add_parser("report", parents=[common], help="consolidate tables into report.md")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    model, cc, ec = cfg.model, cfg.classification, cfg.explain
    if getattr(args, "oracle", False):
        model = replace(model, source="oracle")
    if getattr(args, "checkpoint", None):
        model = replace(model, source="checkpoint", checkpoint=str(args.checkpoint))
    if getattr(args, "raw_weights", False):
        model = replace(model, use_ema=False)
    for name, attr in (("N", "N"), ("rule", "rule"), ("seeds", "seeds"), ("n_list", "N_list")):
        value = getattr(args, name, None)
        if value is not None:
            cc = replace(cc, **{attr: tuple(value) if isinstance(value, list) else value})
    guidance = ec.guidance
    if getattr(args, "scale", None) is not None:
        guidance = replace(guidance, scale=args.scale)
    if getattr(args, "noise_level", None) is not None:
        guidance = replace(guidance, noise_level=args.noise_level)
    for name in ("source", "target", "n_images"):
        if getattr(args, name, None) is not None:
            ec = replace(ec, **{name: getattr(args, name)})
    ec = replace(ec, guidance=guidance)
    train = cfg.train
    if getattr(args, "steps", None) is not None:
        train = replace(train, total_steps=args.steps)
    return replace(cfg, model=model, classification=cc, explain=ec, train=train)


def _print_metrics(reports) -> None:
    for rule, rep in reports.items():
        s = rep.summary()
        acc, f1 = s["accuracy"], s["f1"]
        std = "" if acc["std"] is None else f" ± {100 * acc['std']:.2f}"
        print(f"{rule:>8}: accuracy {100 * acc['mean']:.2f}{std}%  F1 {100 * f1['mean']:.2f}%  "
              f"(N={rep.N}, seeds={rep.seeds})")


def dispatch(args: argparse.Namespace) -> None:
    try:
        cfg = resolve_config(args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    run = commands.Run(cfg, args.out or Path(cfg.output), args.overwrite)
    match args.command:
        case "generate-data":
            ds = commands.generate_data(run)
            print(f"dataset: {len(ds)} images, fingerprint {ds.fingerprint()}")
        case "train":
            ckpt = commands.train_model(run, resume=args.resume)
            print(f"trained to step {ckpt.step}")
        case "classify":
            _print_metrics(commands.run_classification(run))
        case "ablate-steps":
            for rule, points in commands.ablate_steps(run).items():
                print(rule, " ".join(f"N={n}:{100 * m:.2f}%" for n, (m, _) in points.items()))
        case "uncertainty":
            if args.fractions:
                cfg = replace(cfg, uncertainty=replace(cfg.uncertainty, fractions=tuple(args.fractions)))
                run.config = cfg
            u = commands.run_uncertainty(run)
            print(" ".join(f"{100 * f:g}%:{100 * a:.2f}" for f, a in
                           zip(u["retained_fraction"], u["mean_accuracy"])))
        case "explain":
            meta = commands.run_explain(run)
            print(f"{meta['classified_as_target']}/{len(meta['images'])} counterfactuals "
                  f"classified as class {meta['target']}")
        case "report":
            print(commands.write_report(run))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
