"""Command-line entry point wiring the library into reproducible experiments.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data.samples import load_dataset, load_image, save_image, save_mask
from .data.support import construct_support_set, load_support_set, save_support_set
from .errors import ProtosegError
from .evaluation import evaluate, evaluate_with_head, predict_with_bank
from .experiment import (default_experiment_config, generate_data, load_experiment_config,
                         run_experiment, save_experiment_config)
from .model import load_checkpoint
from .prototypes import compute_bank, load_bank, save_bank
from .reporting import colorize_mask, emit_report
from .training import TrainConfig, fit

OUTPUT_ROOT_ENV = "PROTOSEG_OUT_ROOT"


def _default_out(sub_dir: str) -> str:
    return str(Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / sub_dir)


def _experiment_config(args) -> "ExperimentConfig":
    if args.config:
        config = load_experiment_config(args.config)
    else:
        config = default_experiment_config(seed=args.seed if args.seed is not None else 0,
                                           scenario=args.scenario or "standard")
    if args.scenario:
        config.scenario = args.scenario.replace("-", "_")
    if args.seed is not None:
        config.train.seed = args.seed
        config.support_seed = args.seed
    if getattr(args, "k_shot", None) is not None:
        config.k_shot = args.k_shot
    if getattr(args, "temperature", None) is not None:
        config.train.temperature = args.temperature
    if getattr(args, "alpha", None):
        if len(args.alpha) == 1:
            config.train.alpha = args.alpha[0]
        else:
            config.alpha_grid = tuple(args.alpha)
    if getattr(args, "with_baselines", False):
        config.with_baselines = True
    return config


def cmd_gen_data(args) -> int:
    config = _experiment_config(args)
    manifests = generate_data(config, args.out, force=args.force)
    save_experiment_config(config, Path(args.out) / "experiment_config.json")
    for name, path in manifests.items():
        print(f"{name}: {path}")
    return 0


def cmd_build_support(args) -> int:
    dataset, n_class = load_dataset(args.manifest)
    support = construct_support_set(dataset, args.k_shot, n_class, seed=args.seed)
    save_support_set(args.out, support, args.manifest)
    unsaturated = support.unsaturated_classes()
    print(f"admitted {len(support)} images; occurrence={support.occurrence.tolist()}")
    if unsaturated:
        print(f"classes below k_shot after one pass: {unsaturated}")
    return 0


def cmd_train(args) -> int:
    source, _ = load_dataset(args.source)
    support = load_support_set(args.support)
    if args.train_config:
        with open(args.train_config) as fh:
            config = TrainConfig.from_dict(json.load(fh))
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.alpha:
        config.alpha = args.alpha[0]
    if args.temperature is not None:
        config.temperature = args.temperature
    if args.epochs is not None:
        config.epochs = args.epochs
    out_dir = Path(args.out)
    encoder, _records = fit(source, support, config, out_dir=out_dir)
    from .model import save_checkpoint
    save_checkpoint(out_dir / "final.ckpt", encoder,
                    meta={"train_config": config.to_dict()})
    print(f"trained {config.epochs} epochs; checkpoint at {out_dir / 'final.ckpt'}")
    return 0


def cmd_extract_protos(args) -> int:
    support = load_support_set(args.support)
    encoder, _head, _meta = load_checkpoint(args.ckpt)
    bank = compute_bank(encoder, support, source=f"{args.support}@{args.ckpt}")
    save_bank(args.out, bank)
    print(f"bank with {len(bank)} prototypes (dim {bank.dim}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset, n_class = load_dataset(args.manifest)
    encoder, head, _meta = load_checkpoint(args.ckpt)
    scenario = args.scenario.replace("-", "_")
    subsets = {}
    for item in args.subset or []:
        name, _, ids = item.partition("=")
        subsets[name] = [int(v) for v in ids.split(",") if v]
    if args.bank:
        bank = load_bank(args.bank)
        report = evaluate(encoder, bank, dataset, n_class, scenario=scenario,
                          subsets=subsets or None)
    else:
        if head is None:
            raise ProtosegError("checkpoint has no classifier head; pass --bank")
        report = evaluate_with_head(encoder, head, dataset, n_class, scenario=scenario,
                                    subsets=subsets or None)
    paths = emit_report(report, args.out, name="eval_report")
    print(f"mIoU = {report.miou:.4f} over {report.n_images} images")
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def cmd_segment(args) -> int:
    encoder, _head, _meta = load_checkpoint(args.ckpt)
    bank = load_bank(args.bank)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for image_path in args.images:
        try:
            image = load_image(image_path)
            pred = predict_with_bank(encoder, bank, image)
            stem = Path(image_path).stem
            save_mask(out_dir / f"{stem}_pred.png", pred)
            if args.color_palette:
                palette = np.asarray(json.loads(Path(args.color_palette).read_text()))
                save_image(out_dir / f"{stem}_pred_color.png", colorize_mask(pred, palette))
            print(f"{image_path} -> {out_dir / (stem + '_pred.png')}")
        except Exception as exc:  # report per file, keep going
            failures += 1
            print(f"{image_path}: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_run_experiment(args) -> int:
    config = _experiment_config(args)
    result = run_experiment(config, args.out, force=args.force)
    save_experiment_config(config, Path(args.out) / "experiment_config.json")
    for name, report in result.reports.items():
        print(f"{name}: mIoU = {report.miou:.4f}")
    return 0


def _add_experiment_flags(parser, with_out: bool = True) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override experiment seeds")
    parser.add_argument("--scenario", choices=["standard", "osda", "multi-source"],
                        help="evaluation scenario")
    parser.add_argument("--k-shot", type=int, dest="k_shot")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--alpha", type=float, action="append",
                        help="balancing factor; repeat for an ablation grid")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing datasets")
    if with_out:
        parser.add_argument("--out", default=_default_out("experiment"),
                            help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoseg",
        description="Prototype-based few-shot domain-adaptive segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the synthetic benchmark datasets")
    _add_experiment_flags(p, with_out=False)
    p.add_argument("--out", default=_default_out("data"), help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-support", help="construct a support set (occurrence pass)")
    p.add_argument("--manifest", required=True, help="dataset manifest to draw from")
    p.add_argument("--k-shot", type=int, default=5, dest="k_shot")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=_default_out("support.json"))
    p.set_defaults(func=cmd_build_support)

    p = sub.add_parser("train", help="episodic training on a source manifest")
    p.add_argument("--source", required=True, help="source dataset manifest")
    p.add_argument("--support", required=True, help="support-set manifest")
    p.add_argument("--train-config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, action="append")
    p.add_argument("--temperature", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default=_default_out("run"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract-protos", help="precompute the prototype bank")
    p.add_argument("--support", required=True, help="support-set manifest")
    p.add_argument("--ckpt", required=True, help="encoder checkpoint")
    p.add_argument("--out", default=_default_out("bank.pb"))
    p.set_defaults(func=cmd_extract_protos)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", help="prototype bank (omit to use the checkpoint head)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario", choices=["standard", "osda", "multi-source"],
                   default="standard")
    p.add_argument("--subset", action="append",
                   help="named class subset, e.g. miou_shared=0,1,2")
    p.add_argument("--out", default=_default_out("eval"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment images with a checkpoint + bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", default=_default_out("segmented"))
    p.add_argument("--color-palette", help="JSON palette file for color visualizations")
    p.add_argument("images", nargs="+", help="input image files")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("run-experiment", help="full pipeline with provenance")
    _add_experiment_flags(p)
    p.add_argument("--with-baselines", action="store_true", dest="with_baselines")
    p.set_defaults(func=cmd_run_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ProtosegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
