"""End-to-end experiment orchestration behind the CLI.

A single config drives data generation, support-set construction,
episodic training over an alpha grid, prototype-bank extraction,
evaluation, optional baselines, and a comparison table. Every artifact
lands under one output directory together with a provenance record
sufficient to reproduce it bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data.samples import LabeledSample, load_dataset, write_dataset
from .data.support import SupportSet, construct_support_set, load_support_set, save_support_set
from .data.synthetic import SyntheticDomainSpec, default_benchmark_specs, generate_synthetic_domain
from .errors import ProtosegError
from .evaluation import EvalReport, evaluate, evaluate_with_head
from .model import EncoderConfig, load_checkpoint, save_checkpoint
from .prototypes import compute_bank, load_bank, save_bank
from .reporting import emit_comparison, emit_report, plot_training_curve
from .training import TrainConfig, fit, train_baseline

SCENARIOS = ("standard", "osda", "multi_source")


class StageError(ProtosegError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    source_spec: SyntheticDomainSpec
    target_spec: SyntheticDomainSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_source: int = 200
    n_target_train: int = 60
    n_target_val: int = 60
    k_shot: int = 5
    support_seed: int = 0
    scenario: str = "standard"
    private_classes: tuple[int, ...] = ()
    alpha_grid: tuple[float, ...] = ()
    with_baselines: bool = False
    few_shot_only_epochs: int = 40

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        self.private_classes = tuple(int(c) for c in self.private_classes)
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)

    def to_dict(self) -> dict:
        return {
            "source_spec": self.source_spec.to_dict(),
            "target_spec": self.target_spec.to_dict(),
            "train": self.train.to_dict(),
            "encoder": self.encoder.to_dict(),
            "n_source": self.n_source,
            "n_target_train": self.n_target_train,
            "n_target_val": self.n_target_val,
            "k_shot": self.k_shot,
            "support_seed": self.support_seed,
            "scenario": self.scenario,
            "private_classes": list(self.private_classes),
            "alpha_grid": list(self.alpha_grid),
            "with_baselines": self.with_baselines,
            "few_shot_only_epochs": self.few_shot_only_epochs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        data["source_spec"] = SyntheticDomainSpec.from_dict(data["source_spec"])
        data["target_spec"] = SyntheticDomainSpec.from_dict(data["target_spec"])
        data["train"] = TrainConfig.from_dict(data["train"])
        data["encoder"] = EncoderConfig.from_dict(data["encoder"])
        data["private_classes"] = tuple(data.get("private_classes", ()))
        data["alpha_grid"] = tuple(data.get("alpha_grid", ()))
        return cls(**data)


def default_experiment_config(seed: int = 0, scenario: str = "standard",
                              image_size: tuple[int, int] = (128, 128)) -> ExperimentConfig:
    """The built-in desk-scale benchmark configuration."""
    private = (10, 11) if scenario == "osda" else ()
    source_spec, target_spec = default_benchmark_specs(
        seed=seed, image_size=image_size, exclude_from_source=private)
    train = TrainConfig(epochs=6, crop_size=(96, 96), base_lr=0.002, alpha=0.2,
                        temperature=20.0, seed=seed,
                        exclude_classes=private)
    return ExperimentConfig(
        source_spec=source_spec, target_spec=target_spec, train=train,
        encoder=EncoderConfig(), scenario=scenario, private_classes=private,
        support_seed=seed)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_experiment_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_experiment_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def _derived_source_spec(spec: SyntheticDomainSpec, index: int) -> SyntheticDomainSpec:
    """Extra source domains for the multi-source scenario: same layout
    statistics, photometrically shifted palette, independent seed."""
    palette = np.clip(spec.palette * 0.7 + 0.12, 0.0, 1.0)
    return SyntheticDomainSpec(
        n_class=spec.n_class, image_size=spec.image_size, palette=palette,
        texture_noise_sigma=spec.texture_noise_sigma, shape_density=spec.shape_density,
        class_frequency=spec.class_frequency, seed=spec.seed + 1000 * index,
        stuff_classes=spec.stuff_classes, name=f"{spec.name}_{index}")


def generate_data(config: ExperimentConfig, out_dir, force: bool = False) -> dict[str, Path]:
    """Materialize the synthetic datasets and manifests (gen-data)."""
    out_dir = Path(out_dir)
    plan: list[tuple[str, SyntheticDomainSpec, int]] = [
        ("source", config.source_spec, config.n_source),
        ("target_train", config.target_spec, config.n_target_train),
    ]
    if config.scenario == "multi_source":
        plan.append(("source_1", _derived_source_spec(config.source_spec, 1),
                     config.n_source))
    val_spec = SyntheticDomainSpec.from_dict(config.target_spec.to_dict())
    val_spec.seed = config.target_spec.seed + 500_000
    val_spec.name = "target_val"
    plan.append(("target_val", val_spec, config.n_target_val))

    manifests = {}
    for name, spec, count in plan:
        dataset_dir = out_dir / name
        if (dataset_dir / "manifest.json").exists() and not force:
            raise FileExistsError(
                f"{dataset_dir} already holds a dataset; pass force to overwrite")
    for name, spec, count in plan:
        samples = generate_synthetic_domain(spec, count)
        manifests[name] = write_dataset(out_dir / name, samples, spec.n_class)
    return manifests


def _save_eval(report: EvalReport, records: list[dict], run_dir: Path) -> None:
    emit_report(report, run_dir, name="eval_report", row_label=run_dir.name)
    if records:
        plot_training_curve(records, run_dir / "loss_curve.png")


@dataclass
class ExperimentResult:
    reports: dict[str, EvalReport]
    out_dir: Path
    manifest: dict


def run_experiment(config: ExperimentConfig, out_dir, force: bool = False) -> ExperimentResult:
    """build-support -> fit -> extract-protos -> eval (+ optional baselines)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_class = config.target_spec.n_class
    manifest: dict = {"stages": {}, "runs": {}}
    manifest_path = out_dir / "experiment_manifest.json"

    provenance = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "versions": {"protoseg": __version__, "numpy": np.__version__,
                     "torch": torch.__version__},
        "seeds": {"train": config.train.seed, "support": config.support_seed,
                  "source_spec": config.source_spec.seed,
                  "target_spec": config.target_spec.seed},
    }
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")

    def _finish_stage(stage: str, info) -> None:
        manifest["stages"][stage] = info
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)
            fh.write("\n")

    reports: dict[str, EvalReport] = {}
    try:
        stage = "gen-data"
        data_dir = out_dir / "data"
        if not (data_dir / "source" / "manifest.json").exists() or force:
            generate_data(config, data_dir, force=force)
        _finish_stage(stage, {"dir": str(data_dir)})

        stage = "load-data"
        source, _ = load_dataset(data_dir / "source")
        if config.scenario == "multi_source":
            extra, _ = load_dataset(data_dir / "source_1")
            source = source + extra     # merge all source domains into one
        target_train, _ = load_dataset(data_dir / "target_train")
        target_val, _ = load_dataset(data_dir / "target_val")
        _finish_stage(stage, {"n_source": len(source),
                              "n_target_train": len(target_train),
                              "n_target_val": len(target_val)})

        stage = "build-support"
        support = construct_support_set(target_train, config.k_shot, n_class,
                                        seed=config.support_seed)
        support_path = out_dir / "support" / f"support_{config.k_shot}shot.json"
        save_support_set(support_path, support, data_dir / "target_train")
        _finish_stage(stage, {"path": str(support_path), "n_images": len(support),
                              "occurrence": support.occurrence.tolist()})

        subsets = None
        if config.scenario == "osda" and config.private_classes:
            shared = [c for c in range(n_class) if c not in config.private_classes]
            subsets = {"miou_shared": shared,
                       "miou_private": list(config.private_classes)}

        alphas = config.alpha_grid or (config.train.alpha,)
        for alpha in alphas:
            stage = f"fsda_alpha{alpha:g}"
            run_dir = out_dir / "runs" / stage
            run_dir.mkdir(parents=True, exist_ok=True)
            train_cfg = TrainConfig.from_dict({**config.train.to_dict(), "alpha": alpha})
            encoder, records = fit(source, support, train_cfg,
                                   encoder_config=config.encoder, out_dir=run_dir)
            save_checkpoint(run_dir / "final.ckpt", encoder,
                            meta={"train_config": train_cfg.to_dict()})
            bank = compute_bank(encoder, support,
                                source=f"{stage}:{config_hash(config)[:12]}")
            save_bank(run_dir / "bank.pb", bank)
            report = evaluate(encoder, bank, target_val, n_class,
                              scenario=config.scenario, subsets=subsets)
            _save_eval(report, records, run_dir)
            reports[stage] = report
            _finish_stage(stage, {"dir": str(run_dir), "miou": report.miou})

        if config.with_baselines:
            stage = "source_only"
            run_dir = out_dir / "runs" / stage
            run_dir.mkdir(parents=True, exist_ok=True)
            encoder, head, records = train_baseline(
                source, config.train, "source_only", n_class,
                encoder_config=config.encoder, out_dir=run_dir)
            save_checkpoint(run_dir / "final.ckpt", encoder, head=head,
                            meta={"mode": "source_only"})
            report = evaluate_with_head(encoder, head, target_val, n_class,
                                        scenario=config.scenario, subsets=subsets)
            _save_eval(report, records, run_dir)
            reports[stage] = report
            _finish_stage(stage, {"dir": str(run_dir), "miou": report.miou})

            stage = "few_shot_only"
            run_dir = out_dir / "runs" / stage
            run_dir.mkdir(parents=True, exist_ok=True)
            fs_cfg = TrainConfig.from_dict({**config.train.to_dict(),
                                            "epochs": config.few_shot_only_epochs})
            encoder, head, records = train_baseline(
                support.samples, fs_cfg, "few_shot_only", n_class,
                encoder_config=config.encoder, out_dir=run_dir)
            save_checkpoint(run_dir / "final.ckpt", encoder, head=head,
                            meta={"mode": "few_shot_only"})
            report = evaluate_with_head(encoder, head, target_val, n_class,
                                        scenario=config.scenario, subsets=subsets)
            _save_eval(report, records, run_dir)
            reports[stage] = report
            _finish_stage(stage, {"dir": str(run_dir), "miou": report.miou})

        stage = "comparison"
        if len(reports) > 1:
            emit_comparison(reports, out_dir, name="comparison")
        _finish_stage(stage, {"models": list(reports)})
    except Exception as exc:
        _finish_stage(stage, {"status": "failed", "error": str(exc)})
        raise StageError(stage, exc) from exc

    manifest["runs"] = {name: report.miou for name, report in reports.items()}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
    return ExperimentResult(reports=reports, out_dir=out_dir, manifest=manifest)
