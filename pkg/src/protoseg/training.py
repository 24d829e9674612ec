"""Episodic trainer and the two classic baselines.

Every step samples one (support, query) episode, extracts prototypes
from the support feature map, scores both images against those
prototypes, and minimizes query cross-entropy plus alpha times the
support self-segmentation cross-entropy with momentum SGD under a poly
learning-rate schedule. Gradients flow through the prototypes into the
support branch; the masked-average-pool operation is differentiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data.episodes import Episode, sample_episode
from .data.augment import augment
from .data.samples import IGNORE_LABEL, LabeledSample
from .data.support import SupportSet
from .errors import AllIgnoredError, EmptySupportError, TrainingDivergedError
from .model import (EncoderConfig, FeatureEncoder, LinearHead, build_encoder,
                    build_head, save_checkpoint)
from .prototypes import (Prototype, downsample_mask, masked_average_pool,
                         prototype_softmax, score_map, upsample_scores)


@dataclass
class TrainConfig:
    epochs: int = 6
    crop_size: tuple[int, int] = (96, 96)
    base_lr: float = 0.001
    momentum: float = 0.9
    lr_power: float = 0.9
    alpha: float = 0.2
    temperature: float = 1.0
    seed: int = 0
    batch_size: int = 1
    weight_decay: float = 0.0
    max_retries: int = 10
    exclude_classes: tuple[int, ...] = ()

    def __post_init__(self):
        self.crop_size = tuple(self.crop_size)
        self.exclude_classes = tuple(int(c) for c in self.exclude_classes)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "crop_size": list(self.crop_size),
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "lr_power": self.lr_power,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "max_retries": self.max_retries,
            "exclude_classes": list(self.exclude_classes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["crop_size"] = tuple(data["crop_size"])
        data["exclude_classes"] = tuple(data.get("exclude_classes", ()))
        return cls(**data)


@dataclass
class LossReport:
    loss_query: float
    loss_support: float
    loss_total: float
    n_way: int
    valid_pixel_counts: tuple[int, int]   # (query, support)


def cross_entropy_loss(probabilities: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Mean of -log p(true class) over non-ignored pixels, log clamped at 1e-12."""
    n_way = probabilities.shape[-1]
    valid = mask != IGNORE_LABEL
    if not np.any(valid):
        raise AllIgnoredError("no valid pixel to compute a loss on")
    labels = mask[valid].astype(np.int64)
    if labels.max() >= n_way:
        raise ValueError(f"mask label {labels.max()} >= n_way {n_way}")
    flat = probabilities.reshape(-1, n_way)
    rows = torch.from_numpy(np.flatnonzero(valid.reshape(-1)))
    cols = torch.from_numpy(labels)
    picked = flat[rows, cols]
    return -torch.log(torch.clamp(picked, min=1e-12)).mean()


def combined_loss(loss_query, loss_support, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return loss_query + alpha * loss_support


def poly_lr(base_lr: float, step: int, max_steps: int, power: float) -> float:
    if step < 0 or step > max_steps:
        raise ValueError(f"step {step} outside 0..{max_steps}")
    return base_lr * (1.0 - step / max_steps) ** power


def _image_batch(samples: list[LabeledSample], dtype: torch.dtype) -> torch.Tensor:
    stacked = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(stacked)).to(dtype)


def episode_loss(encoder: FeatureEncoder, episode: Episode,
                 config: TrainConfig) -> tuple[torch.Tensor, LossReport]:
    """Differentiable episodic loss (query CE + alpha * support CE)."""
    dtype = next(encoder.parameters()).dtype
    batch = _image_batch([episode.support, episode.query], dtype)
    features = encoder(batch).permute(0, 2, 3, 1)   # (2, h, w, D)
    f_support, f_query = features[0], features[1]

    mask_ds = downsample_mask(episode.support.mask, encoder.output_stride)
    present = [int(v) for v in np.unique(mask_ds) if v != IGNORE_LABEL]
    if not present:
        raise EmptySupportError("support crop lost every class at feature resolution")
    prototypes = [Prototype(class_id=i, vector=masked_average_pool(f_support, mask_ds, i))
                  for i in present]

    # classes that vanished during downsampling drop out of the episode
    lut = np.full(256, IGNORE_LABEL, dtype=np.uint8)
    lut[present] = np.arange(len(present), dtype=np.uint8)
    support_target = lut[episode.support.mask]
    query_target = lut[episode.query.mask]

    crop = episode.support.mask.shape
    probs_support = prototype_softmax(
        upsample_scores(score_map(f_support, prototypes), crop), config.temperature)
    probs_query = prototype_softmax(
        upsample_scores(score_map(f_query, prototypes), crop), config.temperature)

    loss_query = cross_entropy_loss(probs_query, query_target)      # AllIgnored may raise
    loss_support = cross_entropy_loss(probs_support, support_target)
    total = combined_loss(loss_query, loss_support, config.alpha)

    lq, ls = float(loss_query.detach()), float(loss_support.detach())
    report = LossReport(
        loss_query=lq, loss_support=ls, loss_total=combined_loss(lq, ls, config.alpha),
        n_way=len(present),
        valid_pixel_counts=(int((query_target != IGNORE_LABEL).sum()),
                            int((support_target != IGNORE_LABEL).sum())))
    return total, report


def train_step(encoder: FeatureEncoder, episode: Episode,
               config: TrainConfig) -> tuple[dict[str, torch.Tensor], LossReport]:
    """Gradients of the combined episodic loss w.r.t. all trainable parameters."""
    encoder.zero_grad(set_to_none=True)
    total, report = episode_loss(encoder, episode, config)
    total.backward()
    grads = {name: p.grad.detach().clone()
             for name, p in encoder.named_parameters() if p.grad is not None}
    return grads, report


def _mask_out_classes(samples: list[LabeledSample],
                      excluded: tuple[int, ...]) -> list[LabeledSample]:
    if not excluded:
        return samples
    lut = np.arange(256, dtype=np.uint8)
    lut[list(excluded)] = IGNORE_LABEL
    return [LabeledSample(s.image, lut[s.mask], s.name) for s in samples]


class _StepLogger:
    def __init__(self, log_path: Path | None):
        self.records: list[dict] = []
        self._fh = open(log_path, "w") if log_path else None

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            json.dump(record, self._fh)
            self._fh.write("\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _check_finite(loss_value: float, record: dict, encoder, out_dir) -> None:
    if np.isfinite(loss_value):
        return
    if out_dir is not None:
        dump = Path(out_dir) / "diverged_state.ckpt"
        save_checkpoint(dump, encoder, meta={"diverged_at": record})
    raise TrainingDivergedError(f"non-finite loss at step {record.get('step')}: {record}")


def fit(source_dataset: list[LabeledSample], support_set: SupportSet,
        config: TrainConfig, encoder: FeatureEncoder | None = None,
        encoder_config: EncoderConfig | None = None,
        out_dir=None) -> tuple[FeatureEncoder, list[dict]]:
    """Episodic training: epochs x |source| steps of sample -> step -> update.

    Emits one structured record per step and, when out_dir is given, a
    train_log.jsonl plus a checkpoint per epoch.
    """
    if not source_dataset or len(support_set) == 0:
        raise ValueError("source dataset and support set must be nonempty")
    if encoder is None:
        encoder = build_encoder(encoder_config or EncoderConfig(), seed=config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    source = _mask_out_classes(source_dataset, config.exclude_classes)
    support = support_set
    if config.exclude_classes:
        support = replace(support_set,
                          samples=_mask_out_classes(support_set.samples,
                                                    config.exclude_classes))

    rng = np.random.default_rng(config.seed)
    trainable = [p for p in encoder.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(trainable, lr=config.base_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    max_steps = config.epochs * len(source)
    logger = _StepLogger(out_dir / "train_log.jsonl" if out_dir else None)
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(source))
            for start in range(0, len(order), config.batch_size):
                indices = order[start:start + config.batch_size]
                lr = poly_lr(config.base_lr, step, max_steps, config.lr_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                accumulated = 0
                for query_index in indices:
                    episode = sample_episode(source, support, rng, config.crop_size,
                                             query_index=int(query_index),
                                             max_retries=config.max_retries)
                    try:
                        loss, report = episode_loss(encoder, episode, config)
                    except (EmptySupportError, AllIgnoredError) as exc:
                        logger.log({"step": step, "epoch": epoch, "lr": lr,
                                    "skipped": type(exc).__name__})
                        continue
                    (loss / len(indices)).backward()
                    accumulated += 1
                    record = {"step": step, "epoch": epoch, "lr": lr,
                              "loss_query": report.loss_query,
                              "loss_support": report.loss_support,
                              "loss_total": report.loss_total,
                              "n_way": report.n_way,
                              "valid_pixels_query": report.valid_pixel_counts[0],
                              "valid_pixels_support": report.valid_pixel_counts[1]}
                    _check_finite(report.loss_total, record, encoder, out_dir)
                    logger.log(record)
                if accumulated:
                    optimizer.step()
                step += len(indices)
            if out_dir is not None:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch:03d}.ckpt", encoder,
                                meta={"epoch": epoch, "train_config": config.to_dict()})
    finally:
        logger.close()
    return encoder, logger.records


def baseline_loss(encoder: FeatureEncoder, head: LinearHead, crop: LabeledSample,
                  config: TrainConfig) -> tuple[torch.Tensor, LossReport]:
    """Classic per-pixel softmax segmentation loss on one crop."""
    dtype = next(encoder.parameters()).dtype
    batch = _image_batch([crop], dtype)
    logits = head(encoder(batch))
    logits = torch.nn.functional.interpolate(logits, size=crop.mask.shape,
                                             mode="bilinear", align_corners=False)
    scores = logits.squeeze(0).permute(1, 2, 0)
    z = scores - scores.max(dim=-1, keepdim=True).values
    exp = torch.exp(z)
    probs = exp / exp.sum(dim=-1, keepdim=True)
    loss = cross_entropy_loss(probs, crop.mask)
    valid = int((crop.mask != IGNORE_LABEL).sum())
    value = float(loss.detach())
    report = LossReport(loss_query=value, loss_support=0.0, loss_total=value,
                        n_way=head.n_class, valid_pixel_counts=(valid, 0))
    return loss, report


def train_baseline(dataset: list[LabeledSample], config: TrainConfig, mode: str,
                   n_class: int, encoder: FeatureEncoder | None = None,
                   encoder_config: EncoderConfig | None = None,
                   out_dir=None) -> tuple[FeatureEncoder, LinearHead, list[dict]]:
    """Non-episodic training of encoder + linear head (source_only / few_shot_only)."""
    if mode not in ("source_only", "few_shot_only"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if encoder is None:
        encoder = build_encoder(encoder_config or EncoderConfig(), seed=config.seed)
    head = build_head(encoder.feature_dim, n_class, seed=config.seed + 1,
                      dtype=next(encoder.parameters()).dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    params = [p for p in encoder.parameters() if p.requires_grad] + list(head.parameters())
    optimizer = torch.optim.SGD(params, lr=config.base_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    max_steps = config.epochs * len(dataset)
    logger = _StepLogger(out_dir / "train_log.jsonl" if out_dir else None)
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(dataset))
            for index in order:
                crop = augment(dataset[index], config.crop_size, rng)
                lr = poly_lr(config.base_lr, step, max_steps, config.lr_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                try:
                    loss, report = baseline_loss(encoder, head, crop, config)
                except AllIgnoredError:
                    logger.log({"step": step, "epoch": epoch, "lr": lr,
                                "skipped": "AllIgnoredError"})
                    step += 1
                    continue
                loss.backward()
                optimizer.step()
                record = {"step": step, "epoch": epoch, "lr": lr, "mode": mode,
                          "loss_total": report.loss_total,
                          "valid_pixels": report.valid_pixel_counts[0]}
                _check_finite(report.loss_total, record, encoder, out_dir)
                logger.log(record)
                step += 1
            if out_dir is not None:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch:03d}.ckpt", encoder,
                                head=head, meta={"epoch": epoch, "mode": mode,
                                                 "train_config": config.to_dict()})
    finally:
        logger.close()
    return encoder, head, logger.records
