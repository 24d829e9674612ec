"""Confusion-matrix accumulation, per-class IoU, and scenario evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data.samples import IGNORE_LABEL, LabeledSample
from .model import FeatureEncoder, LinearHead, encode
from .prototypes import PrototypeBank, ScoreMap, predict_labels, score_map


@dataclass
class ConfusionMatrix:
    n_class: int
    counts: np.ndarray = None  # (N, N), rows = ground truth, cols = prediction

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_class, self.n_class), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_class, self.n_class):
            raise ValueError("counts must be n_class x n_class")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_class != self.n_class:
            raise ValueError("cannot merge matrices of different sizes")
        self.counts += other.counts
        return self


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Count (gt, pred) pairs for every non-ignored ground-truth pixel."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if np.any(pred == IGNORE_LABEL):
        raise ValueError("prediction must not contain the ignore value 255")
    valid = gt != IGNORE_LABEL
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= conf.n_class or p.max() >= conf.n_class):
        raise ValueError("label outside confusion matrix range")
    flat = np.bincount(g * conf.n_class + p, minlength=conf.n_class ** 2)
    conf.counts += flat.reshape(conf.n_class, conf.n_class)
    return conf


@dataclass
class IouResult:
    per_class: np.ndarray       # IoU per class, NaN where undefined
    defined: np.ndarray         # bool, class appears in gt or prediction
    miou: float


def iou_from_confusion(conf: ConfusionMatrix) -> IouResult:
    """IoU_c = TP / (TP + FP + FN); undefined classes are excluded and flagged."""
    tp = np.diag(conf.counts).astype(np.float64)
    fp = conf.counts.sum(axis=0) - tp
    fn = conf.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise ValueError("every class has an empty union; nothing to evaluate")
    per_class = np.full(conf.n_class, np.nan)
    per_class[defined] = tp[defined] / denom[defined]
    return IouResult(per_class=per_class, defined=defined,
                     miou=float(per_class[defined].mean()))


def subset_miou(result: IouResult, class_subset: list[int]) -> float:
    """Mean IoU over the defined classes of a subset."""
    subset = [c for c in class_subset if result.defined[c]]
    if not subset:
        return float("nan")
    return float(result.per_class[subset].mean())


@dataclass
class EvalReport:
    per_class_iou: list          # float or None where undefined
    miou: float
    class_subset_mious: dict = field(default_factory=dict)
    scenario: str = "standard"
    n_images: int = 0
    counted_pixels: int = 0
    excluded_classes: list = field(default_factory=list)   # undefined, left out of the mean

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "class_subset_mious": self.class_subset_mious,
            "scenario": self.scenario,
            "n_images": self.n_images,
            "counted_pixels": self.counted_pixels,
            "excluded_classes": self.excluded_classes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)


def build_report(conf: ConfusionMatrix, scenario: str, n_images: int,
                 subsets: dict[str, list[int]] | None = None) -> EvalReport:
    result = iou_from_confusion(conf)
    subset_scores = {}
    for name, ids in (subsets or {}).items():
        subset_scores[name] = subset_miou(result, ids)
    return EvalReport(
        per_class_iou=[None if not result.defined[c] else float(result.per_class[c])
                       for c in range(conf.n_class)],
        miou=result.miou,
        class_subset_mious=subset_scores,
        scenario=scenario,
        n_images=n_images,
        counted_pixels=int(conf.counts.sum()),
        excluded_classes=[int(c) for c in np.flatnonzero(~result.defined)],
    )


def _pad_to_stride(image: np.ndarray, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[:2]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=0.0)
    return image, (h, w)


def predict_with_bank(encoder: FeatureEncoder, bank: PrototypeBank,
                      image: np.ndarray) -> np.ndarray:
    """Whole-image nearest-prototype segmentation at input resolution."""
    if bank.dim != encoder.feature_dim:
        raise ValueError(f"bank dim {bank.dim} != encoder dim {encoder.feature_dim}")
    padded, (h, w) = _pad_to_stride(image, encoder.output_stride)
    fmap = encode(encoder, padded)
    scores = score_map(fmap, bank)
    pred = predict_labels(scores, padded.shape[:2])
    return pred[:h, :w]


def predict_with_head(encoder: FeatureEncoder, head: LinearHead,
                      image: np.ndarray) -> np.ndarray:
    """Classic softmax-head segmentation used by the baselines."""
    padded, (h, w) = _pad_to_stride(image, encoder.output_stride)
    dtype = next(encoder.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(padded)).to(dtype)
    x = x.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        logits = head(encoder(x)).squeeze(0).permute(1, 2, 0)
    smap = ScoreMap(data=logits, class_order=list(range(head.n_class)))
    pred = predict_labels(smap, padded.shape[:2])
    return pred[:h, :w]


def evaluate(encoder: FeatureEncoder, bank: PrototypeBank, dataset: list[LabeledSample],
             n_class: int, scenario: str = "standard",
             subsets: dict[str, list[int]] | None = None) -> EvalReport:
    """Bank-based evaluation over a dataset.

    scenario=osda expects the bank to contain target-private classes the
    encoder never trained on; scenario=multi_source documents that
    training consumed a merged pool of source datasets. The mechanics are
    identical in both cases.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    conf = ConfusionMatrix(n_class)
    for sample in dataset:
        pred = predict_with_bank(encoder, bank, sample.image)
        accumulate(conf, pred, sample.mask)
    return build_report(conf, scenario, len(dataset), subsets)


def evaluate_with_head(encoder: FeatureEncoder, head: LinearHead,
                       dataset: list[LabeledSample], n_class: int,
                       scenario: str = "standard",
                       subsets: dict[str, list[int]] | None = None) -> EvalReport:
    if not dataset:
        raise ValueError("dataset is empty")
    conf = ConfusionMatrix(n_class)
    for sample in dataset:
        pred = predict_with_head(encoder, head, sample.image)
        accumulate(conf, pred, sample.mask)
    return build_report(conf, scenario, len(dataset), subsets)
