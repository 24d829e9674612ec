"""Class prototypes: extraction, aggregation, scoring, and persistence.

A prototype is the mean feature vector of all pixels of one class in a
support image (masked average pooling). Cross-image prototypes average
the per-image prototypes over exactly the images containing the class.
Pixels are classified by cosine similarity to the nearest prototype; a
softmax over the similarities yields per-pixel class probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .binfile import read_arrays, write_arrays
from .data.samples import IGNORE_LABEL
from .errors import ClassAbsentError, EmptySupportError, FileFormatError
from .model import FeatureMap

BANK_MAGIC = b"PSEGBANK"
BANK_VERSION = 1

COSINE_EPSILON = 1e-8


@dataclass
class Prototype:
    class_id: int
    vector: torch.Tensor
    n_contributors: int = 1


@dataclass
class PrototypeBank:
    dim: int
    entries: dict[int, Prototype] = field(default_factory=dict)
    source: str = ""

    def class_ids(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ScoreMap:
    data: torch.Tensor          # (h, w, N) cosine similarities
    class_order: list[int]


def _as_tensor(features) -> torch.Tensor:
    if isinstance(features, FeatureMap):
        return features.data
    return features


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor mask alignment to feature resolution.

    Picks the center pixel of every stride x stride cell, so no label can
    be invented; classes thinner than the stride may vanish.
    """
    if stride == 1:
        return mask
    if mask.shape[0] % stride or mask.shape[1] % stride:
        raise ValueError(f"mask shape {mask.shape} not divisible by stride {stride}")
    off = stride // 2
    return mask[off::stride, off::stride]


def masked_average_pool(features, mask: np.ndarray, class_id: int) -> torch.Tensor:
    """Mean feature vector over the pixels labeled class_id."""
    data = _as_tensor(features)
    if mask.shape != data.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != feature shape {tuple(data.shape[:2])}")
    selector = torch.from_numpy(np.ascontiguousarray(mask == class_id))
    count = int(selector.sum())
    if count == 0:
        raise ClassAbsentError(f"class {class_id} has no pixel at feature resolution")
    return data[selector].sum(dim=0) / count


def extract_prototypes(features, mask: np.ndarray,
                       expected_classes=None) -> tuple[list[Prototype], list[int]]:
    """One prototype per valid class present in the mask.

    Returns (prototypes, omitted) where omitted lists the ids from
    expected_classes that vanished on the way to feature resolution.
    """
    data = _as_tensor(features)
    present = [int(v) for v in np.unique(mask) if v != IGNORE_LABEL]
    if not present:
        raise EmptySupportError("mask contains only ignored pixels")
    prototypes = [Prototype(class_id=c, vector=masked_average_pool(data, mask, c),
                            n_contributors=1)
                  for c in present]
    omitted = []
    if expected_classes is not None:
        omitted = [int(c) for c in expected_classes if int(c) not in present]
    return prototypes, omitted


def aggregate_bank(per_image: list[list[Prototype]], source: str = "") -> PrototypeBank:
    """Average per-image prototypes over the images containing each class."""
    if not per_image:
        raise ValueError("no image-level prototypes to aggregate")
    sums: dict[int, torch.Tensor] = {}
    counts: dict[int, int] = {}
    dim = None
    for prototypes in per_image:
        for proto in prototypes:
            vec = proto.vector.detach().to(torch.float64)
            if dim is None:
                dim = vec.numel()
            elif vec.numel() != dim:
                raise ValueError("prototype dimensions disagree")
            if proto.class_id in sums:
                sums[proto.class_id] = sums[proto.class_id] + vec
                counts[proto.class_id] += 1
            else:
                sums[proto.class_id] = vec.clone()
                counts[proto.class_id] = 1
    entries = {c: Prototype(class_id=c, vector=sums[c] / counts[c],
                            n_contributors=counts[c])
               for c in sums}
    return PrototypeBank(dim=int(dim), entries=entries, source=source)


def cosine_similarity(x1, x2, epsilon: float = COSINE_EPSILON) -> float:
    """x1.x2 / max(|x1| |x2|, epsilon); zero vectors score 0."""
    a = torch.as_tensor(x1, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(x2, dtype=torch.float64).reshape(-1)
    denom = torch.clamp(a.norm() * b.norm(), min=epsilon)
    return float(a.dot(b) / denom)


def _prototype_matrix(prototypes, dtype) -> tuple[torch.Tensor, list[int]]:
    if isinstance(prototypes, PrototypeBank):
        prototypes = [prototypes.entries[c] for c in prototypes.class_ids()]
    ordered = sorted(prototypes, key=lambda p: p.class_id)
    class_order = [p.class_id for p in ordered]
    if len(set(class_order)) != len(class_order):
        raise ValueError("duplicate class ids among prototypes")
    matrix = torch.stack([p.vector.to(dtype) for p in ordered])
    return matrix, class_order


def score_map(features, prototypes, epsilon: float = COSINE_EPSILON) -> ScoreMap:
    """Per-pixel cosine similarity to every prototype, ascending class order."""
    data = _as_tensor(features)
    first = (prototypes.entries[next(iter(prototypes.entries))]
             if isinstance(prototypes, PrototypeBank) else prototypes[0])
    dtype = torch.promote_types(data.dtype, first.vector.dtype)
    data = data.to(dtype)
    matrix, class_order = _prototype_matrix(prototypes, dtype)
    if matrix.shape[1] != data.shape[2]:
        raise ValueError(
            f"prototype dim {matrix.shape[1]} != feature dim {data.shape[2]}")
    dots = data @ matrix.T                                       # (h, w, N)
    norms = data.norm(dim=2, keepdim=True) * matrix.norm(dim=1)  # (h, w, N)
    scores = (dots / torch.clamp(norms, min=epsilon)).clamp(-1.0, 1.0)
    return ScoreMap(data=scores, class_order=class_order)


def prototype_softmax(scores, temperature: float = 1.0) -> torch.Tensor:
    """Per-pixel softmax over temperature-scaled similarity scores."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    data = scores.data if isinstance(scores, ScoreMap) else scores
    z = data * temperature
    z = z - z.max(dim=-1, keepdim=True).values
    exp = torch.exp(z)
    return exp / exp.sum(dim=-1, keepdim=True)


def upsample_scores(scores: ScoreMap, size: tuple[int, int]) -> ScoreMap:
    """Bilinear upsampling of the similarity channels to a pixel grid."""
    grid = scores.data.permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(grid, size=size, mode="bilinear", align_corners=False)
    return ScoreMap(data=up.squeeze(0).permute(1, 2, 0), class_order=scores.class_order)


def predict_labels(scores: ScoreMap, original_size: tuple[int, int]) -> np.ndarray:
    """Upsample scores, take the per-pixel argmax, map back to class ids.

    Ties break toward the lowest class id.
    """
    if not scores.class_order:
        raise ValueError("empty class order")
    order = np.asarray(scores.class_order)
    ascending = np.argsort(order, kind="stable")
    with torch.no_grad():
        up = upsample_scores(scores, original_size).data
        grid = up.numpy()[:, :, ascending]
    winners = np.argmax(grid, axis=2)          # first max = lowest class id
    return order[ascending][winners].astype(np.uint8)


def compute_bank(encoder, support_set, source: str = "") -> PrototypeBank:
    """Precompute cross-image prototypes from clean support images."""
    from .model import encode  # local import to avoid a cycle at module load

    per_image = []
    omitted_total: dict[int, int] = {}
    for sample in support_set.samples:
        fmap = encode(encoder, sample.image)
        mask = downsample_mask(sample.mask, fmap.stride)
        protos, omitted = extract_prototypes(fmap.data.to(torch.float64), mask,
                                             expected_classes=sample.classes())
        per_image.append(protos)
        for c in omitted:
            omitted_total[c] = omitted_total.get(c, 0) + 1
    bank = aggregate_bank(per_image, source=source)
    bank.omitted_at_feature_resolution = omitted_total
    return bank


def save_bank(path, bank: PrototypeBank) -> None:
    class_ids = bank.class_ids()
    vectors = np.stack([bank.entries[c].vector.detach().to(torch.float64).numpy()
                        for c in class_ids]) if class_ids else np.zeros((0, bank.dim))
    meta = {
        "kind": "prototype_bank",
        "package_version": __version__,
        "dim": bank.dim,
        "class_ids": class_ids,
        "n_contributors": [bank.entries[c].n_contributors for c in class_ids],
        "source": bank.source,
    }
    write_arrays(path, BANK_MAGIC, BANK_VERSION, meta,
                 {"vectors": vectors.astype(np.float64)})


def load_bank(path) -> PrototypeBank:
    _, meta, arrays = read_arrays(path, BANK_MAGIC, BANK_VERSION)
    if meta.get("kind") != "prototype_bank":
        raise FileFormatError(f"{path}: not a prototype bank file")
    vectors = arrays["vectors"]
    dim = int(meta["dim"])
    if vectors.ndim != 2 or vectors.shape[1] != dim:
        raise FileFormatError(f"{path}: vector block shape {vectors.shape} != dim {dim}")
    if vectors.shape[0] != len(meta["class_ids"]):
        raise FileFormatError(f"{path}: class id list does not match vector count")
    entries = {}
    for row, class_id, n_contrib in zip(vectors, meta["class_ids"], meta["n_contributors"]):
        entries[int(class_id)] = Prototype(class_id=int(class_id),
                                           vector=torch.from_numpy(row.copy()),
                                           n_contributors=int(n_contrib))
    return PrototypeBank(dim=dim, entries=entries, source=meta.get("source", ""))
