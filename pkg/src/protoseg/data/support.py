"""Support-set construction by class-occurrence accumulation.

A single seeded permutation of the candidate dataset is traversed once.
Every class found in an image increments that class's occurrence counter
unless the counter already reached k_shot; an image is admitted iff it
contributed at least one increment. The resulting handful of images is
the only target-domain annotation budget the whole method consumes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .samples import IGNORE_LABEL, LabeledSample, load_image, load_mask, read_manifest

SUPPORT_MANIFEST_VERSION = 1


@dataclass
class SupportSet:
    samples: list[LabeledSample]
    k_shot: int
    n_class: int
    occurrence: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    def unsaturated_classes(self) -> list[int]:
        """Classes whose occurrence never reached k_shot in the single pass."""
        return [c for c in range(self.n_class) if self.occurrence[c] < self.k_shot]


def construct_support_set(dataset: list[LabeledSample], k_shot: int, n_class: int,
                          seed: int) -> SupportSet:
    """Run the accumulation pass over a seeded permutation of the dataset.

    Args:
        dataset: candidate pool, typically target-domain images.
        k_shot: per-class occurrence cap.
        n_class: number of valid class ids.
        seed: seeds the traversal permutation; fixes the result.
    """
    if k_shot < 1:
        raise ValueError(f"k_shot must be >= 1, got {k_shot}")
    if n_class < 1:
        raise ValueError(f"n_class must be >= 1, got {n_class}")
    if not dataset:
        raise ValueError("dataset is empty")
    occurrence = np.zeros(n_class, dtype=np.int64)
    admitted: list[LabeledSample] = []
    order = np.random.default_rng(seed).permutation(len(dataset))
    for index in order:
        sample = dataset[index]
        present = set(int(v) for v in np.unique(sample.mask) if v != IGNORE_LABEL)
        if any(v >= n_class for v in present):
            raise SchemaError(f"{sample.name}: mask label outside 0..{n_class - 1}")
        contributed = False
        for class_id in range(n_class):
            if occurrence[class_id] < k_shot and class_id in present:
                occurrence[class_id] += 1
                contributed = True
        if contributed:
            admitted.append(sample)
    if not admitted:
        raise ValueError("no image was admitted; all masks are fully ignored")
    return SupportSet(samples=admitted, k_shot=k_shot, n_class=n_class,
                      occurrence=occurrence)


def save_support_set(path, support: SupportSet, dataset_manifest_path) -> Path:
    """Persist as a manifest subset plus the occurrence array."""
    path = Path(path)
    manifest = read_manifest(dataset_manifest_path)
    root = manifest["_root"]
    by_name = {entry["name"]: entry for entry in manifest["samples"]}
    entries = []
    for sample in support.samples:
        entry = by_name.get(sample.name)
        if entry is None:
            raise SchemaError(f"support sample {sample.name!r} not found in dataset manifest")
        entries.append({
            "name": sample.name,
            "image": os.path.relpath(root / entry["image"], path.parent),
            "mask": os.path.relpath(root / entry["mask"], path.parent),
        })
    payload = {
        "format_version": SUPPORT_MANIFEST_VERSION,
        "n_class": support.n_class,
        "k_shot": support.k_shot,
        "occurrence": support.occurrence.tolist(),
        "samples": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def load_support_set(path) -> SupportSet:
    path = Path(path)
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != SUPPORT_MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported support manifest version")
    n_class = int(payload["n_class"])
    samples = []
    for entry in payload["samples"]:
        sample = LabeledSample(
            image=load_image(path.parent / entry["image"]),
            mask=load_mask(path.parent / entry["mask"], n_class=n_class),
            name=entry["name"],
        )
        samples.append(sample.validate(n_class))
    return SupportSet(samples=samples, k_shot=int(payload["k_shot"]), n_class=n_class,
                      occurrence=np.asarray(payload["occurrence"], dtype=np.int64))
