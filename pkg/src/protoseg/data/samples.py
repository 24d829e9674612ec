"""Labeled samples and their on-disk representation.

Images are float arrays in [0,1] with shape H x W x 3; label masks are
uint8 arrays with shape H x W holding class ids below ``n_class`` plus the
ignore value 255. On disk, images are 3-channel 8-bit PNGs and masks are
single-channel 8-bit PNGs whose pixel value is the class id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import SchemaError

IGNORE_LABEL = 255

MANIFEST_VERSION = 1


@dataclass
class LabeledSample:
    image: np.ndarray
    mask: np.ndarray
    name: str

    def validate(self, n_class: int | None = None) -> "LabeledSample":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SchemaError(f"{self.name}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise SchemaError(
                f"{self.name}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}")
        if n_class is not None:
            _check_mask_values(self.mask, n_class, self.name)
        return self

    def classes(self) -> np.ndarray:
        """Sorted unique valid class ids present in the mask."""
        values = np.unique(self.mask)
        return values[values != IGNORE_LABEL]


def _check_mask_values(mask: np.ndarray, n_class: int, context: str) -> None:
    values = np.unique(mask)
    bad = values[(values >= n_class) & (values != IGNORE_LABEL)]
    if bad.size:
        raise SchemaError(f"{context}: mask values {bad.tolist()} outside 0..{n_class - 1} and 255")


def save_mask(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise SchemaError(f"mask must be single-channel HxW, got shape {mask.shape}")
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > 255:
            raise SchemaError("mask values do not fit in 8 bits")
        mask = mask.astype(np.uint8)
    Image.fromarray(mask, mode="L").save(path)


def load_mask(path, n_class: int | None = None) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        raise SchemaError(f"{path}: expected single-channel 8-bit mask, got mode {img.mode}")
    mask = np.asarray(img, dtype=np.uint8)
    if n_class is not None:
        _check_mask_values(mask, n_class, str(path))
    return mask


def save_image(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise SchemaError(f"image must be HxWx3, got shape {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "RGB":
        raise SchemaError(f"{path}: expected 3-channel 8-bit image, got mode {img.mode}")
    return np.asarray(img, dtype=np.float32) / 255.0


def write_dataset(out_dir, samples: list[LabeledSample], n_class: int) -> Path:
    """Write images/, masks/ and a manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        sample.validate(n_class)
        image_rel = f"images/{sample.name}.png"
        mask_rel = f"masks/{sample.name}.png"
        save_image(out_dir / image_rel, sample.image)
        save_mask(out_dir / mask_rel, sample.mask)
        entries.append({"name": sample.name, "image": image_rel, "mask": mask_rel})
    manifest = {"format_version": MANIFEST_VERSION, "n_class": n_class, "samples": entries}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path


def read_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise SchemaError(f"{manifest_path}: unsupported manifest version")
    manifest["_root"] = manifest_path.parent
    return manifest


def load_dataset(manifest_path) -> tuple[list[LabeledSample], int]:
    """Load every sample referenced by a dataset manifest."""
    manifest = read_manifest(manifest_path)
    root = manifest["_root"]
    n_class = int(manifest["n_class"])
    samples = []
    for entry in manifest["samples"]:
        sample = LabeledSample(
            image=load_image(root / entry["image"]),
            mask=load_mask(root / entry["mask"], n_class=n_class),
            name=entry["name"],
        )
        samples.append(sample.validate(n_class))
    return samples, n_class
