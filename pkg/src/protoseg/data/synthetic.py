"""Procedural two-domain benchmark generator.

Each image is a stack of horizontal "stuff" bands (classes whose
shape_density is 0) overlaid with randomly placed "thing" shapes
(rectangles, ellipses, polylines), colored by a per-domain palette plus
per-pixel Gaussian texture noise. Masks are exact by construction. A
source/target domain pair differs in palette and noise level, which is
the domain shift the adaptation has to bridge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from ..errors import SchemaError
from .samples import LabeledSample


@dataclass
class SyntheticDomainSpec:
    n_class: int
    image_size: tuple[int, int]
    palette: np.ndarray                 # (n_class, 3) floats in [0,1]
    texture_noise_sigma: float
    shape_density: np.ndarray           # expected instance count for thing classes
    class_frequency: np.ndarray         # per-class inclusion probability in (0,1]
    seed: int
    stuff_classes: tuple[int, ...] = (0,)   # rendered as horizontal bands
    name: str = "domain"

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.float64)
        self.shape_density = np.asarray(self.shape_density, dtype=np.float64)
        self.class_frequency = np.asarray(self.class_frequency, dtype=np.float64)
        self.stuff_classes = tuple(int(c) for c in self.stuff_classes)

    def validate(self) -> "SyntheticDomainSpec":
        if len(self.palette) != self.n_class:
            raise SchemaError(
                f"palette has {len(self.palette)} entries for {self.n_class} classes")
        if len(self.shape_density) != self.n_class or len(self.class_frequency) != self.n_class:
            raise SchemaError("shape_density and class_frequency must have n_class entries")
        if np.any(self.class_frequency <= 0) or np.any(self.class_frequency > 1):
            raise SchemaError("class_frequency values must lie in (0, 1]")
        stuff = list(self.stuff_classes)
        if not stuff or any(c < 0 or c >= self.n_class for c in stuff):
            raise SchemaError("stuff_classes must name valid class ids")
        if not np.any(self.class_frequency[stuff] >= 1.0):
            raise SchemaError("need at least one stuff class with frequency 1")
        if self.texture_noise_sigma < 0:
            raise SchemaError("texture_noise_sigma must be nonnegative")
        return self

    def thing_classes(self) -> list[int]:
        return [c for c in range(self.n_class) if c not in self.stuff_classes]

    def to_dict(self) -> dict:
        return {
            "n_class": self.n_class,
            "image_size": list(self.image_size),
            "palette": self.palette.tolist(),
            "texture_noise_sigma": self.texture_noise_sigma,
            "shape_density": self.shape_density.tolist(),
            "class_frequency": self.class_frequency.tolist(),
            "seed": self.seed,
            "stuff_classes": list(self.stuff_classes),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticDomainSpec":
        data = dict(data)
        data["image_size"] = tuple(data["image_size"])
        return cls(**data)


def _draw_thing(draw: ImageDraw.ImageDraw, rng: np.random.Generator, class_id: int,
                height: int, width: int) -> None:
    kind = ("rect", "ellipse", "polyline")[class_id % 3]
    scale = min(height, width)
    if kind == "polyline":
        n_pts = int(rng.integers(3, 6))
        xs = rng.uniform(0, width, n_pts)
        ys = rng.uniform(0, height, n_pts)
        line_w = max(2, int(round(scale / 32)))
        draw.line(list(zip(xs, ys)), fill=class_id, width=line_w)
        return
    w = rng.uniform(scale / 12, scale / 4)
    h = rng.uniform(scale / 12, scale / 4)
    cx = rng.uniform(w / 2, width - w / 2)
    cy = rng.uniform(h / 2, height - h / 2)
    box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    if kind == "rect":
        draw.rectangle(box, fill=class_id)
    else:
        draw.ellipse(box, fill=class_id)


def _render_mask(spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    height, width = spec.image_size
    stuff = [c for c in spec.stuff_classes if rng.random() < spec.class_frequency[c]]
    weights = rng.uniform(0.6, 1.4, size=len(stuff))
    bounds = np.rint(np.cumsum(weights) / weights.sum() * height).astype(int)
    canvas = Image.new("L", (width, height), color=int(stuff[0]))
    draw = ImageDraw.Draw(canvas)
    top = 0
    for class_id, bottom in zip(stuff, bounds):
        draw.rectangle((0, top, width, int(bottom)), fill=int(class_id))
        top = int(bottom)

    instances = []
    for class_id in spec.thing_classes():
        if spec.shape_density[class_id] <= 0:
            continue    # class dropped from this domain (open-set pairs)
        if rng.random() >= spec.class_frequency[class_id]:
            continue
        count = max(1, int(rng.poisson(spec.shape_density[class_id])))
        instances.extend([int(class_id)] * count)
    for idx in rng.permutation(len(instances)):
        _draw_thing(draw, rng, instances[idx], height, width)
    return np.asarray(canvas, dtype=np.uint8)


def generate_synthetic_domain(spec: SyntheticDomainSpec, n_images: int) -> list[LabeledSample]:
    """Render n_images samples; image i depends only on (spec.seed, i)."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    spec.validate()
    samples = []
    for index in range(n_images):
        rng = np.random.default_rng([spec.seed, index])
        mask = _render_mask(spec, rng)
        image = spec.palette[mask].astype(np.float64)
        if spec.texture_noise_sigma > 0:
            image = image + rng.normal(0.0, spec.texture_noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(LabeledSample(image=image, mask=mask,
                                     name=f"{spec.name}_{index:04d}"))
    return samples


# Source palette: saturated primaries. Target palette: reshuffled hues so a
# pure color->class mapping learned on source misfires on target (several
# target colors sit close to a *different* source class).
_SOURCE_PALETTE = [
    (0.53, 0.81, 0.92),  # 0 sky band
    (0.66, 0.66, 0.66),  # 1 wall band
    (0.25, 0.25, 0.28),  # 2 road band
    (0.33, 0.55, 0.24),  # 3 grass band
    (0.85, 0.15, 0.15),  # 4 rect
    (0.95, 0.85, 0.10),  # 5 ellipse
    (0.90, 0.55, 0.10),  # 6 polyline
    (0.20, 0.30, 0.85),  # 7 rect
    (0.60, 0.20, 0.70),  # 8 ellipse
    (0.10, 0.75, 0.75),  # 9 polyline
    (0.95, 0.60, 0.75),  # 10 rect
    (0.55, 0.35, 0.20),  # 11 ellipse
]

_TARGET_PALETTE = [
    (0.85, 0.65, 0.45),  # 0 sky band   (~ source polyline 6)
    (0.45, 0.50, 0.62),  # 1 wall band
    (0.55, 0.50, 0.45),  # 2 road band  (~ source ellipse 11)
    (0.20, 0.35, 0.50),  # 3 grass band
    (0.55, 0.05, 0.30),  # 4 rect
    (0.60, 0.60, 0.30),  # 5 ellipse
    (0.50, 0.25, 0.55),  # 6 polyline
    (0.10, 0.55, 0.35),  # 7 rect       (~ source grass 3)
    (0.90, 0.90, 0.85),  # 8 ellipse
    (0.30, 0.15, 0.10),  # 9 polyline
    (0.20, 0.75, 0.90),  # 10 rect      (~ source sky 0)
    (0.70, 0.40, 0.40),  # 11 ellipse
]

DEFAULT_N_CLASS = 12
DEFAULT_IMAGE_SIZE = (128, 128)


def default_benchmark_specs(seed: int = 0,
                            image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
                            exclude_from_source: tuple[int, ...] = ()) -> tuple[
                                SyntheticDomainSpec, SyntheticDomainSpec]:
    """Source/target spec pair for the built-in 12-class benchmark.

    exclude_from_source drops thing classes from the source domain only,
    which turns the pair into an open-set adaptation benchmark with
    target-private classes.
    """
    stuff = (0, 1, 2, 3)
    density = np.array([0.0] * 4 + [1.2] * 8)
    frequency = np.array([1.0] * 4 + [0.5] * 8)
    src_density = density.copy()
    for class_id in exclude_from_source:
        if class_id in stuff:
            raise SchemaError("only thing classes can be excluded from the source domain")
        src_density[class_id] = 0.0
    source = SyntheticDomainSpec(
        n_class=DEFAULT_N_CLASS, image_size=image_size, palette=_SOURCE_PALETTE,
        texture_noise_sigma=0.05, shape_density=src_density,
        class_frequency=frequency, seed=seed * 2 + 1, stuff_classes=stuff, name="source")
    target = SyntheticDomainSpec(
        n_class=DEFAULT_N_CLASS, image_size=image_size, palette=_TARGET_PALETTE,
        texture_noise_sigma=0.08, shape_density=density,
        class_frequency=frequency, seed=seed * 2 + 2, stuff_classes=stuff, name="target")
    return source, target
