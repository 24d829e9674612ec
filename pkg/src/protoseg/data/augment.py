"""Scaling-and-cropping augmentation for (image, mask) pairs.

Applied in order: uniform random scale in [0.9, 1.1], horizontal flip
with probability 0.5, rotation uniform in [-10, +10] degrees, then a
random crop. Images are resampled bilinearly, masks nearest-neighbor, so
a mask can never gain a label it did not have. Pixels invented by
rotation or padding get image value 0 and mask value 255, keeping them
out of every loss and every prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .samples import IGNORE_LABEL, LabeledSample

SCALE_RANGE = (0.9, 1.1)
ROTATION_RANGE_DEG = (-10.0, 10.0)
FLIP_PROBABILITY = 0.5


@dataclass
class AugmentParams:
    scale: float
    flip: bool
    angle_deg: float
    crop_offset: tuple[int, int]


def _scaled_size(size: tuple[int, int], scale: float) -> tuple[int, int]:
    return max(1, int(round(size[0] * scale))), max(1, int(round(size[1] * scale)))


def draw_augment_params(rng: np.random.Generator, image_size: tuple[int, int],
                        crop_size: tuple[int, int]) -> AugmentParams:
    scale = float(rng.uniform(*SCALE_RANGE))
    flip = bool(rng.random() < FLIP_PROBABILITY)
    angle = float(rng.uniform(*ROTATION_RANGE_DEG))
    sh, sw = _scaled_size(image_size, scale)
    pad_h, pad_w = max(sh, crop_size[0]), max(sw, crop_size[1])
    oy = int(rng.integers(0, pad_h - crop_size[0] + 1))
    ox = int(rng.integers(0, pad_w - crop_size[1] + 1))
    return AugmentParams(scale=scale, flip=flip, angle_deg=angle, crop_offset=(oy, ox))


def apply_augment(sample: LabeledSample, params: AugmentParams,
                  crop_size: tuple[int, int]) -> LabeledSample:
    image, mask = sample.image, sample.mask

    sh, sw = _scaled_size(mask.shape, params.scale)
    if (sh, sw) != mask.shape:
        fy, fx = sh / mask.shape[0], sw / mask.shape[1]
        image = ndimage.zoom(image, (fy, fx, 1.0), order=1, mode="nearest")
        mask = ndimage.zoom(mask, (fy, fx), order=0, mode="nearest")
        assert mask.shape == (sh, sw)

    if params.flip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]

    if params.angle_deg != 0.0:
        image = ndimage.rotate(image, params.angle_deg, reshape=False, order=1, cval=0.0)
        image = np.clip(image, 0.0, 1.0)
        mask = ndimage.rotate(mask, params.angle_deg, reshape=False, order=0,
                              cval=IGNORE_LABEL).astype(np.uint8)

    pad_h = max(0, crop_size[0] - mask.shape[0])
    pad_w = max(0, crop_size[1] - mask.shape[1])
    if pad_h or pad_w:
        pads = ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
        image = np.pad(image, pads + ((0, 0),), constant_values=0.0)
        mask = np.pad(mask, pads, constant_values=IGNORE_LABEL)

    oy, ox = params.crop_offset
    if oy + crop_size[0] > mask.shape[0] or ox + crop_size[1] > mask.shape[1]:
        raise ValueError("crop offset outside the padded image")
    image = image[oy:oy + crop_size[0], ox:ox + crop_size[1]]
    mask = mask[oy:oy + crop_size[0], ox:ox + crop_size[1]]
    return LabeledSample(image=np.ascontiguousarray(image, dtype=np.float32),
                         mask=np.ascontiguousarray(mask), name=sample.name)


def augment(sample: LabeledSample, crop_size: tuple[int, int],
            rng: np.random.Generator) -> LabeledSample:
    params = draw_augment_params(rng, sample.mask.shape, crop_size)
    return apply_augment(sample, params, crop_size)
