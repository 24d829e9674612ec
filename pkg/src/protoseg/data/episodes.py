"""Episode assembly: support-adaptive label remapping and sampling.

An episode pairs one augmented target-domain support crop with one
augmented source-domain query crop. The classes recognized in the
episode are exactly the classes present in the support crop: both masks
are rewritten so class_set[i] becomes i, and query pixels whose class is
not in the support crop become 255.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptySupportError, EpisodeSamplingError
from .augment import augment
from .samples import IGNORE_LABEL, LabeledSample
from .support import SupportSet


@dataclass
class Episode:
    support: LabeledSample
    query: LabeledSample
    class_set: list[int]

    @property
    def n_way(self) -> int:
        return len(self.class_set)


def _index_lut(class_set: np.ndarray) -> np.ndarray:
    lut = np.full(256, IGNORE_LABEL, dtype=np.uint8)
    lut[class_set] = np.arange(len(class_set), dtype=np.uint8)
    return lut


def remap_episode_labels(support_mask: np.ndarray, query_mask: np.ndarray):
    """Rewrite both masks onto the support mask's class index space.

    Returns (remapped support, remapped query, class_set) where class_set
    lists the original ids in ascending order; entry i is the original id
    of remapped label i.
    """
    values = np.unique(support_mask)
    class_set = values[values != IGNORE_LABEL]
    if class_set.size == 0:
        raise EmptySupportError("support mask contains only ignored pixels")
    lut = _index_lut(class_set)
    return lut[support_mask], lut[query_mask], [int(c) for c in class_set]


def restore_labels(remapped_mask: np.ndarray, class_set: list[int]) -> np.ndarray:
    """Inverse of remap_episode_labels on non-ignored pixels."""
    lut = np.full(256, IGNORE_LABEL, dtype=np.uint8)
    lut[np.arange(len(class_set))] = np.asarray(class_set, dtype=np.uint8)
    return lut[remapped_mask]


def sample_episode(query_dataset: list[LabeledSample], support_set: SupportSet,
                   rng: np.random.Generator, crop_size: tuple[int, int],
                   query_index: int | None = None, max_retries: int = 10) -> Episode:
    """Draw and augment one (support, query) pair and remap its labels.

    The query comes from query_index when given (epoch-ordered training)
    or a uniform draw otherwise; the support image is always a uniform
    draw. A support crop that lost every valid pixel to augmentation is
    redrawn up to max_retries times.
    """
    if not query_dataset:
        raise ValueError("query dataset is empty")
    if len(support_set) == 0:
        raise ValueError("support set is empty")
    if query_index is None:
        query_index = int(rng.integers(len(query_dataset)))
    query = augment(query_dataset[query_index], crop_size, rng)

    for _ in range(max_retries):
        support_index = int(rng.integers(len(support_set)))
        support = augment(support_set.samples[support_index], crop_size, rng)
        if np.any(support.mask != IGNORE_LABEL):
            sup_mask, qry_mask, class_set = remap_episode_labels(support.mask, query.mask)
            return Episode(
                support=LabeledSample(support.image, sup_mask, support.name),
                query=LabeledSample(query.image, qry_mask, query.name),
                class_set=class_set,
            )
    raise EpisodeSamplingError(
        f"support crop had no valid pixels after {max_retries} draws")
