from .samples import (
    IGNORE_LABEL,
    LabeledSample,
    load_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    write_dataset,
)
from .synthetic import SyntheticDomainSpec, default_benchmark_specs, generate_synthetic_domain
from .support import SupportSet, construct_support_set, load_support_set, save_support_set
from .episodes import Episode, remap_episode_labels, restore_labels, sample_episode
from .augment import AugmentParams, apply_augment, augment, draw_augment_params

__all__ = [
    "IGNORE_LABEL",
    "LabeledSample",
    "load_dataset",
    "load_image",
    "load_mask",
    "save_image",
    "save_mask",
    "write_dataset",
    "SyntheticDomainSpec",
    "default_benchmark_specs",
    "generate_synthetic_domain",
    "SupportSet",
    "construct_support_set",
    "load_support_set",
    "save_support_set",
    "Episode",
    "remap_episode_labels",
    "restore_labels",
    "sample_episode",
    "AugmentParams",
    "apply_augment",
    "augment",
    "draw_augment_params",
]
