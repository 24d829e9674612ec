"""Feature encoder: a dilated VGG-style conv trunk plus a refinement head.

The trunk is a stack of conv blocks (two 3x3 convs + ReLU each) with
stride-2 max pooling after a configurable prefix of blocks; later blocks
use dilated convolutions instead of further downsampling. The refinement
head concatenates a mid-level tap with the trunk output, pools it over a
pyramid of bin sizes, and projects everything to the embedding dimension
used for prototype matching. One encoder instance serves both support
and query images (shared weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import __version__
from .binfile import read_arrays, write_arrays
from .errors import CheckpointMismatchError, FileFormatError

CHECKPOINT_MAGIC = b"PSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    block_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    dilations: list[int] = field(default_factory=lambda: [1, 1, 1, 2, 4])
    downsample_after: frozenset[int] = frozenset({1, 2, 3})
    frm_output_dim: int = 64
    pyramid_bin_sizes: list[int] = field(default_factory=lambda: [1, 2, 3, 6])
    frm_tap_block: int = 3
    use_frm: bool = True
    convs_per_block: int = 2
    kernel_size: int = 3
    in_channels: int = 3
    freeze_blocks: int = 0

    def __post_init__(self):
        self.downsample_after = frozenset(int(b) for b in self.downsample_after)
        n = len(self.block_channels)
        if len(self.dilations) != n:
            raise ValueError("dilations must match block_channels in length")
        if any(b < 1 or b > n for b in self.downsample_after):
            raise ValueError("downsample_after entries must be 1-based block indices")
        if self.use_frm:
            if not 1 <= self.frm_tap_block <= n:
                raise ValueError("frm_tap_block out of range")
            if any(b > self.frm_tap_block for b in self.downsample_after):
                raise ValueError(
                    "no downsampling may occur after the tap block, otherwise the "
                    "tap and trunk features cannot be concatenated")
        if self.freeze_blocks < 0 or self.freeze_blocks > n:
            raise ValueError("freeze_blocks out of range")

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def output_stride(self) -> int:
        return 2 ** len(self.downsample_after)

    @property
    def feature_dim(self) -> int:
        return self.frm_output_dim if self.use_frm else self.block_channels[-1]

    def to_dict(self) -> dict:
        return {
            "block_channels": list(self.block_channels),
            "dilations": list(self.dilations),
            "downsample_after": sorted(self.downsample_after),
            "frm_output_dim": self.frm_output_dim,
            "pyramid_bin_sizes": list(self.pyramid_bin_sizes),
            "frm_tap_block": self.frm_tap_block,
            "use_frm": self.use_frm,
            "convs_per_block": self.convs_per_block,
            "kernel_size": self.kernel_size,
            "in_channels": self.in_channels,
            "freeze_blocks": self.freeze_blocks,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        data["downsample_after"] = frozenset(data["downsample_after"])
        return cls(**data)


@dataclass
class FeatureMap:
    data: torch.Tensor      # (h, w, D)
    stride: int

    @property
    def spatial_size(self) -> tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])


class FeatureRefinement(nn.Module):
    """Concatenate tap and trunk features, pyramid-pool, project to D."""

    def __init__(self, tap_channels: int, trunk_channels: int, bin_sizes: list[int],
                 output_dim: int):
        super().__init__()
        in_channels = tap_channels + trunk_channels
        branch_channels = max(1, in_channels // 4)
        self.bin_sizes = list(bin_sizes)
        self.branches = nn.ModuleList(
            [nn.Conv2d(in_channels, branch_channels, kernel_size=1) for _ in self.bin_sizes])
        self.project = nn.Conv2d(in_channels + branch_channels * len(self.bin_sizes),
                                 output_dim, kernel_size=1)

    def forward(self, tap: torch.Tensor, trunk: torch.Tensor) -> torch.Tensor:
        if tap.shape[-2:] != trunk.shape[-2:]:
            raise ValueError(
                f"tap features {tuple(tap.shape[-2:])} and trunk features "
                f"{tuple(trunk.shape[-2:])} differ spatially")
        x = torch.cat([tap, trunk], dim=1)
        pieces = [x]
        for bin_size, conv in zip(self.bin_sizes, self.branches):
            pooled = F.adaptive_avg_pool2d(x, bin_size)
            pooled = F.relu(conv(pooled))
            pieces.append(F.interpolate(pooled, size=x.shape[-2:], mode="bilinear",
                                        align_corners=False))
        return F.relu(self.project(torch.cat(pieces, dim=1)))


class FeatureEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = config.in_channels
        for out_ch, dilation in zip(config.block_channels, config.dilations):
            layers = []
            for _ in range(config.convs_per_block):
                pad = dilation * (config.kernel_size - 1) // 2
                layers.append(nn.Conv2d(in_ch, out_ch, config.kernel_size,
                                        padding=pad, dilation=dilation))
                layers.append(nn.ReLU(inplace=True))
                in_ch = out_ch
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)
        if config.use_frm:
            self.frm = FeatureRefinement(
                tap_channels=config.block_channels[config.frm_tap_block - 1],
                trunk_channels=config.block_channels[-1],
                bin_sizes=config.pyramid_bin_sizes,
                output_dim=config.frm_output_dim)
        else:
            self.frm = None
        for index in range(config.freeze_blocks):
            for param in self.blocks[index].parameters():
                param.requires_grad_(False)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def output_stride(self) -> int:
        return self.config.output_stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map (B, 3, H, W) images to (B, D, H/stride, W/stride) features."""
        if x.shape[-2] % self.output_stride or x.shape[-1] % self.output_stride:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} not divisible by stride {self.output_stride}")
        tap = None
        for index, block in enumerate(self.blocks, start=1):
            x = block(x)
            if index in self.config.downsample_after:
                x = self.pool(x)
            if index == self.config.frm_tap_block:
                tap = x
        if self.frm is None:
            return x
        return self.frm(tap, x)


def build_encoder(config: EncoderConfig, seed: int,
                  dtype: torch.dtype = torch.float32) -> FeatureEncoder:
    """Construct an encoder with seeded normal init scaled by fan-in."""
    encoder = FeatureEncoder(config)
    generator = torch.Generator().manual_seed(seed)
    for module in encoder.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                module.weight.copy_(
                    torch.randn(module.weight.shape, generator=generator) * std)
                module.bias.zero_()
    return encoder.to(dtype)


class LinearHead(nn.Module):
    """Per-pixel linear classifier (inner-product scores, no bias)."""

    def __init__(self, feature_dim: int, n_class: int):
        super().__init__()
        self.score = nn.Conv2d(feature_dim, n_class, kernel_size=1, bias=False)

    @property
    def n_class(self) -> int:
        return self.score.out_channels

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.score(features)


def build_head(feature_dim: int, n_class: int, seed: int,
               dtype: torch.dtype = torch.float32) -> LinearHead:
    head = LinearHead(feature_dim, n_class)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.score.weight.copy_(
            torch.randn(head.score.weight.shape, generator=generator)
            * math.sqrt(2.0 / feature_dim))
    return head.to(dtype)


def encode(encoder: FeatureEncoder, image: np.ndarray) -> FeatureMap:
    """Encode one HxWx3 image (no gradients) into a FeatureMap."""
    dtype = next(encoder.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        out = encoder(x)
    return FeatureMap(data=out.squeeze(0).permute(1, 2, 0).contiguous(),
                      stride=encoder.output_stride)


def receptive_field(config: EncoderConfig) -> tuple[int, int]:
    """Analytic (receptive field, stride) of one trunk output cell.

    The refinement head's pyramid pooling adds image-wide context and is
    deliberately excluded; this describes the convolutional trunk.
    """
    rf, jump = 1, 1
    for block_index, dilation in enumerate(config.dilations, start=1):
        for _ in range(config.convs_per_block):
            rf += (config.kernel_size - 1) * dilation * jump
        if block_index in config.downsample_after:
            rf += jump  # 2x2 pool
            jump *= 2
    return rf, jump


def save_checkpoint(path, encoder: FeatureEncoder, head: LinearHead | None = None,
                    meta: dict | None = None) -> None:
    arrays = {f"encoder.{k}": v.detach().cpu().numpy()
              for k, v in encoder.state_dict().items()}
    if head is not None:
        arrays.update({f"head.{k}": v.detach().cpu().numpy()
                       for k, v in head.state_dict().items()})
    header = {
        "kind": "checkpoint",
        "package_version": __version__,
        "encoder_config": encoder.config.to_dict(),
        "head_classes": None if head is None else head.n_class,
        "meta": meta or {},
    }
    write_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)


def load_checkpoint(path, expected_config: EncoderConfig | None = None):
    """Rebuild (encoder, head, meta) from a checkpoint file."""
    _, header, arrays = read_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if header.get("kind") != "checkpoint":
        raise FileFormatError(f"{path}: not a checkpoint file")
    config = EncoderConfig.from_dict(header["encoder_config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise CheckpointMismatchError(
            f"{path}: checkpoint config {config.to_dict()} does not match "
            f"expected {expected_config.to_dict()}")
    encoder_state = {k[len("encoder."):]: torch.from_numpy(v)
                     for k, v in arrays.items() if k.startswith("encoder.")}
    dtype = next(iter(encoder_state.values())).dtype
    encoder = FeatureEncoder(config).to(dtype)
    encoder.load_state_dict(encoder_state)
    head = None
    if header.get("head_classes") is not None:
        head_state = {k[len("head."):]: torch.from_numpy(v)
                      for k, v in arrays.items() if k.startswith("head.")}
        head = LinearHead(config.feature_dim, int(header["head_classes"])).to(dtype)
        head.load_state_dict(head_state)
    return encoder, head, header.get("meta", {})
