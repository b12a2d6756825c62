"""Spatial-spectral feature extraction with factored 3-D convolutions.

Every conventional 3x3x3 convolution is replaced by a 1x3x3 spatial
convolution followed by a 3x1x1 spectral convolution, so no parameter
depends on the input band count and one parameter set serves inputs with
any number of bands. Spatial resolution is reduced by 8 in total (stem
conv, stem pool, stage-2 stride) and the band axis by 4 (one pool after
each of the first two stages); odd band counts pool with ceiling
semantics via edge replication.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .hsv_io import HSVFrame

SPATIAL_STRIDE = 8
SPECTRAL_STRIDE = 4


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 64
    stage_widths: tuple[int, ...] = (32, 64)
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if len(self.stage_widths) < 2:
            raise ValueError("need at least two stages")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")


def _norm(channels: int) -> nn.Module:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class FactoredConvUnit(nn.Module):
    """1x3x3 spatial conv then 3x1x1 spectral conv, each normed + ReLU."""

    def __init__(self, c_in: int, c_out: int, spatial_stride: int = 1):
        super().__init__()
        self.conv_spatial = nn.Conv3d(
            c_in, c_out, (1, 3, 3), stride=(1, spatial_stride, spatial_stride),
            padding=(0, 1, 1), bias=False,
        )
        self.norm_spatial = _norm(c_out)
        self.conv_spectral = nn.Conv3d(c_out, c_out, (3, 1, 1), padding=(1, 0, 0), bias=False)
        self.norm_spectral = _norm(c_out)

    def forward(self, x):
        x = F.relu(self.norm_spatial(self.conv_spatial(x)))
        return F.relu(self.norm_spectral(self.conv_spectral(x)))


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, spatial_stride: int = 1):
        super().__init__()
        self.unit1 = FactoredConvUnit(c_in, c_out, spatial_stride)
        self.unit2 = FactoredConvUnit(c_out, c_out)
        if c_in != c_out or spatial_stride != 1:
            self.skip = nn.Sequential(
                nn.Conv3d(c_in, c_out, 1, stride=(1, spatial_stride, spatial_stride), bias=False),
                _norm(c_out),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return F.relu(self.unit2(self.unit1(x)) + self.skip(x))


def spectral_pool(x: torch.Tensor) -> torch.Tensor:
    """Average-pool the band axis by 2, replicating the last band when odd."""
    if x.shape[2] % 2:
        x = F.pad(x, (0, 0, 0, 0, 0, 1), mode="replicate")
    return F.avg_pool3d(x, kernel_size=(2, 1, 1), stride=(2, 1, 1))


class SpectralSpatialBackbone(nn.Module):
    """Maps (batch, 1, B, H, W) inputs to (batch, C, ceil(B/4), H/8, W/8)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.stem = FactoredConvUnit(1, widths[0], spatial_stride=2)
        self.pool = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        stages = [ResidualBlock(widths[0], widths[0])]
        for i in range(1, len(widths)):
            stride = 2 if i == 1 else 1
            stages.append(ResidualBlock(widths[i - 1], widths[i], spatial_stride=stride))
        self.stages = nn.ModuleList(stages)
        self.proj = nn.Conv3d(widths[-1], cfg.channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (batch, 1, bands, h, w), got {tuple(x.shape)}")
        if x.shape[-1] % SPATIAL_STRIDE or x.shape[-2] % SPATIAL_STRIDE:
            raise ValueError(
                f"spatial dims must be divisible by {SPATIAL_STRIDE}, got {tuple(x.shape[-2:])}"
            )
        if x.shape[2] < 4:
            raise ValueError("need at least 4 bands")
        x = self.pool(self.stem(x))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < 2:
                x = spectral_pool(x)
        return self.proj(x)

    def spatial_parameters(self):
        """Parameters of the 1x3x3 (spatial) convolutions."""
        return [p for name, p in self.named_parameters() if "conv_spatial" in name]

    def spectral_parameters(self):
        return [p for name, p in self.named_parameters() if "conv_spectral" in name]


def init_backbone(cfg: BackboneConfig) -> SpectralSpatialBackbone:
    torch.manual_seed(cfg.seed)
    return SpectralSpatialBackbone(cfg)


def output_shape(cfg: BackboneConfig, bands: int, height: int, width: int) -> tuple[int, int, int, int]:
    return (cfg.channels, math.ceil(bands / SPECTRAL_STRIDE), height // SPATIAL_STRIDE, width // SPATIAL_STRIDE)


def extract_features(backbone: SpectralSpatialBackbone, patch: HSVFrame) -> torch.Tensor:
    """Single-patch feature extraction, returns (C, B', H', W')."""
    x = torch.as_tensor(patch.data, dtype=torch.float32)[None, None]
    with torch.no_grad():
        return backbone(x)[0]
