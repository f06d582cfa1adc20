"""Hierarchical adapter recalibrating a frozen feature pyramid.

The cascade enters at the deepest level and folds in each shallower level
through a residual fusion stage; two-layer projections with zero-initialized
output convs make every stage an exact pass-through of its shallow input at
construction time, so the whole adapter starts as the plain residual /
upsample path of the shallowest level.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeaturePyramid
from .blocks import init_parameters, seeded_generator, zero_module
from .errors import ConfigError, StructuralError


@dataclass
class AdapterConfig:
    channels: int | None = None  # None -> encoder embed_dim
    upsample: int = 4
    share: bool = False
    kind: str = "hierarchical"  # "simple" swaps in the parameter-free variant

    def __post_init__(self):
        if self.upsample < 1 or (self.upsample & (self.upsample - 1)) != 0:
            raise ConfigError(f"upsample factor must be a power of two, got {self.upsample}")
        if self.kind not in ("hierarchical", "simple"):
            raise ConfigError(f"unknown adapter kind '{self.kind}'")


class FuseStage(nn.Module):
    """Fold an aligned deep feature into a shallow one with a residual add."""

    def __init__(self, channels):
        super().__init__()
        self.proj_in = nn.Conv2d(2 * channels, channels, 1)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, deep, shallow):
        if deep.shape[1] != shallow.shape[1]:
            raise StructuralError(
                f"channel mismatch: deep {deep.shape[1]} vs shallow {shallow.shape[1]}"
            )
        if deep.shape[-2:] != shallow.shape[-2:]:
            deep = F.interpolate(deep, size=shallow.shape[-2:], mode="nearest")
        h = self.proj_in(torch.cat([deep, shallow], dim=1))
        h = self.proj_out(F.gelu(h))
        return h + shallow


class UpsampleStage(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, feat):
        feat = F.interpolate(feat, scale_factor=2, mode="nearest")
        return F.gelu(self.conv(feat))


class HierarchicalAdapter(nn.Module):
    """Deep-to-shallow fusion cascade followed by x2 upsample stages."""

    def __init__(self, in_channels, config: AdapterConfig, seed=0):
        super().__init__()
        self.config = config
        self.channels = config.channels or in_channels
        self.in_proj = (
            nn.Conv2d(in_channels, self.channels, 1)
            if self.channels != in_channels
            else nn.Identity()
        )
        self.stages = nn.ModuleList(FuseStage(self.channels) for _ in range(3))
        n_up = int(math.log2(config.upsample))
        self.upsample_head = nn.Sequential(
            *(UpsampleStage(self.channels) for _ in range(n_up))
        )
        init_parameters(self, seeded_generator(seed))
        for stage in self.stages:
            zero_module(stage.proj_out)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        levels = pyramid.levels
        if len(levels) != 4:
            raise StructuralError(f"adapter expects a 4-level pyramid, got {len(levels)}")
        shallow_to_deep = [self.in_proj(l) for l in levels]
        x = shallow_to_deep[-1]
        for stage, level in zip(self.stages, reversed(shallow_to_deep[:-1])):
            x = stage(x, level)
        return self.upsample_head(x)

    def residual_reference(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """The pure shallow-level path the adapter equals at zero init."""
        return self.upsample_head(self.in_proj(pyramid.levels[0]))


class SimpleUpsampleAdapter(nn.Module):
    """Parameter-free stand-in: level average plus nearest upsampling."""

    def __init__(self, in_channels, config: AdapterConfig, seed=0):
        super().__init__()
        self.config = config
        self.channels = config.channels or in_channels
        if self.channels != in_channels:
            raise ConfigError("simple adapter cannot change channel width")

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        levels = pyramid.levels
        if len(levels) != 4:
            raise StructuralError(f"adapter expects a 4-level pyramid, got {len(levels)}")
        x = torch.stack(levels, dim=0).mean(dim=0)
        return F.interpolate(x, scale_factor=self.config.upsample, mode="nearest")


def build_adapter(in_channels, config: AdapterConfig, seed=0) -> nn.Module:
    cls = HierarchicalAdapter if config.kind == "hierarchical" else SimpleUpsampleAdapter
    return cls(in_channels, config, seed=seed)


def adapt(adapter: nn.Module, pyramid: FeaturePyramid) -> torch.Tensor:
    return adapter(pyramid)


def fuse_stage(stage: FuseStage, deep: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
    return stage(deep, shallow)
