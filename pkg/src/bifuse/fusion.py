"""Cross-attention fusion of two adapted feature streams into one image."""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import (
    CrossAttentionBlock,
    PixelReassemblyHead,
    init_parameters,
    map_to_tokens,
    seeded_generator,
    sincos_position_embedding,
    tokens_to_map,
)
from .errors import ConfigError, ShapeError


class LatentPair(NamedTuple):
    z_x: torch.Tensor
    z_y: torch.Tensor


@dataclass
class FusionConfig:
    blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("fusion network needs at least one block")


class BidirectionalBlock(nn.Module):
    """One fusion stage: x attends to y and y attends to x, in parallel."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.x_from_y = CrossAttentionBlock(dim, heads, mlp_ratio)
        self.y_from_x = CrossAttentionBlock(dim, heads, mlp_ratio)

    def forward(self, tx, ty):
        return self.x_from_y(tx, ty), self.y_from_x(ty, tx)


class FusionNetwork(nn.Module):
    """Stack of bidirectional cross-attention blocks plus a pixel head.

    The two final streams are channel-concatenated before the head, and the
    sigmoid-bounded head guarantees output pixels in [0, 1] regardless of
    parameter values.
    """

    def __init__(self, channels, upscale, config: FusionConfig, seed=0):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(
            BidirectionalBlock(channels, config.heads, config.mlp_ratio)
            for _ in range(config.blocks)
        )
        self.head = PixelReassemblyHead(2 * channels, 1, upscale)
        init_parameters(self, seeded_generator(seed))

    def fused_feature(self, pair: LatentPair) -> torch.Tensor:
        """Pre-head fused feature map (B, 2c, h, w)."""
        zx, zy = pair
        if zx.shape != zy.shape:
            raise ShapeError(f"latent shapes differ: {tuple(zx.shape)} vs {tuple(zy.shape)}")
        b, c, h, w = zx.shape
        pos = sincos_position_embedding(h, w, c, dtype=zx.dtype, device=zx.device)
        tx = map_to_tokens(zx) + pos
        ty = map_to_tokens(zy) + pos
        for block in self.blocks:
            tx, ty = block(tx, ty)
        return torch.cat([tokens_to_map(tx, h, w), tokens_to_map(ty, h, w)], dim=1)

    def forward(self, pair: LatentPair) -> torch.Tensor:
        return self.head(self.fused_feature(pair))


def encode_pair(encoder_x, encoder_y, adapter_x, adapter_y, image_x, image_y) -> LatentPair:
    """Encode both modalities to adapted latents.

    Gradients reach the adapters only; frozen encoders contribute none.
    """
    if image_x.shape[-2:] != image_y.shape[-2:]:
        raise ShapeError(
            f"input sizes differ: {tuple(image_x.shape[-2:])} vs {tuple(image_y.shape[-2:])}"
        )
    z_x = adapter_x(encoder_x.extract_pyramid(image_x))
    z_y = adapter_y(encoder_y.extract_pyramid(image_y))
    return LatentPair(z_x, z_y)


def fuse(network: FusionNetwork, pair: LatentPair) -> torch.Tensor:
    return network(pair)
