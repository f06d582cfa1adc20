"""Per-modality decoders that rebuild a source image from its adapted feature."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import (
    PixelReassemblyHead,
    TransformerBlock,
    init_parameters,
    map_to_tokens,
    seeded_generator,
    sincos_position_embedding,
    tokens_to_map,
)
from .errors import ConfigError, StructuralError


@dataclass
class ReconConfig:
    blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("reconstruction branch needs at least one block")


class ReconstructionBranch(nn.Module):
    """Transformer decoder over adapted-feature tokens plus a pixel head.

    Output matches the source resolution (``upscale`` recovers the ratio
    between feature grid and pixels) with values bounded to [0, 1].
    """

    def __init__(self, channels, out_channels, upscale, config: ReconConfig, seed=0):
        super().__init__()
        self.channels = channels
        self.out_channels = out_channels
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, config.heads, config.mlp_ratio)
            for _ in range(config.blocks)
        )
        self.head = PixelReassemblyHead(channels, out_channels, upscale)
        init_parameters(self, seeded_generator(seed))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.ndim != 4 or feat.shape[1] != self.channels:
            raise StructuralError(
                f"expected (B,{self.channels},h,w) feature, got {tuple(feat.shape)}"
            )
        b, c, h, w = feat.shape
        tokens = map_to_tokens(feat)
        tokens = tokens + sincos_position_embedding(
            h, w, c, dtype=tokens.dtype, device=tokens.device
        )
        for block in self.blocks:
            tokens = block(tokens)
        return self.head(tokens_to_map(tokens, h, w))


def reconstruct(branch: ReconstructionBranch, feat: torch.Tensor) -> torch.Tensor:
    return branch(feat)
