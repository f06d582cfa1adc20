"""Shared transformer building blocks.

Attention here scores queries against context through layer-normalized
projections but takes values from the raw context stream, so a block with
identity value/output projections and a zeroed feedforward reduces exactly
to ``query + attention_weights @ context``.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StructuralError


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministically initialize a module's parameters in-place.

    Weights of rank >= 2 draw from N(0, 0.02); rank-1 weights (norms) are set
    to one; biases to zero. Registration order makes this reproducible across
    processes for a fixed seed.
    """
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.ndim >= 2:
                p.normal_(0.0, 0.02, generator=generator)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        with torch.no_grad():
            p.zero_()
    return module


def sincos_position_embedding(h, w, dim, dtype=torch.float32, device=None):
    """2D sine-cosine position table of shape (h*w, dim)."""
    if dim % 4 != 0:
        raise ConfigError(f"position embedding width must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = torch.arange(quarter, dtype=torch.float64) / quarter
    omega = 1.0 / (10000.0 ** omega)
    ys = torch.arange(h, dtype=torch.float64)
    xs = torch.arange(w, dtype=torch.float64)
    grid_y = ys[:, None].repeat(1, w).reshape(-1)
    grid_x = xs[None, :].repeat(h, 1).reshape(-1)
    out_y = grid_y[:, None] * omega[None, :]
    out_x = grid_x[:, None] * omega[None, :]
    table = torch.cat(
        [torch.sin(out_y), torch.cos(out_y), torch.sin(out_x), torch.cos(out_x)], dim=1
    )
    return table.to(dtype=dtype, device=device)


def map_to_tokens(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = feat.shape
    return feat.reshape(b, c, h * w).transpose(1, 2)


def tokens_to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, n, c = tokens.shape
    if n != h * w:
        raise StructuralError(f"token count {n} does not match {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class Attention(nn.Module):
    """Multi-head attention of a query stream over a context stream."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_c = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context, return_weights=False):
        if query.shape[-1] != context.shape[-1]:
            raise StructuralError(
                f"query width {query.shape[-1]} != context width {context.shape[-1]}"
            )
        q = self._split(self.to_q(self.norm_q(query)))
        k = self._split(self.to_k(self.norm_c(context)))
        v = self._split(self.to_v(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = weights @ v
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.dim)
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class TransformerBlock(nn.Module):
    """Self-attention block: residual attention followed by residual MLP."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, tokens):
        tokens = tokens + self.attn(tokens, tokens)
        tokens = tokens + self.mlp(tokens)
        return tokens


class CrossAttentionBlock(nn.Module):
    """Query stream attends to a context stream, then a residual feedforward."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, query, context, return_weights=False):
        if return_weights:
            att, weights = self.attn(query, context, return_weights=True)
        else:
            att = self.attn(query, context)
        out = query + att
        out = out + self.mlp(out)
        if return_weights:
            return out, weights
        return out


class PixelReassemblyHead(nn.Module):
    """Project a feature map to pixels: conv, pixel shuffle, sigmoid bound.

    Output values lie in [0, 1] for any parameters; zero input with zero
    biases maps every pixel to 0.5.
    """

    def __init__(self, in_channels, out_channels, upscale):
        super().__init__()
        if upscale < 1:
            raise ConfigError(f"upscale must be >= 1, got {upscale}")
        self.upscale = upscale
        self.out_channels = out_channels
        self.mix = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.expand = nn.Conv2d(in_channels, out_channels * upscale * upscale, 1)
        self.shuffle = nn.PixelShuffle(upscale)

    def forward(self, feat):
        h = F.gelu(self.mix(feat))
        h = self.expand(h)
        if self.upscale > 1:
            h = self.shuffle(h)
        return torch.sigmoid(h)
