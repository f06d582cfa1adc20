"""Frozen vision-transformer encoder exposing a four-level feature pyramid.

The encoder is a plain pre-norm ViT with fixed 2D sine-cosine position
tables, so it accepts any input whose sides are multiples of the patch
size. Weights are either deterministically seeded or loaded from a flat
tensor archive keyed by :func:`weight_manifest`.
"""

import contextlib
import warnings
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import (
    TransformerBlock,
    init_parameters,
    seeded_generator,
    sincos_position_embedding,
)
from .errors import ConfigError, ShapeError, WeightLoadError

# Extra archive keys silently dropped on load: the pyramid keeps patch
# tokens only.
_IGNORABLE_WEIGHT_KEYS = ("cls_token", "register_tokens", "mask_token", "pos_embed")


@dataclass
class EncoderConfig:
    depth: int = 12
    embed_dim: int = 64
    patch_size: int = 16
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tap_layers: tuple = (2, 5, 8, 11)
    seed: int = 7
    weights: str | None = None
    frozen: bool = True
    shared: bool = True

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if len(self.tap_layers) != 4:
            raise ConfigError(f"expected 4 tap layers, got {len(self.tap_layers)}")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigError(f"tap layers must be strictly increasing: {self.tap_layers}")
        if self.tap_layers[-1] >= self.depth:
            raise ConfigError(
                f"tap layer {self.tap_layers[-1]} out of range for depth {self.depth}"
            )
        if self.depth < 1 or self.patch_size < 1:
            raise ConfigError("depth and patch_size must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.embed_dim % 4 != 0:
            raise ConfigError(f"embed_dim must be divisible by 4, got {self.embed_dim}")


@dataclass
class FeaturePyramid:
    """Four feature maps of shape (B, d, H/p, W/p), shallow to deep."""

    levels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ConfigError(f"pyramid needs exactly 4 levels, got {len(self.levels)}")
        shapes = {tuple(l.shape) for l in self.levels}
        if len(shapes) != 1:
            raise ConfigError(f"pyramid levels disagree on shape: {sorted(shapes)}")

    @property
    def grid(self):
        return tuple(self.levels[0].shape[-2:])

    @property
    def channels(self):
        return self.levels[0].shape[1]


class FrozenEncoder(nn.Module):
    """ViT trunk tapped at four intermediate layers.

    When ``config.frozen`` is true every parameter has requires_grad False
    and the forward pass runs under no_grad, so training can never touch
    the weights.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(
            3, config.embed_dim, config.patch_size, stride=config.patch_size
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        init_parameters(self, seeded_generator(config.seed))
        if config.frozen:
            self.requires_grad_(False)
            self.eval()

    @property
    def frozen(self):
        return self.config.frozen

    def train(self, mode=True):
        # A frozen encoder stays in eval mode permanently.
        if self.config.frozen:
            return super().train(False)
        return super().train(mode)

    def extract_pyramid(self, image: torch.Tensor) -> FeaturePyramid:
        """Run the trunk and collect the tapped layer outputs.

        ``image`` is (B, C, H, W) with C in {1, 3} and values in [0, 1];
        single-channel inputs are replicated to three channels before
        patch embedding.
        """
        if image.ndim != 4:
            raise ShapeError(f"expected a batched (B,C,H,W) image, got {tuple(image.shape)}")
        b, c, h, w = image.shape
        p = self.config.patch_size
        if h % p != 0 or w % p != 0:
            raise ShapeError(
                f"spatial dims {h}x{w} are not multiples of patch size {p}; pad first"
            )
        if c == 1:
            image = image.expand(b, 3, h, w)
        elif c != 3:
            raise ShapeError(f"expected 1 or 3 channels, got {c}")

        ctx = torch.no_grad() if self.config.frozen else contextlib.nullcontext()
        with ctx:
            feat = self.patch_embed(image.to(self.patch_embed.weight.dtype))
            gh, gw = feat.shape[-2:]
            tokens = feat.flatten(2).transpose(1, 2)
            tokens = tokens + sincos_position_embedding(
                gh, gw, self.config.embed_dim, dtype=tokens.dtype, device=tokens.device
            )
            taps = {}
            want = set(self.config.tap_layers)
            for i, block in enumerate(self.blocks):
                tokens = block(tokens)
                if i in want:
                    taps[i] = tokens.transpose(1, 2).reshape(
                        b, self.config.embed_dim, gh, gw
                    )
        levels = [taps[i] for i in self.config.tap_layers]
        return FeaturePyramid(levels=levels)

    forward = extract_pyramid


def weight_manifest(config: EncoderConfig) -> dict:
    """Expected archive entries: tensor name -> shape."""
    d, p, r = config.embed_dim, config.patch_size, config.mlp_ratio
    hidden = int(d * r)
    manifest = {
        "patch_embed.weight": (d, 3, p, p),
        "patch_embed.bias": (d,),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}."
        manifest.update(
            {
                pre + "attn.norm_q.weight": (d,),
                pre + "attn.norm_q.bias": (d,),
                pre + "attn.norm_c.weight": (d,),
                pre + "attn.norm_c.bias": (d,),
                pre + "attn.to_q.weight": (d, d),
                pre + "attn.to_q.bias": (d,),
                pre + "attn.to_k.weight": (d, d),
                pre + "attn.to_k.bias": (d,),
                pre + "attn.to_v.weight": (d, d),
                pre + "attn.to_v.bias": (d,),
                pre + "attn.proj.weight": (d, d),
                pre + "attn.proj.bias": (d,),
                pre + "mlp.norm.weight": (d,),
                pre + "mlp.norm.bias": (d,),
                pre + "mlp.fc1.weight": (hidden, d),
                pre + "mlp.fc1.bias": (hidden,),
                pre + "mlp.fc2.weight": (d, hidden),
                pre + "mlp.fc2.bias": (d,),
            }
        )
    return manifest


def save_encoder_weights(encoder: FrozenEncoder, path) -> None:
    torch.save({k: v.detach().clone() for k, v in encoder.state_dict().items()}, path)


def build_encoder(config: EncoderConfig) -> FrozenEncoder:
    """Construct the encoder, loading archive weights when configured.

    Without a weight file the parameters are seeded deterministically, so
    identical configs produce bit-identical encoders across processes.
    """
    encoder = FrozenEncoder(config)
    if config.weights is not None:
        try:
            archive = torch.load(config.weights, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise WeightLoadError(f"weight file not found: {config.weights}")
        manifest = weight_manifest(config)
        state = {}
        for name, shape in manifest.items():
            if name not in archive:
                raise WeightLoadError(f"weight archive missing tensor '{name}'")
            tensor = archive[name]
            if tuple(tensor.shape) != shape:
                raise WeightLoadError(
                    f"tensor '{name}' has shape {tuple(tensor.shape)}, expected {shape}"
                )
            state[name] = tensor
        extras = sorted(set(archive) - set(manifest))
        dropped = [k for k in extras if k.startswith(_IGNORABLE_WEIGHT_KEYS)]
        unknown = [k for k in extras if not k.startswith(_IGNORABLE_WEIGHT_KEYS)]
        if dropped:
            warnings.warn(f"dropping token tensors from archive: {dropped}")
        if unknown:
            raise WeightLoadError(f"unrecognized tensors in archive: {unknown}")
        encoder.load_state_dict(state)
        if config.frozen:
            encoder.requires_grad_(False)
    return encoder


def extract_pyramid(encoder: FrozenEncoder, image: torch.Tensor) -> FeaturePyramid:
    return encoder.extract_pyramid(image)
