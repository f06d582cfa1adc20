"""Training objectives: per-modality reconstruction and fused-image losses.

The fused-image objective follows the usual salience-retention recipe:
an intensity term against the elementwise max of the sources, a Sobel
gradient-magnitude term against the max of the source magnitudes, and an
averaged SSIM term. Everything is differentiable and computed on luminance.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ShapeError

BT601_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = torch.tensor([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


@dataclass
class LossBreakdown:
    """Weighted sum of named terms; ``total`` stays differentiable."""

    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def detached(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "terms": {k: float(v.detach()) for k, v in self.terms.items()},
            "weights": dict(self.weights),
        }


def _combine(terms: dict, weights: dict) -> LossBreakdown:
    total = sum(weights[k] * terms[k] for k in terms)
    return LossBreakdown(total=total, terms=terms, weights=weights)


def luminance(image: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 1, H, W) via BT.601 weights; pass-through for C=1."""
    if image.shape[1] == 1:
        return image
    if image.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {image.shape[1]}")
    r, g, b = BT601_WEIGHTS
    w = torch.tensor([r, g, b], dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
    return (image * w).sum(dim=1, keepdim=True)


SOBEL_EPS = 1e-12


def sobel_magnitude(image: torch.Tensor) -> torch.Tensor:
    """Per-pixel Sobel gradient magnitude with replicate borders.

    Replicate padding keeps flat images at (near) zero magnitude everywhere,
    borders included; the epsilon under the root keeps the gradient finite
    at exact zeros.
    """
    kx = SOBEL_X.to(dtype=image.dtype, device=image.device).view(1, 1, 3, 3)
    ky = SOBEL_Y.to(dtype=image.dtype, device=image.device).view(1, 1, 3, 3)
    padded = F.pad(image, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    return torch.sqrt(gx * gx + gy * gy + SOBEL_EPS)


def _gaussian_window(size: int, sigma: float, dtype, device):
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    win = g[:, None] * g[None, :]
    return win.to(dtype=dtype, device=device).view(1, 1, size, size)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5):
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Inputs are single-channel (B, 1, H, W) maps in [0, 1]; stability
    constants C1=(0.01)^2 and C2=(0.03)^2 keep constant images at 1.0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[1] != 1:
        raise ShapeError("ssim expects single-channel inputs")
    if a.shape[-2] < window or a.shape[-1] < window:
        raise ShapeError(
            f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} window"
        )
    win = _gaussian_window(window, sigma, a.dtype, a.device)
    c1, c2 = 0.01**2, 0.03**2
    mu_a = F.conv2d(a, win)
    mu_b = F.conv2d(b, win)
    var_a = F.conv2d(a * a, win) - mu_a * mu_a
    var_b = F.conv2d(b * b, win) - mu_b * mu_b
    cov = F.conv2d(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def reconstruction_loss(rec_x, image_x, rec_y, image_y) -> LossBreakdown:
    """L1 reconstruction of both sources; the inner training objective."""
    for rec, src in ((rec_x, image_x), (rec_y, image_y)):
        if rec.shape != src.shape:
            raise ShapeError(
                f"reconstruction shape {tuple(rec.shape)} != source {tuple(src.shape)}"
            )
    terms = {
        "recon_x": (rec_x - image_x).abs().mean(),
        "recon_y": (rec_y - image_y).abs().mean(),
    }
    return _combine(terms, {"recon_x": 1.0, "recon_y": 1.0})


def fusion_loss(
    fused, image_x, image_y, w_intensity=1.0, w_gradient=1.0, w_ssim=1.0, ssim_window=11
) -> LossBreakdown:
    """Intensity + gradient + SSIM objective on luminance; the outer objective."""
    if image_x.shape[-2:] != image_y.shape[-2:] or fused.shape[-2:] != image_x.shape[-2:]:
        raise ShapeError(
            f"spatial dims differ: fused {tuple(fused.shape[-2:])}, "
            f"x {tuple(image_x.shape[-2:])}, y {tuple(image_y.shape[-2:])}"
        )
    yf = luminance(fused)
    yx = luminance(image_x)
    yy = luminance(image_y)

    intensity = (yf - torch.maximum(yx, yy)).abs().mean()
    grad_target = torch.maximum(sobel_magnitude(yx), sobel_magnitude(yy))
    gradient = (sobel_magnitude(yf) - grad_target).abs().mean()
    structural = (
        (1.0 - ssim(yf, yx, window=ssim_window)) + (1.0 - ssim(yf, yy, window=ssim_window))
    ) / 2.0

    terms = {"intensity": intensity, "gradient": gradient, "ssim": structural}
    weights = {"intensity": w_intensity, "gradient": w_gradient, "ssim": w_ssim}
    return _combine(terms, weights)
