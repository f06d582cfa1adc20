import json
from pathlib import Path

import numpy as np
import pytest
import torch

from bifuse.adapter import AdapterConfig, build_adapter
from bifuse.backbone import EncoderConfig, build_encoder
from bifuse.errors import StructuralError
from bifuse.reconstruction import ReconConfig, ReconstructionBranch, reconstruct
from util import central_difference_check

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "pilot_thresholds.json").read_text())


def test_output_shape_and_range():
    branch = ReconstructionBranch(64, 3, upscale=4, config=ReconConfig(), seed=0)
    feat = torch.rand(1, 64, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        out = reconstruct(branch, feat)
    assert tuple(out.shape) == (1, 3, 128, 128)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_zero_feature_zero_biases_give_half_gray():
    branch = ReconstructionBranch(8, 1, upscale=2, config=ReconConfig(blocks=1, heads=2), seed=1)
    with torch.no_grad():
        branch.head.mix.weight.zero_()
        branch.head.mix.bias.zero_()
        branch.head.expand.weight.zero_()
        branch.head.expand.bias.zero_()
    out = reconstruct(branch, torch.zeros(1, 8, 4, 4))
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_feature_shape_mismatch_is_structural_error():
    branch = ReconstructionBranch(8, 1, upscale=2, config=ReconConfig(blocks=1, heads=2), seed=2)
    with pytest.raises(StructuralError):
        reconstruct(branch, torch.zeros(1, 16, 4, 4))


def test_gradient_matches_finite_differences():
    branch = ReconstructionBranch(
        8, 1, upscale=2, config=ReconConfig(blocks=1, heads=2), seed=3
    ).double()
    feat = torch.rand(1, 8, 4, 4, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    target = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

    def loss():
        return ((reconstruct(branch, feat) - target) ** 2).sum()

    central_difference_check(loss, list(branch.parameters()), h=1e-5, rtol=1e-4, max_elems=4)


def test_gradients_reach_adapter_through_reconstruction():
    enc = build_encoder(
        EncoderConfig(depth=4, embed_dim=16, patch_size=8, num_heads=2, tap_layers=(0, 1, 2, 3))
    )
    adapter = build_adapter(16, AdapterConfig(upsample=2), seed=6)
    branch = ReconstructionBranch(16, 1, upscale=4, config=ReconConfig(blocks=2, heads=2), seed=7)
    img = torch.rand(1, 1, 32, 32, generator=torch.Generator().manual_seed(8))
    rec = branch(adapter(enc.extract_pyramid(img)))
    (rec - img).abs().mean().backward()
    grads = [p.grad for p in adapter.parameters() if p.grad is not None]
    assert grads and any(g.abs().sum() > 0 for g in grads)


def test_two_branches_have_disjoint_parameters():
    bx = ReconstructionBranch(8, 3, upscale=2, config=ReconConfig(blocks=1, heads=2), seed=9)
    by = ReconstructionBranch(8, 1, upscale=2, config=ReconConfig(blocks=1, heads=2), seed=10)
    assert {id(p) for p in bx.parameters()}.isdisjoint({id(p) for p in by.parameters()})


def test_overfit_single_image_reaches_pilot_threshold():
    """Inner loop alone on one image; threshold pinned from the pilot run."""
    pilot = FIXTURES["recon_overfit"]
    enc = build_encoder(
        EncoderConfig(depth=4, embed_dim=16, patch_size=8, num_heads=2, tap_layers=(0, 1, 2, 3))
    )
    adapter = build_adapter(16, AdapterConfig(upsample=2), seed=1)
    branch = ReconstructionBranch(16, 1, upscale=4, config=ReconConfig(blocks=2, heads=2), seed=2)
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    img = 0.5 + 0.3 * np.sin(2 * np.pi * 3 * xx) * np.cos(2 * np.pi * 2 * yy)
    img[8:20, 10:22] = 0.9
    target = torch.tensor(img, dtype=torch.float32)[None, None]
    pyramid = enc.extract_pyramid(target)
    opt = torch.optim.Adam(
        list(adapter.parameters()) + list(branch.parameters()), lr=pilot["lr"]
    )
    loss = None
    for _ in range(pilot["steps"]):
        rec = branch(adapter(pyramid))
        loss = (rec - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(loss.detach()) < pilot["threshold"]
