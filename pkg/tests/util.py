"""Shared helpers for the test suite: toy configs and a gradient checker."""

import numpy as np
import torch

from bifuse import config as config_mod

TOY_OVERRIDES = [
    "encoder.depth=4",
    "encoder.embed_dim=16",
    "encoder.patch_size=8",
    "encoder.tap_layers=[0,1,2,3]",
    "encoder.num_heads=2",
    "adapter.upsample=2",
    "fusion.blocks=2",
    "fusion.heads=2",
    "recon.blocks=2",
    "recon.heads=2",
    "crop=32",
    "batch_size=4",
    "checkpoint_every=5",
    # pilot-tuned rates for short smoke budgets
    "bilevel.eta_L=1e-3",
    "bilevel.eta_U=5e-4",
    "bilevel.alpha=0.9",
    "bilevel.decay_every=100",
]


def toy_config(data_root, out_dir, iterations=10, extra=()):
    overrides = TOY_OVERRIDES + [
        f"data.root={data_root}",
        f"out_dir={out_dir}",
        f"iterations={iterations}",
        *extra,
    ]
    return config_mod.load_config(None, overrides)


def central_difference_check(
    make_loss, params, h=1e-5, rtol=1e-4, atol=1e-8, max_elems=8, seed=0
):
    """Compare autograd gradients with central finite differences.

    ``make_loss`` reruns the forward pass from current parameter values;
    ``params`` are the float64 tensors to perturb. Large tensors are
    spot-checked on a deterministic random subset of elements.
    """
    rng = np.random.default_rng(seed)
    loss = make_loss()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        if n <= max_elems:
            idxs = range(n)
        else:
            idxs = sorted(rng.choice(n, size=max_elems, replace=False).tolist())
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + h
            lp = float(make_loss().detach())
            flat[i] = orig - h
            lm = float(make_loss().detach())
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            an = gflat[i].item()
            err = abs(an - fd)
            tol = atol + rtol * max(abs(an), abs(fd))
            worst = max(worst, err - tol)
            assert err <= tol, (
                f"gradient mismatch at element {i}: analytic {an}, "
                f"finite-difference {fd} (err {err:.3g} > tol {tol:.3g})"
            )
    return worst
