import numpy as np
import pytest
import torch

from bifuse import config as config_mod
from bifuse.adapter import AdapterConfig, HierarchicalAdapter
from bifuse.backbone import FeaturePyramid
from bifuse.errors import ConfigError
from bifuse.system import build_system
from util import toy_config


def tiny_cfg(extra=()):
    return toy_config("/unused", "/unused", iterations=1, extra=extra)


def test_shared_encoder_is_one_instance():
    system = build_system(tiny_cfg())
    assert system.encoder_x is system.encoder_y


def test_separate_encoders_flag():
    system = build_system(tiny_cfg(extra=["encoder.shared=false"]))
    assert system.encoder_x is not system.encoder_y
    # same seed, so the two frozen copies start identical
    img = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    a = system.encoder_x.extract_pyramid(img)
    b = system.encoder_y.extract_pyramid(img)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)


def test_shared_adapter_flag_registers_single_prefix():
    system = build_system(tiny_cfg(extra=["adapter.share=true"]))
    assert system.adapter_x is system.adapter_y
    names = system.phi_parameters()
    assert any(n.startswith("adapter.") for n in names)
    assert not any(n.startswith("adapter_x.") for n in names)


def test_adapter_width_override():
    adapter = HierarchicalAdapter(16, AdapterConfig(channels=8, upsample=2), seed=0)
    levels = [torch.rand(1, 16, 4, 4, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    out = adapter(FeaturePyramid(levels=levels))
    assert tuple(out.shape) == (1, 8, 8, 8)
    assert torch.equal(out, adapter.residual_reference(FeaturePyramid(levels=levels)))


def test_env_var_supplies_data_root(monkeypatch, tmp_path):
    cfg = tiny_cfg()
    assert cfg.data.root == "/unused"
    payload = config_mod.to_dict(cfg)
    payload["data"]["root"] = None
    cfg = config_mod.from_dict(payload)
    monkeypatch.delenv(config_mod.DATA_ROOT_ENV, raising=False)
    with pytest.raises(ConfigError, match="BIFUSE_DATA_ROOT"):
        cfg.resolve_data_root()
    monkeypatch.setenv(config_mod.DATA_ROOT_ENV, str(tmp_path))
    assert cfg.resolve_data_root() == str(tmp_path)


def test_crop_not_multiple_of_patch_rejected():
    with pytest.raises(ConfigError, match="multiple"):
        tiny_cfg(extra=["crop=33"])


def test_upsample_must_divide_patch():
    with pytest.raises(ConfigError, match="divide"):
        tiny_cfg(extra=["adapter.upsample=16"])  # patch is 8 in the toy config


def test_fuse_breakdown_detached_leaves_phi_gradless(synth_root):
    from bifuse.data import PairDataset, get_task, sample_batch

    cfg = toy_config(synth_root, "/unused", iterations=1)
    system = build_system(cfg)
    dataset = PairDataset(synth_root, get_task("ivif"))
    batch = sample_batch(dataset, 2, 32, np.random.default_rng(0))
    breakdown = system.fuse_breakdown(batch, detach_latents=True)
    breakdown.total.backward()
    assert all(p.grad is None for p in system.phi_parameters().values())
    theta_grads = [p.grad for p in system.theta_parameters().values()]
    assert any(g is not None and g.abs().sum() > 0 for g in theta_grads)


def test_rec_breakdown_never_touches_theta(synth_root):
    from bifuse.data import PairDataset, get_task, sample_batch

    cfg = toy_config(synth_root, "/unused", iterations=1)
    system = build_system(cfg)
    dataset = PairDataset(synth_root, get_task("ivif"))
    batch = sample_batch(dataset, 2, 32, np.random.default_rng(1))
    breakdown = system.rec_breakdown(batch)
    breakdown.total.backward()
    assert all(p.grad is None for p in system.theta_parameters().values())
    phi_grads = [p.grad for p in system.phi_parameters().values()]
    assert any(g is not None and g.abs().sum() > 0 for g in phi_grads)


def test_restore_run_resumes_in_memory(synth_root, tmp_path):
    from bifuse.system import load_checkpoint, restore_run, run_training

    cfg = toy_config(synth_root, str(tmp_path / "run"), iterations=3)
    summary = run_training(cfg, resume=False)
    config, system, trainer, rng = restore_run(load_checkpoint(summary["checkpoint"]))
    assert trainer.t == 3
    assert config.iterations == 3
    assert set(system.theta_parameters()) == set(trainer.theta)


@pytest.mark.parametrize("task,expected_channels", [("mif", 1), ("mef", 3)])
def test_fuse_images_chroma_protocol(synth_root, tmp_path, task, expected_channels):
    from bifuse.data import make_synthetic_pairs

    root = tmp_path / "data"
    make_synthetic_pairs(root, n_pairs=2, size=32, seed=9, task=task)
    cfg = toy_config(root, str(tmp_path / "run"), iterations=1, extra=[f"task={task}"])
    system = build_system(cfg)
    rng = np.random.default_rng(2)
    shape = (32, 32, 3) if expected_channels == 3 else (32, 32)
    img_a = rng.random(shape)
    img_b = rng.random(shape)
    fused = system.fuse_file_pair(img_a, img_b)
    if expected_channels == 1:
        assert fused.ndim == 2
    else:
        assert fused.shape == (32, 32, 3)
    assert fused.min() >= 0.0 and fused.max() <= 1.0
