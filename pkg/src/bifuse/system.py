"""Model assembly, the training loop, and checkpoint round trips."""

import io
import json
import shutil
import time
from pathlib import Path

import numpy as np
import torch

from .adapter import build_adapter
from .backbone import build_encoder
from .bilevel import BilevelTrainer, JointTrainer
from .config import (
    CHECKPOINT_SCHEMA_VERSION,
    RunConfig,
    from_dict,
    save_config,
    to_dict,
)
from .data import (
    PairDataset,
    attach_chroma,
    coerce_channels,
    get_task,
    pad_to_patch_multiple,
    sample_batch,
    unpad,
)
from .errors import ConfigError, ShapeError
from .fusion import FusionNetwork, LatentPair, encode_pair
from .losses import LossBreakdown, fusion_loss, reconstruction_loss
from .reconstruction import ReconstructionBranch


def _named(module, prefix):
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


class FusionSystem:
    """Two encode/adapt streams, per-modality decoders, and the fusion net."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        self.task = get_task(config.task)

        self.encoder_x = build_encoder(config.encoder)
        self.encoder_y = (
            self.encoder_x if config.encoder.shared else build_encoder(config.encoder)
        )
        width = config.adapter.channels or config.encoder.embed_dim
        seed = config.seed
        self.adapter_x = build_adapter(config.encoder.embed_dim, config.adapter, seed=seed + 1)
        self.adapter_y = (
            self.adapter_x
            if config.adapter.share
            else build_adapter(config.encoder.embed_dim, config.adapter, seed=seed + 2)
        )
        upscale = config.head_upscale
        cx, cy = self.task.channels
        if config.mode == "fuse_only":
            self.recon_x = None
            self.recon_y = None
        else:
            self.recon_x = ReconstructionBranch(width, cx, upscale, config.recon, seed=seed + 3)
            self.recon_y = ReconstructionBranch(width, cy, upscale, config.recon, seed=seed + 4)
        self.fusion_net = FusionNetwork(width, upscale, config.fusion, seed=seed + 5)

    # -- parameter partition ------------------------------------------------

    def phi_parameters(self) -> dict:
        phi = {}
        if not self.config.encoder.frozen:
            phi.update(_named(self.encoder_x, "encoder"))
            if self.encoder_y is not self.encoder_x:
                phi.update(_named(self.encoder_y, "encoder_y"))
        if self.adapter_y is self.adapter_x:
            phi.update(_named(self.adapter_x, "adapter"))
        else:
            phi.update(_named(self.adapter_x, "adapter_x"))
            phi.update(_named(self.adapter_y, "adapter_y"))
        if self.recon_x is not None:
            phi.update(_named(self.recon_x, "recon_x"))
            phi.update(_named(self.recon_y, "recon_y"))
        return phi

    def theta_parameters(self) -> dict:
        return _named(self.fusion_net, "fusion")

    def frozen_encoder_state(self) -> dict:
        if not self.config.encoder.frozen:
            return {}
        state = _named(self.encoder_x, "encoder")
        if self.encoder_y is not self.encoder_x:
            state.update(_named(self.encoder_y, "encoder_y"))
        return state

    # -- forward paths ------------------------------------------------------

    def encode(self, image_x: torch.Tensor, image_y: torch.Tensor) -> LatentPair:
        return encode_pair(
            self.encoder_x, self.encoder_y, self.adapter_x, self.adapter_y, image_x, image_y
        )

    def rec_breakdown(self, batch) -> LossBreakdown:
        if self.recon_x is None:
            raise ConfigError("reconstruction branches are disabled in this mode")
        pair = self.encode(batch.x, batch.y)
        rec_x = self.recon_x(pair.z_x)
        rec_y = self.recon_y(pair.z_y)
        return reconstruction_loss(rec_x, batch.x, rec_y, batch.y)

    def fuse_breakdown(self, batch, detach_latents: bool) -> LossBreakdown:
        if detach_latents:
            with torch.no_grad():
                pair = self.encode(batch.x, batch.y)
        else:
            pair = self.encode(batch.x, batch.y)
        fused = self.fusion_net(pair)
        w = self.config.loss
        return fusion_loss(
            fused, batch.x, batch.y,
            w_intensity=w.intensity, w_gradient=w.gradient, w_ssim=w.ssim,
        )

    def joint_breakdown(self, batch) -> LossBreakdown:
        fuse = self.fuse_breakdown(batch, detach_latents=False)
        if self.recon_x is None:
            return fuse
        rec = self.rec_breakdown(batch)
        terms = {**rec.terms, **fuse.terms}
        weights = {**rec.weights, **fuse.weights}
        return LossBreakdown(total=rec.total + fuse.total, terms=terms, weights=weights)

    # -- inference ----------------------------------------------------------

    def fuse_images(self, image_a: np.ndarray, image_b: np.ndarray):
        """Fuse two [0, 1] numpy images into a luminance plane.

        Inputs are padded to patch multiples internally and the output is
        cropped back to the original size.
        """
        if image_a.shape[:2] != image_b.shape[:2]:
            raise ShapeError(
                f"input sizes differ: {image_a.shape[:2]} vs {image_b.shape[:2]}"
            )
        cx, cy = self.task.channels
        a = coerce_channels(image_a.astype(np.float32), cx)
        b = coerce_channels(image_b.astype(np.float32), cy)
        patch = self.config.encoder.patch_size
        a_pad, record = pad_to_patch_multiple(a, patch)
        b_pad, _ = pad_to_patch_multiple(b, patch)
        tx = torch.from_numpy(np.ascontiguousarray(a_pad.transpose(2, 0, 1)))[None]
        ty = torch.from_numpy(np.ascontiguousarray(b_pad.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            pair = self.encode(tx, ty)
            fused = self.fusion_net(pair)
        fused_y = fused[0, 0].numpy().astype(np.float64)
        return unpad(fused_y, record)

    def fuse_file_pair(self, image_a, image_b):
        """Fused output with chroma attached per the task protocol."""
        fused_y = self.fuse_images(image_a, image_b)
        return attach_chroma(fused_y, image_a, image_b, self.task)

    def feature_heatmaps(self, image_a: np.ndarray, image_b: np.ndarray) -> dict:
        """Channel-mean maps of the two latents and the fused feature stream."""
        cx, cy = self.task.channels
        a = coerce_channels(image_a.astype(np.float32), cx)
        b = coerce_channels(image_b.astype(np.float32), cy)
        patch = self.config.encoder.patch_size
        a_pad, _ = pad_to_patch_multiple(a, patch)
        b_pad, _ = pad_to_patch_multiple(b, patch)
        tx = torch.from_numpy(np.ascontiguousarray(a_pad.transpose(2, 0, 1)))[None]
        ty = torch.from_numpy(np.ascontiguousarray(b_pad.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            pair = self.encode(tx, ty)
            fused_feat = self.fusion_net.fused_feature(pair)
        return {
            "latent_x": pair.z_x[0].mean(dim=0).numpy(),
            "latent_y": pair.z_y[0].mean(dim=0).numpy(),
            "fused": fused_feat[0].mean(dim=0).numpy(),
        }

    # -- parameter state ----------------------------------------------------

    def load_partitions(self, phi_state: dict, theta_state: dict):
        with torch.no_grad():
            for name, param in self.phi_parameters().items():
                if name not in phi_state:
                    raise ConfigError(f"checkpoint missing phi tensor '{name}'")
                param.copy_(phi_state[name])
            for name, param in self.theta_parameters().items():
                if name not in theta_state:
                    raise ConfigError(f"checkpoint missing theta tensor '{name}'")
                param.copy_(theta_state[name])

    def apply_ema(self, theta_ema: dict):
        with torch.no_grad():
            for name, param in self.theta_parameters().items():
                param.copy_(theta_ema[name])


def make_trainer(system: FusionSystem, config: RunConfig):
    bl = config.bilevel
    if config.mode == "bilevel":
        return BilevelTrainer(
            phi=system.phi_parameters(),
            theta=system.theta_parameters(),
            rec_loss=lambda batch: system.rec_breakdown(batch),
            fuse_loss=lambda batch: system.fuse_breakdown(batch, detach_latents=True),
            eta_L=bl.eta_L,
            eta_U=bl.eta_U,
            alpha=bl.alpha,
            optimizer=bl.optimizer,
            decay_factor=bl.decay_factor,
            decay_every=bl.decay_every,
            strict_rates=bl.strict_rates,
        )
    params = dict(system.phi_parameters())
    params.update(system.theta_parameters())
    loss_fn = (
        (lambda batch: system.fuse_breakdown(batch, detach_latents=False))
        if config.mode == "fuse_only"
        else (lambda batch: system.joint_breakdown(batch))
    )
    return JointTrainer(
        params=params,
        loss_fn=loss_fn,
        theta=system.theta_parameters(),
        eta=bl.eta_L,
        alpha=bl.alpha,
        optimizer=bl.optimizer,
        decay_factor=bl.decay_factor,
        decay_every=bl.decay_every,
    )


def build_system(config: RunConfig) -> FusionSystem:
    return FusionSystem(config)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, system: FusionSystem, trainer, rng) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": to_dict(system.config),
        "phi": {n: p.detach().clone() for n, p in system.phi_parameters().items()},
        "theta": {n: p.detach().clone() for n, p in system.theta_parameters().items()},
        "trainer": trainer.state_dict(),
        "rng_numpy": rng.bit_generator.state,
    }
    write_payload(path, payload)


def write_payload(path, payload) -> None:
    """Serialize through a buffer so bytes are independent of the file name."""
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(
            f"checkpoint schema version {version} does not match "
            f"supported version {CHECKPOINT_SCHEMA_VERSION}"
        )
    return payload


def restore_run(payload: dict):
    """Rebuild (config, system, trainer, rng) from a checkpoint payload."""
    config = from_dict(payload["config"]).validate()
    system = build_system(config)
    system.load_partitions(payload["phi"], payload["theta"])
    trainer = make_trainer(system, config)
    trainer.load_state_dict(payload["trainer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_numpy"]
    return config, system, trainer, rng


def load_system_for_eval(path, use_ema=True):
    """System ready for inference; EMA weights applied unless disabled."""
    payload = load_checkpoint(path)
    config = from_dict(payload["config"]).validate()
    system = build_system(config)
    system.load_partitions(payload["phi"], payload["theta"])
    if use_ema:
        system.apply_ema(payload["trainer"]["theta_ema"])
    return system, config


# ---------------------------------------------------------------------------
# Training loop

LATEST_CHECKPOINT = "ckpt_latest.pt"


def latest_checkpoint_path(out_dir) -> Path:
    return Path(out_dir) / LATEST_CHECKPOINT


def run_training(config: RunConfig, resume: bool = True, log_every: int = 0) -> dict:
    """Drive training for the configured budget; returns a run summary.

    Checkpoints land in ``config.out_dir`` together with the resolved config
    and a JSONL log holding one record per iteration.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.yaml")

    latest = latest_checkpoint_path(out_dir)
    resumed = False
    if resume and latest.exists():
        payload = load_checkpoint(latest)
        system = build_system(config)
        system.load_partitions(payload["phi"], payload["theta"])
        trainer = make_trainer(system, config)
        trainer.load_state_dict(payload["trainer"])
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng_numpy"]
        resumed = True
    else:
        system = build_system(config)
        trainer = make_trainer(system, config)
        rng = np.random.default_rng(config.seed)

    dataset = PairDataset(config.resolve_data_root(), system.task)
    log_path = out_dir / "train_log.jsonl"
    started = time.time()
    mode = "a" if resumed else "w"
    records = []
    with open(log_path, mode) as log:
        if not resumed:
            log.write(json.dumps({"event": "config", "config": to_dict(config)}) + "\n")
        while trainer.t < config.iterations:
            batch = sample_batch(
                dataset, config.batch_size, config.crop, rng, hflip=config.data.hflip
            )
            record = trainer.train_iteration(batch)
            record["wall"] = round(time.time() - started, 6)
            log.write(json.dumps(record) + "\n")
            records.append(record)
            if log_every and trainer.t % log_every == 0:
                print(f"iteration {trainer.t}: {json.dumps(record)}")
            if (
                trainer.t % config.checkpoint_every == 0
                or trainer.t == config.iterations
            ):
                ck = out_dir / f"ckpt_{trainer.t:06d}.pt"
                save_checkpoint(ck, system, trainer, rng)
                shutil.copyfile(ck, latest)
    if not latest.exists() or trainer.t == 0:
        save_checkpoint(latest, system, trainer, rng)
    return {
        "out_dir": str(out_dir),
        "iterations": trainer.t,
        "resumed": resumed,
        "records": records,
        "checkpoint": str(latest),
    }
