"""Multi-modal image fusion with frozen-encoder pyramids, hierarchical
adapters, cross-attention fusion, reconstruction alignment, and an
alternating first-order bilevel trainer with EMA-stabilized fusion weights.
"""

from .adapter import AdapterConfig, HierarchicalAdapter, SimpleUpsampleAdapter, adapt
from .backbone import (
    EncoderConfig,
    FeaturePyramid,
    FrozenEncoder,
    build_encoder,
    extract_pyramid,
    weight_manifest,
)
from .bilevel import BilevelTrainer, JointTrainer, tensor_checksum
from .config import RunConfig, apply_ablation, load_config
from .fusion import FusionConfig, FusionNetwork, LatentPair, encode_pair, fuse
from .losses import LossBreakdown, fusion_loss, reconstruction_loss, ssim
from .metrics import (
    MetricReport,
    cc_fusion,
    compute_fusion_metrics,
    evaluate_dataset,
    mi_fusion,
    psnr,
    qabf,
    qy,
    ssim_value,
    vif_fusion,
)
from .reconstruction import ReconConfig, ReconstructionBranch, reconstruct
from .system import FusionSystem, build_system, make_trainer, run_training

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BilevelTrainer",
    "EncoderConfig",
    "FeaturePyramid",
    "FrozenEncoder",
    "FusionConfig",
    "FusionNetwork",
    "FusionSystem",
    "HierarchicalAdapter",
    "JointTrainer",
    "LatentPair",
    "LossBreakdown",
    "MetricReport",
    "ReconConfig",
    "ReconstructionBranch",
    "RunConfig",
    "SimpleUpsampleAdapter",
    "adapt",
    "apply_ablation",
    "build_encoder",
    "build_system",
    "cc_fusion",
    "compute_fusion_metrics",
    "encode_pair",
    "evaluate_dataset",
    "extract_pyramid",
    "fuse",
    "fusion_loss",
    "load_config",
    "make_trainer",
    "mi_fusion",
    "psnr",
    "qabf",
    "qy",
    "reconstruct",
    "reconstruction_loss",
    "run_training",
    "ssim",
    "ssim_value",
    "tensor_checksum",
    "vif_fusion",
    "weight_manifest",
]
