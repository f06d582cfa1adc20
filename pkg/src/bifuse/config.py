"""Run configuration: defaults, YAML round trip, overrides, ablations.

A run is fully described by one resolved config; the resolved form is
embedded in every checkpoint and echoed to the training log so any run can
be reproduced from its artifacts alone.
"""

import dataclasses
import os
import re
from dataclasses import dataclass, field, fields

import yaml


class _YamlLoader(yaml.SafeLoader):
    """SafeLoader that also accepts bare scientific notation like 1e-3."""


_YamlLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _yaml_load(text_or_stream):
    return yaml.load(text_or_stream, Loader=_YamlLoader)

from .adapter import AdapterConfig
from .backbone import EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .reconstruction import ReconConfig

CHECKPOINT_SCHEMA_VERSION = 1

DATA_ROOT_ENV = "BIFUSE_DATA_ROOT"

ABLATION_VARIANTS = (
    "no_adapter",
    "no_pretrained_encoder",
    "no_reconstruction",
    "no_bilevel",
)


@dataclass
class LossWeights:
    intensity: float = 1.0
    gradient: float = 1.0
    ssim: float = 1.0


@dataclass
class BilevelSettings:
    eta_L: float = 2e-4
    eta_U: float = 1e-4
    alpha: float = 0.999
    optimizer: str = "adam"
    decay_factor: float = 0.98
    decay_every: int = 200
    strict_rates: bool = True
    use_ema_eval: bool = True


@dataclass
class DataSettings:
    root: str | None = None
    hflip: bool = False


@dataclass
class RunConfig:
    task: str = "ivif"
    seed: int = 0
    iterations: int = 10000
    batch_size: int = 16
    crop: int = 128
    checkpoint_every: int = 1000
    out_dir: str = "runs/default"
    mode: str = "bilevel"  # bilevel | joint | fuse_only
    ablation: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    bilevel: BilevelSettings = field(default_factory=BilevelSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def validate(self):
        from .data import TASKS

        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}'; expected one of {sorted(TASKS)}")
        if self.mode not in ("bilevel", "joint", "fuse_only"):
            raise ConfigError(f"unknown training mode '{self.mode}'")
        if self.ablation is not None and self.ablation not in ABLATION_VARIANTS:
            raise ConfigError(
                f"unknown ablation '{self.ablation}'; expected one of {ABLATION_VARIANTS}"
            )
        if self.mode == "bilevel" and self.bilevel.eta_L <= self.bilevel.eta_U:
            if self.bilevel.strict_rates:
                raise ConfigError(
                    f"inner rate eta_L={self.bilevel.eta_L} must exceed "
                    f"outer rate eta_U={self.bilevel.eta_U}"
                )
        if self.crop % self.encoder.patch_size != 0:
            raise ConfigError(
                f"crop {self.crop} is not a multiple of patch size "
                f"{self.encoder.patch_size}"
            )
        if self.encoder.patch_size % self.adapter.upsample != 0:
            raise ConfigError(
                f"adapter upsample {self.adapter.upsample} must divide patch size "
                f"{self.encoder.patch_size}"
            )
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        return self

    @property
    def head_upscale(self) -> int:
        """Pixel-head factor recovering input resolution from the latent grid."""
        return self.encoder.patch_size // self.adapter.upsample

    def resolve_data_root(self) -> str:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(
                f"no dataset root configured (data.root or ${DATA_ROOT_ENV})"
            )
        return root


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def _build(cls, payload: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return cls(**payload)


def from_dict(payload: dict) -> RunConfig:
    payload = dict(payload)
    nested = {
        "encoder": EncoderConfig,
        "adapter": AdapterConfig,
        "fusion": FusionConfig,
        "recon": ReconConfig,
        "loss": LossWeights,
        "bilevel": BilevelSettings,
        "data": DataSettings,
    }
    kwargs = {}
    for key, cls in nested.items():
        if key in payload:
            value = payload.pop(key)
            kwargs[key] = value if isinstance(value, cls) else _build(cls, dict(value))
    top = _build_top(payload, kwargs)
    return top


def _build_top(payload, kwargs):
    known = {f.name for f in fields(RunConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    kwargs.update(payload)
    return RunConfig(**kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML config (defaults when None) and apply dotted overrides."""
    if path is None:
        payload = {}
    else:
        with open(path) as fh:
            payload = _yaml_load(fh) or {}
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    payload = _merge(to_dict(RunConfig()), payload)
    for item in overrides:
        payload = apply_override(payload, item)
    try:
        config = from_dict(payload)
    except TypeError as exc:
        raise ConfigError(str(exc))
    return config.validate()


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(payload: dict, item: str) -> dict:
    """Apply one ``dotted.key=value`` override; values parse as YAML scalars."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    value = _yaml_load(raw)
    parts = key.strip().split(".")
    out = dict(payload)
    node = out
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"override key '{key}' does not match the config layout")
        node[part] = dict(node[part])
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"override key '{key}' does not match the config layout")
    node[parts[-1]] = value
    return out


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(config), fh, sort_keys=True)


def apply_ablation(config: RunConfig, variant: str) -> RunConfig:
    """Return the config transformed for one ablation variant."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(
            f"unknown ablation '{variant}'; expected one of {ABLATION_VARIANTS}"
        )
    payload = to_dict(config)
    payload["ablation"] = variant
    if variant == "no_adapter":
        payload["adapter"]["kind"] = "simple"
        payload["adapter"]["channels"] = None
    elif variant == "no_pretrained_encoder":
        payload["encoder"]["depth"] = 4
        payload["encoder"]["tap_layers"] = (0, 1, 2, 3)
        payload["encoder"]["frozen"] = False
        payload["encoder"]["weights"] = None
    elif variant == "no_reconstruction":
        payload["mode"] = "fuse_only"
    elif variant == "no_bilevel":
        payload["mode"] = "joint"
    return from_dict(payload).validate()
