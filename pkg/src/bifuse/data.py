"""Paired-image dataset ingestion, cropping, padding, and color handling.

Datasets live as two sibling directories ``source_a/`` and ``source_b/``
whose files pair up by stem. Pixels are linear intensities in [0, 1]
(8-bit and 16-bit integer inputs divided by their full range exactly).
"""

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import imageio.v3 as iio
import numpy as np
import torch

from .errors import DataError, ShapeError

BT601_WEIGHTS = (0.299, 0.587, 0.114)

IMAGE_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class FusionTask:
    """Channel and chroma conventions for one fusion task family."""

    name: str
    channels: tuple  # (C_x, C_y)
    chroma_source: str  # "a", "b", "average", or "none"


TASKS = {
    "ivif": FusionTask("ivif", (3, 1), "a"),  # visible supplies chroma
    "mif": FusionTask("mif", (1, 1), "none"),
    "mef": FusionTask("mef", (3, 3), "average"),
    "mff": FusionTask("mff", (3, 3), "average"),
}


def get_task(name: str) -> FusionTask:
    try:
        return TASKS[name]
    except KeyError:
        raise DataError(f"unknown task '{name}'; expected one of {sorted(TASKS)}")


# ---------------------------------------------------------------------------
# Image file I/O


def read_image(path) -> np.ndarray:
    """Read PNG/BMP/TIFF as float64 in [0, 1] (HxW or HxWx3)."""
    arr = iio.imread(Path(path))
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float64) / 65535.0
    else:
        out = arr.astype(np.float64)
        if out.size and (out.min() < 0.0 or out.max() > 1.0):
            raise DataError(f"{path}: float image values outside [0, 1]")
    return out


def write_image(path, image: np.ndarray) -> None:
    """Write [0, 1] floats as 8-bit PNG with round-half-even quantization."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    quantized = np.round(arr * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, quantized)


def coerce_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Convert an image to the requested channel count (1 via luminance)."""
    if image.ndim == 2:
        image = image[:, :, None]
    have = image.shape[2]
    if have == channels:
        return image
    if channels == 1 and have == 3:
        r, g, b = BT601_WEIGHTS
        return (r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2])[:, :, None]
    if channels == 3 and have == 1:
        return np.repeat(image, 3, axis=2)
    raise ShapeError(f"cannot coerce {have}-channel image to {channels} channels")


# ---------------------------------------------------------------------------
# Paired dataset


class PairSample(NamedTuple):
    id: str
    image_x: np.ndarray  # HxWxC_x float32
    image_y: np.ndarray  # HxWxC_y float32


class Batch(NamedTuple):
    x: torch.Tensor  # (B, C_x, crop, crop)
    y: torch.Tensor  # (B, C_y, crop, crop)
    ids: tuple


PAIR_MANIFEST = "pairs.tsv"


class PairDataset:
    """Lazily indexed pairs from ``root/source_a`` and ``root/source_b``.

    A ``pairs.tsv`` manifest in the root (lines of ``id<TAB>path_a<TAB>path_b``,
    paths relative to the root) overrides filename matching.
    """

    def __init__(self, root, task: FusionTask):
        self.root = Path(root)
        self.task = task
        manifest = self.root / PAIR_MANIFEST
        if manifest.is_file():
            self._paths = self._from_manifest(manifest)
        else:
            dir_a = self.root / "source_a"
            dir_b = self.root / "source_b"
            if not dir_a.is_dir() or not dir_b.is_dir():
                raise DataError(f"{self.root} must contain source_a/ and source_b/")
            index_a = self._index(dir_a)
            index_b = self._index(dir_b)
            common = sorted(set(index_a) & set(index_b))
            missing = sorted(set(index_a) ^ set(index_b))
            if missing:
                warnings.warn(f"skipping {len(missing)} unmatched file(s): {missing}")
            self._paths = {s: (index_a[s], index_b[s]) for s in common}
        if not self._paths:
            raise DataError(f"no matching pairs under {self.root}")
        self.ids = sorted(self._paths)
        self._cache = {}

    def _from_manifest(self, manifest):
        paths = {}
        for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{manifest}:{lineno}: expected 'id<TAB>path_a<TAB>path_b'")
            sample_id, rel_a, rel_b = parts
            path_a, path_b = self.root / rel_a, self.root / rel_b
            for p in (path_a, path_b):
                if not p.is_file():
                    raise DataError(f"{manifest}:{lineno}: missing file {p}")
            paths[sample_id] = (path_a, path_b)
        return paths

    @staticmethod
    def _index(directory):
        return {
            p.stem: p
            for p in sorted(directory.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        }

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> PairSample:
        sample_id = self.ids[i]
        if sample_id not in self._cache:
            path_a, path_b = self._paths[sample_id]
            img_a = read_image(path_a)
            img_b = read_image(path_b)
            if img_a.shape[:2] != img_b.shape[:2]:
                raise DataError(
                    f"pair '{sample_id}' has mismatched sizes: "
                    f"{img_a.shape[:2]} vs {img_b.shape[:2]}"
                )
            cx, cy = self.task.channels
            self._cache[sample_id] = PairSample(
                sample_id,
                coerce_channels(img_a, cx).astype(np.float32),
                coerce_channels(img_b, cy).astype(np.float32),
            )
        return self._cache[sample_id]


def sample_batch(dataset, batch_size, crop, rng, hflip=False) -> Batch:
    """Aligned random crops, sampled with replacement.

    The same crop window (and flip, when enabled) is applied to both images
    of a pair. Pairs smaller than the crop are skipped for the draw.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    eligible = []
    for i in range(len(dataset)):
        sample = dataset[i]
        if sample.image_x.shape[0] >= crop and sample.image_x.shape[1] >= crop:
            eligible.append(i)
    if not eligible:
        raise DataError(f"no pair is at least {crop}x{crop}")
    xs, ys, ids = [], [], []
    for _ in range(batch_size):
        sample = dataset[eligible[int(rng.integers(len(eligible)))]]
        h, w = sample.image_x.shape[:2]
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        tile_x = sample.image_x[top : top + crop, left : left + crop]
        tile_y = sample.image_y[top : top + crop, left : left + crop]
        if hflip and rng.random() < 0.5:
            tile_x = tile_x[:, ::-1]
            tile_y = tile_y[:, ::-1]
        xs.append(np.ascontiguousarray(tile_x.transpose(2, 0, 1)))
        ys.append(np.ascontiguousarray(tile_y.transpose(2, 0, 1)))
        ids.append(sample.id)
    return Batch(
        torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)), tuple(ids)
    )


# ---------------------------------------------------------------------------
# Padding


class PadRecord(NamedTuple):
    pad_h: int
    pad_w: int


def pad_to_patch_multiple(image: np.ndarray, patch: int):
    """Reflect-pad bottom/right to the next patch multiple."""
    if patch < 1:
        raise ShapeError("patch size must be >= 1")
    h, w = image.shape[:2]
    pad_h = (-h) % patch
    pad_w = (-w) % patch
    record = PadRecord(pad_h, pad_w)
    if pad_h == 0 and pad_w == 0:
        return image, record
    pads = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
    mode = "reflect" if pad_h < h and pad_w < w else "symmetric"
    return np.pad(image, pads, mode=mode), record


def unpad(image: np.ndarray, record: PadRecord) -> np.ndarray:
    h, w = image.shape[:2]
    return image[: h - record.pad_h or None, : w - record.pad_w or None]


# ---------------------------------------------------------------------------
# Luminance / chroma protocol (BT.601, full range)


def split_luminance_chroma(image: np.ndarray):
    """HxWx3 RGB -> (Y of HxW, CbCr of HxWx2), all in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got {image.shape}")
    r, g, b = image[:, :, 0], image[:, :, 1], image[:, :, 2]
    wr, wg, wb = BT601_WEIGHTS
    y = wr * r + wg * g + wb * b
    cb = (b - y) / 1.772 + 0.5
    cr = (r - y) / 1.402 + 0.5
    return y, np.stack([cb, cr], axis=2)


def merge_luminance_chroma(y: np.ndarray, cbcr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_luminance_chroma`."""
    cb = cbcr[:, :, 0] - 0.5
    cr = cbcr[:, :, 1] - 0.5
    r = y + 1.402 * cr
    b = y + 1.772 * cb
    wr, wg, wb = BT601_WEIGHTS
    g = (y - wr * r - wb * b) / wg
    return np.stack([r, g, b], axis=2)


def attach_chroma(fused_y: np.ndarray, image_a, image_b, task: FusionTask) -> np.ndarray:
    """Combine a fused luminance plane with the task's chroma source."""
    if task.chroma_source == "none":
        return fused_y
    if task.chroma_source == "a":
        _, cbcr = split_luminance_chroma(coerce_channels(image_a, 3))
    elif task.chroma_source == "b":
        _, cbcr = split_luminance_chroma(coerce_channels(image_b, 3))
    else:
        _, cbcr_a = split_luminance_chroma(coerce_channels(image_a, 3))
        _, cbcr_b = split_luminance_chroma(coerce_channels(image_b, 3))
        cbcr = 0.5 * (cbcr_a + cbcr_b)
    return np.clip(merge_luminance_chroma(fused_y, cbcr), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Synthetic pairs for smoke runs and demos


def make_synthetic_pairs(out_dir, n_pairs=16, size=64, seed=0, task="ivif"):
    """Write a small paired dataset of structured synthetic scenes.

    Both modalities see the same geometry but render it differently, with
    modality-specific stripe patterns, so reconstruction carries information
    that fusion alone would be free to discard.
    """
    family = get_task(task)
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "source_a").mkdir(parents=True, exist_ok=True)
    (out / "source_b").mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    for i in range(n_pairs):
        base = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.random(2)
            s = 0.05 + 0.2 * rng.random()
            base += rng.random() * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        base = (base - base.min()) / (base.max() - base.min() + 1e-9)
        top, left = rng.integers(0, size // 2, 2)
        hh, ww = rng.integers(size // 8, size // 2, 2)
        block = np.zeros((size, size))
        block[top : top + hh, left : left + ww] = rng.random()
        freq = float(rng.integers(4, 9))
        stripes_a = 0.25 * (0.5 + 0.5 * np.sin(2 * np.pi * freq * xx))
        stripes_b = 0.25 * (0.5 + 0.5 * np.sin(2 * np.pi * freq * yy))
        img_a = np.clip(0.55 * base + 0.2 * block + stripes_a, 0.0, 1.0)
        img_b = np.clip(0.35 * base + 0.45 * block + stripes_b, 0.0, 1.0)
        if family.channels[0] == 3:
            tint = 0.8 + 0.2 * rng.random(3)
            img_a = np.clip(img_a[:, :, None] * tint[None, None, :], 0.0, 1.0)
        if family.channels[1] == 3:
            tint = 0.8 + 0.2 * rng.random(3)
            img_b = np.clip(img_b[:, :, None] * tint[None, None, :], 0.0, 1.0)
        write_image(out / "source_a" / f"pair_{i:03d}.png", img_a)
        write_image(out / "source_b" / f"pair_{i:03d}.png", img_b)
    return out
