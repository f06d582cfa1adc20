"""Fusion quality metrics: MI, VIF, Qabf, Qy, CC, PSNR.

All metrics are computed on luminance in float64 and follow the summed /
averaged two-source conventions common in fusion benchmarking:

* MI   — histogram mutual information (256 bins, bits) summed over sources.
* VIF  — pixel-domain multi-scale visual information fidelity (4 scales,
         Gaussian windows, noise variance 2 on a 255 scale), summed.
* Qabf — Sobel strength/orientation edge-preservation sigmoids, weighted by
         source edge strength.
* Qy   — windowed SSIM blend: variance-weighted where the sources agree
         structurally, max otherwise.
* CC   — mean Pearson correlation against the sources.
* PSNR — against each source, averaged; identical images yield an inf
         marker that aggregation excludes.

Undefined values are returned as NaN markers and excluded from aggregates.
"""

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DataError, ShapeError

METRIC_NAMES = ("mi", "vif", "qabf", "qy", "cc", "psnr")

BT601_WEIGHTS = (0.299, 0.587, 0.114)

_QABF_GAMMA_G, _QABF_KAPPA_G, _QABF_SIGMA_G = 0.9994, -15.0, 0.5
_QABF_GAMMA_A, _QABF_KAPPA_A, _QABF_SIGMA_A = 0.9879, -22.0, 0.8

_QY_WINDOW = 7
_QY_THRESHOLD = 0.75

_VIF_SIGMA_NSQ = 2.0
_VIF_EPS = 1e-10


def to_luminance(image: np.ndarray) -> np.ndarray:
    """HxW or HxWxC array -> HxW float64 luminance."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] == 3:
        r, g, b = BT601_WEIGHTS
        return r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]
    raise ShapeError(f"expected HxW or HxWx{{1,3}} image, got {arr.shape}")


def _check_triple(fused, a, b):
    if fused.shape != a.shape or fused.shape != b.shape:
        raise ShapeError(
            f"shape mismatch: fused {fused.shape}, sources {a.shape}, {b.shape}"
        )


# ---------------------------------------------------------------------------
# Mutual information


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """MI in bits from a joint histogram over [0, 1]."""
    hist, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0, 1], [0, 1]])
    joint = hist / hist.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    denom = np.outer(pa, pb)
    return float(np.sum(joint[nz] * np.log2(joint[nz] / denom[nz])))


def mi_fusion(fused, source_a, source_b) -> float:
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    return mutual_information(f, a) + mutual_information(f, b)


# ---------------------------------------------------------------------------
# PSNR / correlation


def psnr(a, b) -> float:
    """10*log10(1/MSE) on [0, 1]; equality gives the inf marker."""
    x, y = to_luminance(a), to_luminance(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_fusion(fused, source_a, source_b) -> float:
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    pa, pb = psnr(f, a), psnr(f, b)
    if math.isinf(pa) or math.isinf(pb):
        return math.inf
    return 0.5 * (pa + pb)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return math.nan
    return float((da * db).sum()) / denom


def cc_fusion(fused, source_a, source_b) -> float:
    """Mean Pearson correlation with the sources; NaN when both are undefined."""
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    vals = [v for v in (_pearson(f, a), _pearson(f, b)) if not math.isnan(v)]
    if not vals:
        return math.nan
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# SSIM (shared by Qy and the oracle suite)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_value(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid Gaussian windows, [0,1]-range constants."""
    x, y = to_luminance(a), to_luminance(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ShapeError(f"image {x.shape} smaller than the {window}x{window} window")
    win = _gaussian_kernel(window, sigma)
    c1, c2 = 0.01**2, 0.03**2
    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    var_x = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
    var_y = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
    cov = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# VIF


def _vif_pair(ref: np.ndarray, dist: np.ndarray) -> float:
    """Single-source VIF on a 255 scale; NaN (contentless reference) -> 1.0."""
    num = 0.0
    den = 0.0
    scales_done = 0
    for scale in range(1, 5):
        size = 2 ** (4 - scale + 1) + 1
        win = _gaussian_kernel(size, size / 5.0)
        if scale > 1:
            ref = convolve2d(ref, win, mode="same", boundary="symm")[::2, ::2]
            dist = convolve2d(dist, win, mode="same", boundary="symm")[::2, ::2]
            if min(ref.shape) < 2:
                warnings.warn(
                    f"image too small for 4 VIF scales; used {scales_done}"
                )
                break
        mu1 = convolve2d(ref, win, mode="same", boundary="symm")
        mu2 = convolve2d(dist, win, mode="same", boundary="symm")
        sigma1_sq = convolve2d(ref * ref, win, mode="same", boundary="symm") - mu1 * mu1
        sigma2_sq = convolve2d(dist * dist, win, mode="same", boundary="symm") - mu2 * mu2
        sigma12 = convolve2d(ref * dist, win, mode="same", boundary="symm") - mu1 * mu2
        sigma1_sq = np.maximum(sigma1_sq, 0.0)
        sigma2_sq = np.maximum(sigma2_sq, 0.0)

        g = sigma12 / (sigma1_sq + _VIF_EPS)
        sv_sq = sigma2_sq - g * sigma12
        g[sigma1_sq < _VIF_EPS] = 0.0
        sv_sq[sigma1_sq < _VIF_EPS] = sigma2_sq[sigma1_sq < _VIF_EPS]
        sigma1_sq = np.where(sigma1_sq < _VIF_EPS, 0.0, sigma1_sq)
        sv_sq[sigma2_sq < _VIF_EPS] = 0.0
        g[sigma2_sq < _VIF_EPS] = 0.0
        sv_sq[g < 0.0] = sigma2_sq[g < 0.0]
        g[g < 0.0] = 0.0
        sv_sq = np.maximum(sv_sq, _VIF_EPS)

        num += float(np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + _VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + sigma1_sq / _VIF_SIGMA_NSQ)))
        scales_done += 1
    if den == 0.0:
        return 1.0
    value = num / den
    return 1.0 if math.isnan(value) else value


def vif_fusion(fused, source_a, source_b) -> float:
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    f, a, b = f * 255.0, a * 255.0, b * 255.0
    return _vif_pair(a, f) + _vif_pair(b, f)


# ---------------------------------------------------------------------------
# Qabf


def _sobel_strength_angle(img: np.ndarray):
    # symmetric boundary keeps flat images at zero strength, borders included
    hx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    hy = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])
    sx = convolve2d(img, hx, mode="same", boundary="symm")
    sy = convolve2d(img, hy, mode="same", boundary="symm")
    strength = np.sqrt(sx * sx + sy * sy)
    angle = np.full_like(img, math.pi / 2.0)
    nz = sx != 0.0
    angle[nz] = np.arctan(sy[nz] / sx[nz])
    return strength, angle


def _edge_preservation(g_src, a_src, g_f, a_f):
    ratio = np.zeros_like(g_src)
    both = np.maximum(g_src, g_f)
    nz = both > 0.0
    ratio[nz] = np.minimum(g_src, g_f)[nz] / both[nz]
    angle = 1.0 - np.abs(a_src - a_f) / (math.pi / 2.0)
    qg = _QABF_GAMMA_G / (1.0 + np.exp(_QABF_KAPPA_G * (ratio - _QABF_SIGMA_G)))
    qa = _QABF_GAMMA_A / (1.0 + np.exp(_QABF_KAPPA_A * (angle - _QABF_SIGMA_A)))
    return qg * qa


def qabf(fused, source_a, source_b) -> float:
    """Edge-information preservation, strength-weighted over both sources."""
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    g_a, ang_a = _sobel_strength_angle(a)
    g_b, ang_b = _sobel_strength_angle(b)
    g_f, ang_f = _sobel_strength_angle(f)
    q_af = _edge_preservation(g_a, ang_a, g_f, ang_f)
    q_bf = _edge_preservation(g_b, ang_b, g_f, ang_f)
    denom = float(np.sum(g_a + g_b))
    if denom == 0.0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b)) / denom


# ---------------------------------------------------------------------------
# Qy


def _window_stats(img_a, img_b, window):
    kernel = np.ones((window, window), dtype=np.float64) / (window * window)
    mu_a = convolve2d(img_a, kernel, mode="valid")
    mu_b = convolve2d(img_b, kernel, mode="valid")
    var_a = convolve2d(img_a * img_a, kernel, mode="valid") - mu_a * mu_a
    var_b = convolve2d(img_b * img_b, kernel, mode="valid") - mu_b * mu_b
    cov = convolve2d(img_a * img_b, kernel, mode="valid") - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _windowed_ssim(mu_a, mu_b, var_a, var_b, cov):
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def qy(fused, source_a, source_b) -> float:
    """Structural blend over 7x7 sliding windows.

    Where the sources agree (windowed SSIM >= 0.75) the two fused-vs-source
    SSIMs are mixed with local-variance weights; elsewhere the better of the
    two is taken.
    """
    f, a, b = map(to_luminance, (fused, source_a, source_b))
    _check_triple(f, a, b)
    w = _QY_WINDOW
    if min(f.shape) < w:
        raise ShapeError(f"image {f.shape} smaller than the {w}x{w} window")
    mu_a, mu_b, var_a, var_b, cov_ab = _window_stats(a, b, w)
    mu_af, mu_fa, var_a2, var_f, cov_af = _window_stats(a, f, w)
    mu_bf, mu_fb, var_b2, var_f2, cov_bf = _window_stats(b, f, w)
    ssim_ab = _windowed_ssim(mu_a, mu_b, var_a, var_b, cov_ab)
    ssim_af = _windowed_ssim(mu_af, mu_fa, var_a2, var_f, cov_af)
    ssim_bf = _windowed_ssim(mu_bf, mu_fb, var_b2, var_f2, cov_bf)
    var_sum = var_a + var_b
    lam = np.where(var_sum > 0.0, var_a / np.where(var_sum > 0.0, var_sum, 1.0), 0.5)
    blended = lam * ssim_af + (1.0 - lam) * ssim_bf
    best = np.maximum(ssim_af, ssim_bf)
    return float(np.mean(np.where(ssim_ab >= _QY_THRESHOLD, blended, best)))


# ---------------------------------------------------------------------------
# Dataset-level protocol

_METRIC_FNS = {
    "mi": mi_fusion,
    "vif": vif_fusion,
    "qabf": qabf,
    "qy": qy,
    "cc": cc_fusion,
    "psnr": psnr_fusion,
}


def compute_fusion_metrics(fused, source_a, source_b, metrics=METRIC_NAMES) -> dict:
    return {name: _METRIC_FNS[name](fused, source_a, source_b) for name in metrics}


@dataclass
class MetricReport:
    metrics: tuple = METRIC_NAMES
    per_sample: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def aggregate_from_samples(self):
        self.aggregate = {}
        for name in self.metrics:
            values = np.array([row[name] for row in self.per_sample], dtype=np.float64)
            finite = values[np.isfinite(values)]
            excluded = int(len(values) - len(finite))
            if excluded:
                warnings.warn(
                    f"{excluded} undefined/inf value(s) excluded from '{name}' aggregate"
                )
            self.aggregate[name] = {
                "mean": float(np.mean(finite)) if len(finite) else math.nan,
                "median": float(np.median(finite)) if len(finite) else math.nan,
                "excluded": excluded,
            }
        return self

    @staticmethod
    def _fmt(value):
        if isinstance(value, float) and math.isnan(value):
            return "undefined"
        if isinstance(value, float) and math.isinf(value):
            return "inf"
        if isinstance(value, float):
            return f"{value:.6f}"
        return str(value)

    def to_text(self) -> str:
        lines = ["\t".join(("sample_id",) + tuple(self.metrics))]
        for row in self.per_sample:
            lines.append(
                "\t".join([row["sample_id"]] + [self._fmt(row[m]) for m in self.metrics])
            )
        lines.append("")
        lines.append("# aggregate\tmetric\tmean\tmedian\texcluded")
        for name in self.metrics:
            agg = self.aggregate[name]
            lines.append(
                "# aggregate\t{}\t{}\t{}\t{}".format(
                    name, self._fmt(agg["mean"]), self._fmt(agg["median"]), agg["excluded"]
                )
            )
        for sample_id in self.skipped:
            lines.append(f"# skipped\t{sample_id}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    def plot(self, out_dir):
        """One box-style distribution plot per metric (mean marked)."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name in self.metrics:
            values = np.array([row[name] for row in self.per_sample], dtype=np.float64)
            finite = values[np.isfinite(values)]
            fig, ax = plt.subplots(figsize=(3, 4))
            if len(finite):
                ax.boxplot(finite, showmeans=True, meanprops={"marker": "o"})
            ax.set_title(name)
            path = out / f"{name}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
        return written


def _index_dir(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.is_file()}


def evaluate_dataset(fused_dir, source_a_dir, source_b_dir, metrics=METRIC_NAMES) -> MetricReport:
    """Per-sample metrics plus mean/median aggregates over matched stems."""
    from .data import read_image

    fused_idx = _index_dir(fused_dir)
    a_idx = _index_dir(source_a_dir)
    b_idx = _index_dir(source_b_dir)
    common = sorted(set(fused_idx) & set(a_idx) & set(b_idx))
    skipped = sorted((set(fused_idx) | set(a_idx) | set(b_idx)) - set(common))
    if not common:
        raise DataError("no filenames shared by the fused and source directories")
    report = MetricReport(metrics=tuple(metrics), skipped=skipped)
    for stem in common:
        fused = to_luminance(read_image(fused_idx[stem]))
        src_a = to_luminance(read_image(a_idx[stem]))
        src_b = to_luminance(read_image(b_idx[stem]))
        row = {"sample_id": stem}
        row.update(compute_fusion_metrics(fused, src_a, src_b, metrics))
        report.per_sample.append(row)
    return report.aggregate_from_samples()
