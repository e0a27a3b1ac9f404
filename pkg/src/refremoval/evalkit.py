"""Removal metrics and computational overhead.

``fid_proxy`` is a Frechet distance between Gaussian fits of this
package's own encoder features. It is not Inception FID and its values are
not comparable with published FID numbers.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0, mask: np.ndarray | None = None) -> float:
    """PSNR in dB of images in [0, 1] rescaled to ``peak``; optional pixel mask (H x W)."""
    a = np.asarray(a, dtype=np.float64) * peak
    b = np.asarray(b, dtype=np.float64) * peak
    diff = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return PSNR_CAP
        diff = diff[mask]
    mse = float(diff.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def _filter_valid(x: np.ndarray, win1d: np.ndarray) -> np.ndarray:
    r = len(win1d) // 2
    out = ndimage.correlate1d(x, win1d, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win1d, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full windows (and channels, for H x W x C input)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < win:
        raise ValueError(f"images must be at least {win}x{win}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, win, sigma, k1, k2)
                              for c in range(a.shape[2])]))
    ax = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pr_at_k(ious, k: float) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    return float((ious >= k).mean()) if ious.size else 0.0


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) for PSD covariances."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root = _psd_sqrt(s1)
    # tr sqrt(S1 S2) = tr sqrt(S1^(1/2) S2 S1^(1/2)), the latter symmetric PSD
    cross = np.linalg.eigvalsh(root @ s2 @ root)
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_cross)
    return max(d, 0.0)


def fid_proxy(set_a, set_b, feature_fn) -> float:
    """Frechet distance of Gaussian fits of ``feature_fn`` outputs (rows = samples)."""
    fa = np.asarray(feature_fn(set_a), dtype=np.float64)
    fb = np.asarray(feature_fn(set_b), dtype=np.float64)
    return frechet_distance(*gaussian_fit(fa), *gaussian_fit(fb))


# ---------------------------------------------------------------------------
# overhead


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def conv_flops(layer: nn.Conv2d, out: torch.Tensor) -> int:
    k = layer.kernel_size[0] * layer.kernel_size[1]
    per_out = 2 * (layer.in_channels // layer.groups) * k
    return per_out * out.numel()


def estimate_flops(model: nn.Module, *inputs) -> int:
    """Multiply-add count (x2) of convolutions, linear layers and deformable convs."""
    from .decoder_seg import DeformConv2d

    total = 0

    def hook(mod, inp, out):
        nonlocal total
        if isinstance(mod, nn.Conv2d):
            total += conv_flops(mod, out)
        elif isinstance(mod, nn.Linear):
            total += 2 * mod.in_features * out.numel()
        elif isinstance(mod, DeformConv2d):
            c_in = mod.weight.shape[1]
            # 9 taps x (4-corner bilinear sample + multiply-add)
            total += 2 * c_in * 9 * out.numel() + 4 * 2 * c_in * 9 * out.shape[-1] * out.shape[-2] * out.shape[0]

    handles = [m.register_forward_hook(hook) for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.Linear, DeformConv2d))]
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in handles:
            h.remove()
    return total


def measure_fps(model: nn.Module, *inputs, runs: int = 20, warmup: int = 3) -> float:
    times = []
    with torch.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model(*inputs)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return 1.0 / statistics.median(times)


def overhead_report(model: nn.Module, *inputs, runs: int = 20) -> dict:
    batch = inputs[0].shape[0]
    return {
        "params": param_count(model),
        "flops": estimate_flops(model, *inputs) / batch,
        "fps": measure_fps(model, *inputs, runs=max(runs, 20)) * batch,
    }


@dataclass
class MetricReport:
    psnr: float
    psnr_hole: float
    ssim: float
    iou: float
    pr_at_k: dict
    fid_proxy: float
    param_count: int
    flops_estimate: float
    fps: float
    baseline_psnr_hole: float | None = None
    head_importance: list | None = None
    notes: list = field(default_factory=lambda: [
        "fid_proxy: Frechet distance on this model's own encoder features, not Inception FID",
        "LPIPS not computed: requires a pretrained perceptual network",
    ])

    def to_dict(self) -> dict:
        return asdict(self)
