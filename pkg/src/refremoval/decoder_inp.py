"""Inpainting decoder: contextual patch attention filling + dilated refinement.

At scale i the predicted foreground is binarized, the segmentation features
S_i are cut into non-overlapping patches, and every patch touching the
foreground (interior) is replaced by a softmax-weighted sum of exterior
patches. Weights come from cosine similarity of the coarser inpainting
features I_{i+1}, average-pooled onto scale i's patch grid. Exterior patches
are copied from S_i unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import _safe_norm

HDC_RATES = (1, 2, 5)


class NoExternalContext(ValueError):
    """Every patch is interior; there is nothing to fill from."""


def binarize_mask(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (torch.sigmoid(logits.detach()) > threshold)


def hole_out(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return features * (~mask).to(features.dtype)


@dataclass
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    interior: torch.Tensor  # bool, rows*cols, row-major

    @classmethod
    def from_mask(cls, mask: torch.Tensor, patch_size: int = 2) -> "PatchGrid":
        """``mask`` H x W bool; a patch is interior iff any pixel is masked."""
        H, W = mask.shape
        if H % patch_size or W % patch_size:
            raise ValueError(f"map {H}x{W} not divisible by patch size {patch_size}")
        pooled = F.max_pool2d(mask[None, None].float(), patch_size)[0, 0] > 0
        return cls(patch_size, H // patch_size, W // patch_size, pooled.flatten())

    @property
    def interior_index(self) -> torch.Tensor:
        return torch.nonzero(self.interior).flatten()

    @property
    def exterior_index(self) -> torch.Tensor:
        return torch.nonzero(~self.interior).flatten()


def grid_descriptors(features: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Average-pool (or nearest-upsample) ``features`` (B x C x h x w) onto a rows x cols grid.

    Returns B x (rows*cols) x C.
    """
    h, w = features.shape[-2:]
    if rows <= h and cols <= w:
        pooled = F.adaptive_avg_pool2d(features, (rows, cols))
    else:
        pooled = F.interpolate(features, size=(rows, cols), mode="nearest")
    return pooled.flatten(2).transpose(1, 2)


def extract_patches(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """B x C x H x W -> B x G x (C * p * p), patches in row-major grid order."""
    return F.unfold(x, patch_size, stride=patch_size).transpose(1, 2)


def fold_patches(patches: torch.Tensor, size: tuple[int, int], patch_size: int) -> torch.Tensor:
    return F.fold(patches.transpose(1, 2), size, patch_size, stride=patch_size)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rows of ``a`` (... x N x D) against rows of ``b`` (... x M x D)."""
    return (a @ b.transpose(-1, -2)) / (_safe_norm(a, -1)[..., :, None] * _safe_norm(b, -1)[..., None, :])


def patch_similarity(coarse: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """N x M cosine similarities between interior and exterior patch descriptors.

    ``coarse`` is the C x h x w coarser inpainting map.
    """
    ext = grid.exterior_index
    if ext.numel() == 0:
        raise NoExternalContext("no external context: every patch is masked")
    desc = grid_descriptors(coarse[None], grid.rows, grid.cols)[0]
    return cosine_matrix(desc[grid.interior_index], desc[ext])


def attention_scores(similarities: torch.Tensor) -> torch.Tensor:
    return torch.softmax(similarities, dim=-1)


def fill(alpha: torch.Tensor, S: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """Interior patches of the result are ``alpha @ exterior patches of S``; the rest is S."""
    patches = extract_patches(S[None], grid.patch_size)[0]
    out = patches.clone()
    out[grid.interior_index] = alpha @ patches[grid.exterior_index]
    return fold_patches(out[None], S.shape[-2:], grid.patch_size)[0]


def batched_fill(coarse, S, mask, patch_size: int, fallback: torch.Tensor | None = None):
    """Vectorized fill over a batch with per-sample masks.

    Interior columns are excluded from the softmax with -inf, which equals a
    softmax restricted to exterior patches. Samples with no exterior patch
    get ``fallback`` (a C-vector) broadcast over their interior.
    Returns (filled S, alpha B x G x G, interior B x G).
    """
    B, C, H, W = S.shape
    rows, cols = H // patch_size, W // patch_size
    interior = (F.max_pool2d(mask.float(), patch_size) > 0).flatten(1)
    desc = grid_descriptors(coarse, rows, cols)
    sim = cosine_matrix(desc, desc)
    has_ctx = (~interior).any(1)
    # context-free samples keep finite scores so the softmax backward stays NaN-free
    sim = sim.masked_fill((interior & has_ctx[:, None])[:, None, :], float("-inf"))
    alpha = torch.softmax(sim, dim=-1)
    alpha = torch.where(has_ctx[:, None, None], alpha, torch.zeros_like(alpha))

    patches = extract_patches(hole_out(S, mask), patch_size)
    filled = alpha @ patches
    if fallback is not None:
        fb = fallback.repeat_interleave(patch_size * patch_size)[None, None, :]
        filled = torch.where(has_ctx[:, None, None], filled, fb.expand_as(filled))
    out = torch.where(interior[..., None], filled, patches)
    return fold_patches(out, (H, W), patch_size), alpha, interior


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class HDCRefine(nn.Module):
    """Stacked dilated 3x3 convolutions (rates 1, 2, 5) with a residual sum."""

    def __init__(self, channels: int, rates=HDC_RATES):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates)

    def branch(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x

    def forward(self, x):
        return x + self.branch(x)


def receptive_field(rates=HDC_RATES, kernel: int = 3) -> int:
    return 1 + sum((kernel - 1) * r for r in rates)


class InpDecoder(nn.Module):
    """P_4 and S_1..S_3 -> I_4..I_1 and RGB decodes for scales 1..3."""

    def __init__(self, seg_widths: list[int], patch_size: int = 2, threshold: float = 0.5):
        super().__init__()
        self.patch_size = patch_size
        self.threshold = threshold
        self.init_blocks = nn.Sequential(*[ResBlock(seg_widths[-1]) for _ in range(4)])
        self.hdc = nn.ModuleList(HDCRefine(w) for w in seg_widths[:-1])
        self.rgb_heads = nn.ModuleList(nn.Conv2d(w, 3, 1) for w in seg_widths[:-1])
        self.context = nn.ParameterList(nn.Parameter(torch.zeros(w)) for w in seg_widths[:-1])

    def forward(self, P4, S: list[torch.Tensor], logits: list[torch.Tensor]):
        n = len(S)
        I = [None] * n
        I[-1] = self.init_blocks(P4)
        masks = [None] * (n - 1)
        for i in range(n - 2, -1, -1):
            masks[i] = binarize_mask(logits[i], self.threshold)
            filled, _, _ = batched_fill(I[i + 1], S[i], masks[i], self.patch_size, self.context[i])
            I[i] = self.hdc[i](filled)
        rgb = [head(x) for head, x in zip(self.rgb_heads, I)]
        return I, rgb, masks
