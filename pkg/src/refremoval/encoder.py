"""Hierarchical image encoder producing a four-level feature pyramid.

Stage 1 embeds non-overlapping patches; stages 2-4 merge 2x2 neighbourhoods
(halving resolution, doubling channels). Each stage then runs residual
blocks with windowed self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_STAGES = 4


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 2
    base_channels: int = 16
    blocks_per_stage: int = 2
    window: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        step = self.patch_size * 2 ** (NUM_STAGES - 1)
        if self.image_size % step:
            raise ValueError(
                f"image size {self.image_size} must be divisible by patch_size * 8 = {step}"
            )

    def channels(self, stage: int) -> int:
        """Channels of stage ``stage`` (1-based)."""
        return self.base_channels * 2 ** (stage - 1)

    def resolution(self, stage: int) -> int:
        return self.image_size // (self.patch_size * 2 ** (stage - 1))


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class WindowAttention(nn.Module):
    def __init__(self, channels: int, window: int, heads: int | None = None):
        super().__init__()
        self.window = window
        self.heads = heads or max(1, channels // 16)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        w = min(self.window, H, W)
        if H % w or W % w:
            w = 1
        nh, hd = self.heads, C // self.heads
        qkv = self.qkv(x).view(B, 3, nh, hd, H // w, w, W // w, w)
        # -> 3, B, nh, windows_y, windows_x, w*w, hd
        qkv = qkv.permute(1, 0, 2, 4, 6, 5, 7, 3).reshape(3, B, nh, H // w, W // w, w * w, hd)
        q, k, v = qkv.unbind(0)
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        out = (attn @ v).view(B, nh, H // w, W // w, w, w, hd)
        out = out.permute(0, 1, 6, 2, 4, 3, 5).reshape(B, C, H, W)
        return self.proj(out)


class AttentionBlock(nn.Module):
    """Pre-norm residual block: windowed attention then a pointwise MLP."""

    def __init__(self, channels: int, window: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = ChannelNorm(channels)
        self.attn = WindowAttention(channels, window)
        self.norm2 = ChannelNorm(channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, mlp_ratio * channels, 1),
            nn.GELU(),
            nn.Conv2d(mlp_ratio * channels, channels, 1),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.downs = nn.ModuleList()
        self.stages = nn.ModuleList()
        in_ch = 3
        for i in range(1, NUM_STAGES + 1):
            ch = cfg.channels(i)
            k = cfg.patch_size if i == 1 else 2
            self.downs.append(nn.Sequential(nn.Conv2d(in_ch, ch, k, stride=k), ChannelNorm(ch)))
            self.stages.append(nn.Sequential(
                *[AttentionBlock(ch, cfg.window, cfg.mlp_ratio) for _ in range(cfg.blocks_per_stage)]
            ))
            in_ch = ch

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """``image`` B x 3 x H x W in [0, 1] -> [V_1, V_2, V_3, V_4]."""
        expect = self.cfg.image_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (expect, expect):
            raise ValueError(
                f"expected image of shape (B, 3, {expect}, {expect}), got {tuple(image.shape)}"
            )
        feats = []
        x = image
        for down, stage in zip(self.downs, self.stages):
            x = stage(down(x))
            feats.append(x)
        return feats


def encode_image(image: torch.Tensor, encoder: ImageEncoder) -> list[torch.Tensor]:
    """Unbatched convenience: 3 x H x W -> list of C_i x H_i x W_i."""
    return [v[0] for v in encoder(image[None])]


def pooled_features(encoder: ImageEncoder, images: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled deepest features, one row per image."""
    with torch.no_grad():
        return F.adaptive_avg_pool2d(encoder(images)[-1], 1).flatten(1)
