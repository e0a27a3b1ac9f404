"""Segmentation decoder with deformable feature alignment.

At each scale the coarser map is upsampled 2x and channel-reduced, the skip
features are channel-reduced, a 3x3 convolution over their concatenation
predicts per-tap offsets, and a deformable 3x3 convolution resamples the
upsampled map before the two are added.

Offset layout: 18 channels, tap ``k`` (row-major over the 3x3 kernel) owns
channels ``2k`` (x displacement) and ``2k + 1`` (y displacement).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import AttentionBlock

KERNEL = 3
TAPS = KERNEL * KERNEL


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def bilinear_sample(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B x C x H x W) at real pixel coordinates with zero padding.

    ``px``/``py`` have shape B x N; returns B x C x N. Each of the four
    corners outside the map contributes zero.
    """
    B, C, H, W = x.shape
    x0, y0 = torch.floor(px), torch.floor(py)
    wx1, wy1 = px - x0, py - y0
    wx0, wy0 = 1 - wx1, 1 - wy1
    x0, y0 = x0.long(), y0.long()
    flat = x.reshape(B, C, H * W)
    out = 0
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1))[:, None, :].expand(B, C, -1)
            vals = flat.gather(2, idx)
            out = out + vals * (wx * wy * valid)[:, None, :]
    return out


def deform_conv2d(x, offset, weight, bias=None, dilation: int = 1) -> torch.Tensor:
    """3x3 deformable convolution, stride 1, 'same' padding.

    ``x`` B x C x H x W, ``offset`` B x 18 x H x W, ``weight`` O x C x 3 x 3.
    """
    B, C, H, W = x.shape
    if offset.shape != (B, 2 * TAPS, H, W):
        raise ValueError(f"offset must be {(B, 2 * TAPS, H, W)}, got {tuple(offset.shape)}")
    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=x.dtype), torch.arange(W, dtype=x.dtype), indexing="ij"
    )
    cols = []
    for k in range(TAPS):
        ky, kx = divmod(k, KERNEL)
        px = xs + (kx - 1) * dilation + offset[:, 2 * k]
        py = ys + (ky - 1) * dilation + offset[:, 2 * k + 1]
        cols.append(bilinear_sample(x, px.reshape(B, -1), py.reshape(B, -1)))
    cols = torch.stack(cols, dim=2)  # B x C x 9 x HW
    out = torch.einsum("ock,bckn->bon", weight.reshape(weight.shape[0], C, TAPS), cols)
    if bias is not None:
        out = out + bias[None, :, None]
    return out.reshape(B, -1, H, W)


class DeformConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, KERNEL, KERNEL))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)

    def forward(self, x, offset):
        return deform_conv2d(x, offset, self.weight, self.bias)


class AlignStage(nn.Module):
    """One decoding step S_{i+1}, V_i -> S_i."""

    def __init__(self, coarse_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.reduce_s = nn.Conv2d(coarse_ch, out_ch, 1)
        self.reduce_v = nn.Conv2d(skip_ch, out_ch, 1)
        self.offset = nn.Conv2d(2 * out_ch, 2 * TAPS, KERNEL, padding=1)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.align = DeformConv2d(out_ch, out_ch)

    def upsample_reduce(self, S_coarse, V):
        return self.reduce_s(upsample2x(S_coarse)), self.reduce_v(V)

    def predict_offsets(self, V_r, S_up):
        return self.offset(torch.cat([V_r, S_up], dim=1))

    def forward(self, S_coarse, V):
        S_up, V_r = self.upsample_reduce(S_coarse, V)
        offsets = self.predict_offsets(V_r, S_up)
        return fuse_add(self.align(S_up, offsets), V_r)


def fuse_add(S_hat: torch.Tensor, V_r: torch.Tensor) -> torch.Tensor:
    if S_hat.shape != V_r.shape:
        raise ValueError(f"shape mismatch: {tuple(S_hat.shape)} vs {tuple(V_r.shape)}")
    return S_hat + V_r


class Bottleneck(nn.Module):
    """Two global self-attention blocks on the deepest fused map."""

    def __init__(self, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(AttentionBlock(channels, window=1 << 16), AttentionBlock(channels, window=1 << 16))

    def forward(self, P4):
        return self.blocks(P4)


class SegDecoder(nn.Module):
    """P_1..P_4 -> S_4..S_1 and mask logits for scales 1..3 (finest first)."""

    def __init__(self, channels: list[int]):
        super().__init__()
        self.channels = channels  # C_1..C_4
        self.widths = [c // 2 for c in channels[:-1]] + [channels[-1]]  # C'_1..C'_3, C_4
        self.bottleneck = Bottleneck(channels[-1])
        self.stages = nn.ModuleList(
            AlignStage(self.widths[i + 1], channels[i], self.widths[i]) for i in range(len(channels) - 1)
        )
        self.mask_heads = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in self.widths[:-1])

    def forward(self, P: list[torch.Tensor]):
        S = [None] * len(P)
        S[-1] = self.bottleneck(P[-1])
        for i in range(len(P) - 2, -1, -1):
            S[i] = self.stages[i](S[i + 1], P[i])
        logits = [head(s) for head, s in zip(self.mask_heads, S)]
        return S, logits
