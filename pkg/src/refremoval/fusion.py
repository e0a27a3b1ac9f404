"""Syntax-aware visual attention.

Three heads fuse text into a visual map V_i of shape B x C_i x H_i x W_i:

* sentence head: cosine-similarity attention of pixels over all tokens L,
  temperature gamma, softmax, weighted sum of value columns, Hadamard with V_i;
* attribute head: the same pipeline over L_aw with raw dot-product scores;
* identity head: hard attention, every identity column weighted 1 and summed.

Heads are merged with learnable scalar weights. Text inputs are padded
batches (B x C_L x T) with a boolean key mask (B x T, True = real token).
"""

from __future__ import annotations

import torch
import torch.nn as nn

NORM_EPS = 1e-8


def _channel_map(weight: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """1x1 channel projection of ``x`` (B x C_in x ...) by ``weight`` (C_out x C_in)."""
    return torch.einsum("oc,bc...->bo...", weight, x)


def project(L, V, W_k, W_v, W_q):
    """-> (L_k, L_v, V_q); V_q is flattened row-major over (H, W)."""
    L_k = _channel_map(W_k, L)
    L_v = _channel_map(W_v, L)
    V_q = _channel_map(W_q, V).flatten(2)
    return L_k, L_v, V_q


def _safe_norm(x: torch.Tensor, dim: int) -> torch.Tensor:
    return torch.sqrt((x * x).sum(dim) + NORM_EPS**2)


def cosine_attention(V_q: torch.Tensor, L_k: torch.Tensor, gamma) -> torch.Tensor:
    """scores[b, p, t] = cos(v_p, k_t) / gamma; shapes B x C x P, B x C x T -> B x P x T."""
    dots = V_q.transpose(1, 2) @ L_k
    norms = _safe_norm(V_q, 1)[:, :, None] * _safe_norm(L_k, 1)[:, None, :]
    return dots / (gamma * norms)


def dot_attention(V_q: torch.Tensor, L_k: torch.Tensor) -> torch.Tensor:
    return V_q.transpose(1, 2) @ L_k


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis; rows with no valid key come out all-zero."""
    if key_mask is None:
        return torch.softmax(scores, dim=-1)
    m = key_mask[:, None, :]
    weights = torch.softmax(scores.masked_fill(~m, float("-inf")), dim=-1)
    return torch.where(m.any(-1, keepdim=True), weights, torch.zeros_like(weights))


def attend(scores, L_v, spatial: tuple[int, int], key_mask=None) -> torch.Tensor:
    """Softmax over keys, weighted sum of value columns, back to B x C x H x W."""
    weights = masked_softmax(scores, key_mask)
    G = L_v @ weights.transpose(1, 2)
    return G.unflatten(2, spatial)


def hadamard_fuse(V: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    if V.shape != G.shape:
        raise ValueError(f"shape mismatch: {tuple(V.shape)} vs {tuple(G.shape)}")
    return V * G


def sentence_head(L, V, W_k, W_v, W_q, gamma, key_mask=None):
    L_k, L_v, V_q = project(L, V, W_k, W_v, W_q)
    G = attend(cosine_attention(V_q, L_k, gamma), L_v, V.shape[-2:], key_mask)
    return hadamard_fuse(V, G)


def aw_head(L_aw, V, W_k, W_v, W_q, key_mask=None):
    L_k, L_v, V_q = project(L_aw, V, W_k, W_v, W_q)
    G = attend(dot_attention(V_q, L_k), L_v, V.shape[-2:], key_mask)
    return hadamard_fuse(V, G)


def iw_head(L_iw, V, W_v, key_mask=None):
    """Hard attention: unit-weight sum of projected identity columns at every pixel."""
    L_v = _channel_map(W_v, L_iw)
    if key_mask is not None:
        L_v = L_v * key_mask[:, None, :]
    G = L_v.sum(-1)[:, :, None, None].expand_as(V)
    return hadamard_fuse(V, G)


def merge_heads(head1, head2, head3, weights) -> torch.Tensor:
    return weights[0] * head1 + weights[1] * head2 + weights[2] * head3


def _proj(c_out: int, c_in: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(c_out, c_in) / c_in**0.5)


class SyntaxAwareFusion(nn.Module):
    """Fusion for one encoder stage."""

    def __init__(self, text_dim: int, channels: int):
        super().__init__()
        self.W_k1, self.W_v1, self.W_q1 = _proj(channels, text_dim), _proj(channels, text_dim), _proj(channels, channels)
        self.W_k2, self.W_v2, self.W_q2 = _proj(channels, text_dim), _proj(channels, text_dim), _proj(channels, channels)
        self.W_v3 = _proj(channels, text_dim)
        self.gamma = nn.Parameter(torch.tensor(1.0))
        self.merge = nn.Parameter(torch.full((3,), 1.0 / 3.0))

    def heads(self, V, L, L_mask, L_aw, aw_mask, L_iw, iw_mask):
        gamma = self.gamma.clamp_min(1e-4)
        h1 = sentence_head(L, V, self.W_k1, self.W_v1, self.W_q1, gamma, L_mask)
        h2 = aw_head(L_aw, V, self.W_k2, self.W_v2, self.W_q2, aw_mask)
        h3 = iw_head(L_iw, V, self.W_v3, iw_mask)
        return h1, h2, h3

    def forward(self, V, L, L_mask, L_aw, aw_mask, L_iw, iw_mask):
        return merge_heads(*self.heads(V, L, L_mask, L_aw, aw_mask, L_iw, iw_mask), self.merge)


def head_importance(stages) -> list[float]:
    """Normalized summed |merge weight| per head across stages."""
    total = torch.stack([s.merge.detach().abs() for s in stages]).sum(0)
    return (total / total.sum()).tolist()
