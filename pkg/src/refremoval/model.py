"""End-to-end referring object removal network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder_inp import InpDecoder
from .decoder_seg import SegDecoder
from .encoder import NUM_STAGES, EncoderConfig, ImageEncoder
from .fusion import SyntaxAwareFusion, head_importance
from .textproc import TextEncoder, spans


@dataclass
class ModelConfig:
    vocab_size: int
    text_dim: int = 32
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    patch_size: int = 2
    threshold: float = 0.5


@dataclass
class TextBatch:
    ids: torch.Tensor  # B x T
    lengths: torch.Tensor  # B
    tags: list[list[str]]

    @classmethod
    def build(cls, id_lists: Sequence[Sequence[int]], tags: Sequence[Sequence[str]]) -> "TextBatch":
        T = max(len(x) for x in id_lists)
        ids = torch.zeros(len(id_lists), T, dtype=torch.long)
        for b, row in enumerate(id_lists):
            ids[b, : len(row)] = torch.tensor(list(row), dtype=torch.long)
        return cls(ids, torch.tensor([len(x) for x in id_lists]), [list(t) for t in tags])


@dataclass
class RemovalOutput:
    mask_logits: list[torch.Tensor]  # scales 1..3, each B x 1 x H_i x W_i
    rgb: list[torch.Tensor]  # scales 1..3, each B x 3 x H_i x W_i
    masks: list[torch.Tensor]  # binarized masks used for hole filling
    image: torch.Tensor  # final B x 3 x H x W
    mask_full: torch.Tensor  # final B x 1 x H x W logits
    aw_empty: torch.Tensor  # B bool
    iw_fallback: torch.Tensor  # B bool


def gather_columns(L: torch.Tensor, index_lists: Sequence[Sequence[int]]):
    """Padded column subsets of L (B x C x T) -> (B x C x K, mask B x K)."""
    B, C, _ = L.shape
    K = max(1, max(len(ix) for ix in index_lists))
    out = L.new_zeros(B, C, K)
    mask = torch.zeros(B, K, dtype=torch.bool)
    for b, ix in enumerate(index_lists):
        if ix:
            out[b, :, : len(ix)] = L[b][:, list(ix)]
            mask[b, : len(ix)] = True
    return out, mask


class RemovalNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        channels = [enc.channels(i) for i in range(1, NUM_STAGES + 1)]
        self.text = TextEncoder(cfg.vocab_size, cfg.text_dim)
        self.encoder = ImageEncoder(enc)
        self.fusion = nn.ModuleList(SyntaxAwareFusion(cfg.text_dim, c) for c in channels)
        self.seg = SegDecoder(channels)
        self.inp = InpDecoder(self.seg.widths, cfg.patch_size, cfg.threshold)

    def embed_text(self, text: TextBatch):
        L = self.text(text.ids, text.lengths)
        L_mask = torch.arange(L.shape[2])[None, :] < text.lengths[:, None]
        aw_idx = [spans(t, "AW") for t in text.tags]
        iw_idx = [spans(t, "IW") for t in text.tags]
        L_aw, aw_mask = gather_columns(L, aw_idx)
        L_iw, iw_mask = gather_columns(L, iw_idx)
        fallback = torch.tensor([not ix for ix in iw_idx])
        L_iw = torch.where(fallback[:, None, None], self.text.iw_fallback[None, :, None].expand_as(L_iw), L_iw)
        iw_mask = iw_mask | (fallback[:, None] & (torch.arange(iw_mask.shape[1]) == 0)[None, :])
        return L, L_mask, L_aw, aw_mask, L_iw, iw_mask, ~aw_mask.any(1), fallback

    def forward(self, image: torch.Tensor, text: TextBatch) -> RemovalOutput:
        L, L_mask, L_aw, aw_mask, L_iw, iw_mask, aw_empty, iw_fb = self.embed_text(text)
        V = self.encoder(image)
        P = [f(v, L, L_mask, L_aw, aw_mask, L_iw, iw_mask) for f, v in zip(self.fusion, V)]
        S, logits = self.seg(P)
        _, rgb, masks = self.inp(P[-1], S, logits)
        size = image.shape[-2:]
        final = F.interpolate(rgb[0], size=size, mode="bilinear", align_corners=False)
        mask_full = F.interpolate(logits[0], size=size, mode="bilinear", align_corners=False)
        return RemovalOutput(logits, rgb, masks, final, mask_full, aw_empty, iw_fb)

    def head_importance(self) -> list[float]:
        return head_importance(self.fusion)
