"""Training objectives: deep segmentation BCE, multi-scale L1, patch adversarial."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class LossWeights:
    rec: float = 5.0
    adv: float = 20.0

    def __post_init__(self):
        if self.rec < 0 or self.adv < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    seg: float
    rec: float
    adv: float
    total: float
    seg_per_scale: list[float] = field(default_factory=list)
    rec_per_scale: list[float] = field(default_factory=list)
    seg_per_pixel: float | None = None
    disc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def seg_loss_terms(logits: list[torch.Tensor], gt_mask: torch.Tensor) -> list[torch.Tensor]:
    """Per-scale BCE summed over pixels (averaged over the batch)."""
    gt = gt_mask.to(logits[0].dtype)
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")
    size = gt.shape[-2:]
    terms = []
    for lg in logits:
        bce = F.binary_cross_entropy_with_logits(upsample_to(lg, size), gt, reduction="none")
        terms.append(bce.flatten(1).sum(1).mean())
    return terms


def seg_loss(logits: list[torch.Tensor], gt_mask: torch.Tensor) -> torch.Tensor:
    return torch.stack(seg_loss_terms(logits, gt_mask)).sum()


def area_downsample(img: torch.Tensor, size) -> torch.Tensor:
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    return F.adaptive_avg_pool2d(img, size)


def rec_loss_terms(rgb: list[torch.Tensor], gt: torch.Tensor) -> list[torch.Tensor]:
    return [(x - area_downsample(gt, x.shape[-2:])).abs().mean() for x in rgb]


def rec_loss(rgb: list[torch.Tensor], gt: torch.Tensor) -> torch.Tensor:
    return torch.stack(rec_loss_terms(rgb, gt)).sum()


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic emitting one logit per image patch.

    ``receptive_field=16`` is the default; ``4`` gives the very local
    critic intended for runs without the reconstruction term.
    """

    def __init__(self, in_ch: int = 3, width: int = 32, receptive_field: int = 16):
        super().__init__()
        if receptive_field == 16:
            layers = [
                nn.Conv2d(in_ch, width, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
                nn.Conv2d(2 * width, 1, 3, 1, 1),
            ]
        elif receptive_field == 4:
            layers = [
                nn.Conv2d(in_ch, width, 2, 1, 0), nn.LeakyReLU(0.2),
                nn.Conv2d(width, 1, 3, 1, 1),
            ]
        else:
            raise ValueError(f"unsupported receptive field {receptive_field}; use 16 or 4")
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf


def adv_losses(fake_logits: torch.Tensor, real_logits: torch.Tensor):
    """-> (generator term, discriminator term), means over the patch grid.

    Discriminator: -E[log(1 - D(fake))] - E[log D(real)].
    Generator (non-saturating): -E[log D(fake)].
    Works on logits; log-sigmoid keeps the logs finite.
    """
    disc = -F.logsigmoid(-fake_logits).mean() - F.logsigmoid(real_logits).mean()
    gen = -F.logsigmoid(fake_logits).mean()
    return gen, disc


def generator_adv_loss(disc: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    return -F.logsigmoid(disc(fake)).mean()


def discriminator_loss(disc: nn.Module, fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    return adv_losses(disc(fake.detach()), disc(real))[1]


def discriminator_step(disc: nn.Module, optimizer: torch.optim.Optimizer, fake: torch.Tensor,
                       real: torch.Tensor) -> float:
    """One update of the critic; ``fake`` is detached from the generator graph."""
    loss = discriminator_loss(disc, fake, real)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def total_loss(seg, rec, adv, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    return seg + weights.rec * rec + weights.adv * adv


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def make_report(seg_terms, rec_terms, adv, weights: LossWeights, pixels: int,
                disc: float | None = None) -> LossReport:
    seg_terms = [_scalar(t) for t in seg_terms]
    rec_terms = [_scalar(t) for t in rec_terms]
    seg, rec, adv = sum(seg_terms), sum(rec_terms), _scalar(adv)
    return LossReport(
        seg=seg, rec=rec, adv=adv,
        total=float(total_loss(seg, rec, adv, weights)),
        seg_per_scale=seg_terms,
        rec_per_scale=rec_terms,
        seg_per_pixel=seg / (pixels * max(len(seg_terms), 1)),
        disc=disc,
    )
