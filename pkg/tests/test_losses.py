import math

import pytest
import torch
import torch.nn as nn

from fdcheck import max_rel_error
from refremoval.losses import (
    LossWeights,
    PatchDiscriminator,
    adv_losses,
    discriminator_step,
    make_report,
    rec_loss,
    rec_loss_terms,
    seg_loss,
    seg_loss_terms,
    total_loss,
)

D = torch.float64
LN2 = math.log(2)


def gen(seed):
    return torch.Generator().manual_seed(seed)


def rand_mask(shape, seed):
    return (torch.rand(shape, generator=gen(seed)) > 0.5).to(D)


# --- segmentation ---------------------------------------------------------------------


def test_seg_saturated_correct_is_near_zero():
    gt = rand_mask((1, 1, 8, 8), 0)
    logits = [(gt * 40 - 20)]
    assert seg_loss(logits, gt) < 1e-6


def test_seg_zero_logits_closed_form():
    gt = rand_mask((2, 1, 8, 8), 1)
    logits = [torch.zeros(2, 1, 8 >> i, 8 >> i, dtype=D) for i in range(3)]
    assert abs(seg_loss(logits, gt).item() - LN2 * 64 * 3) < 1e-9


def test_seg_single_pixel_hand_case():
    z, y = 0.7, 1.0
    expect = -(y * math.log(1 / (1 + math.exp(-z))) + (1 - y) * math.log(1 - 1 / (1 + math.exp(-z))))
    out = seg_loss([torch.tensor([[[[z]]]], dtype=D)], torch.tensor([[[[y]]]], dtype=D))
    assert abs(out.item() - expect) < 1e-12


def test_seg_upsamples_coarse_scales():
    gt = torch.ones(1, 1, 4, 4, dtype=D)
    coarse = torch.tensor([[[[1.0, -1.0], [-1.0, 1.0]]]], dtype=D)
    up = torch.nn.functional.interpolate(coarse, size=(4, 4), mode="bilinear", align_corners=False)
    expect = torch.nn.functional.softplus(-up).sum()
    assert torch.allclose(seg_loss_terms([coarse], gt)[0], expect)


def test_seg_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        seg_loss([torch.zeros(1, 1, 2, 2)], torch.full((1, 1, 2, 2), 0.5))


def test_seg_nonnegative():
    gt = rand_mask((1, 1, 8, 8), 2)
    for seed in range(10):
        lg = [torch.randn(1, 1, 8 >> i, 8 >> i, generator=gen(seed)) * 5 for i in range(3)]
        assert seg_loss(lg, gt) >= 0


# --- reconstruction ---------------------------------------------------------------------


def test_rec_identical_and_offset():
    gt = torch.rand(1, 3, 8, 8, generator=gen(3), dtype=D)
    pyramid = [torch.nn.functional.adaptive_avg_pool2d(gt, 8 >> i) for i in range(3)]
    assert rec_loss(pyramid, gt) < 1e-12
    terms = rec_loss_terms([p + 0.1 for p in pyramid], gt)
    assert all(abs(t.item() - 0.1) < 1e-12 for t in terms)


def test_rec_matches_elementwise_oracle():
    g = gen(4)
    gt = torch.rand(2, 3, 4, 4, generator=g, dtype=D)
    x = torch.rand(2, 3, 2, 2, generator=g, dtype=D)
    down = torch.zeros(2, 3, 2, 2, dtype=D)
    for r in range(2):
        for c in range(2):
            down[..., r, c] = gt[..., 2 * r:2 * r + 2, 2 * c:2 * c + 2].mean((-1, -2))
    expect = (x - down).abs().sum() / x.numel()
    assert abs(rec_loss([x], gt).item() - expect.item()) < 1e-12


# --- adversarial ----------------------------------------------------------------------------


def test_adv_uniform_discriminator():
    zeros = torch.zeros(1, 1, 3, 3, dtype=D)  # sigmoid(0) = 0.5
    gen_term, disc_term = adv_losses(zeros, zeros)
    assert abs(disc_term.item() - 2 * LN2) < 1e-12
    assert abs(disc_term.item() - 1.3863) < 1e-4
    assert abs(gen_term.item() - LN2) < 1e-12


def test_adv_perfect_discriminator():
    _, disc_term = adv_losses(torch.full((1, 1, 2, 2), -30.0), torch.full((1, 1, 2, 2), 30.0))
    assert 0 <= disc_term.item() < 1e-10


def test_adv_grid_hand_average():
    f = torch.tensor([[[[0.5, -1.0], [2.0, 0.0]]]], dtype=D)
    r = torch.tensor([[[[1.0, 0.3], [-0.2, 3.0]]]], dtype=D)
    sig = torch.sigmoid
    expect_d = -sum(math.log(1 - sig(v).item()) for v in f.flatten()) / 4 \
        - sum(math.log(sig(v).item()) for v in r.flatten()) / 4
    expect_g = -sum(math.log(sig(v).item()) for v in f.flatten()) / 4
    g_term, d_term = adv_losses(f, r)
    assert abs(d_term.item() - expect_d) < 1e-12 and abs(g_term.item() - expect_g) < 1e-12


def test_adv_extreme_logits_finite():
    g_term, d_term = adv_losses(torch.full((1, 1, 1, 1), 1e4), torch.full((1, 1, 1, 1), -1e4))
    assert math.isfinite(g_term.item()) and math.isfinite(d_term.item())


# --- total / report -------------------------------------------------------------------------


def test_total_weights():
    assert total_loss(1.0, 1.0, 1.0) == 26.0
    assert total_loss(0.0, 0.0, 0.0) == 0.0
    g = gen(5)
    s, r, a = torch.rand(3, generator=g).tolist()
    w = LossWeights(rec=2.0, adv=0.5)
    assert total_loss(s, r, a, w) == s + 2.0 * r + 0.5 * a
    with pytest.raises(ValueError):
        LossWeights(rec=-1.0)


def test_report_composition_identity():
    t = lambda v: torch.tensor(v, dtype=D)
    rep = make_report([t(0.3), t(0.2)], [t(0.05)] * 3, t(0.7), LossWeights(), pixels=16, disc=1.1)
    assert abs(rep.total - (rep.seg + 5 * rep.rec + 20 * rep.adv)) < 1e-9
    assert abs(rep.seg_per_pixel - 0.5 / 32) < 1e-12
    d = rep.to_dict()
    assert set(d) >= {"seg", "rec", "adv", "total", "seg_per_scale", "rec_per_scale"}


# --- gradients ---------------------------------------------------------------------------------


def test_loss_gradients_match_finite_differences():
    g = gen(6)
    gt = rand_mask((1, 1, 4, 4), 7)
    img = torch.rand(1, 3, 4, 4, generator=g, dtype=D)
    l1 = torch.randn(1, 1, 4, 4, generator=g, dtype=D)
    l2 = torch.randn(1, 1, 2, 2, generator=g, dtype=D)
    assert max_rel_error(lambda a, b: seg_loss([a, b], gt), [l1, l2]) < 1e-3
    # keep away from |x - y| = 0 kinks
    x = img + 0.05 + 0.3 * torch.rand(1, 3, 4, 4, generator=g, dtype=D)
    assert max_rel_error(lambda x: rec_loss([x], img), [x]) < 1e-3
    f = torch.randn(1, 1, 2, 2, generator=g, dtype=D)
    r = torch.randn(1, 1, 2, 2, generator=g, dtype=D)
    assert max_rel_error(lambda f, r: adv_losses(f, r)[1], [f, r]) < 1e-3
    assert max_rel_error(lambda f: adv_losses(f, r)[0], [f]) < 1e-3


# --- discriminator ------------------------------------------------------------------------------


@pytest.mark.parametrize("rf", [16, 4])
def test_discriminator_receptive_field(rf):
    d = PatchDiscriminator(receptive_field=rf)
    assert d.receptive_field() == rf
    out = d(torch.randn(1, 3, 32, 32))
    assert out.dim() == 4 and out.shape[1] == 1 and out.shape[-1] > 1


def test_discriminator_measured_receptive_field():
    d = PatchDiscriminator(receptive_field=16).double()
    x = torch.zeros(1, 3, 32, 32, dtype=D, requires_grad=True)
    out = d(x)
    out[0, 0, 4, 4].backward()
    cols = torch.nonzero(x.grad.abs().sum((0, 1, 2))).flatten()
    assert cols.max() - cols.min() + 1 <= 16


def test_discriminator_rejects_unknown_rf():
    with pytest.raises(ValueError):
        PatchDiscriminator(receptive_field=7)


def test_discriminator_step_decreases_and_detaches():
    torch.manual_seed(0)
    disc = PatchDiscriminator(width=8)
    opt = torch.optim.Adam(disc.parameters(), lr=2e-4, betas=(0.5, 0.999))
    generator = nn.Conv2d(3, 3, 1)
    src = torch.rand(1, 3, 16, 16)
    fake = generator(src)
    real = torch.rand(1, 3, 16, 16)
    before = [p.clone() for p in disc.parameters()]
    losses = [discriminator_step(disc, opt, fake, real) for _ in range(50)]
    assert losses[-1] < losses[0]
    assert all(p.grad is None for p in generator.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, disc.parameters()))
