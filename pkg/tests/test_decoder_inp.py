import math

import pytest
import torch

from fdcheck import max_rel_error
from refremoval.decoder_inp import (
    HDCRefine,
    InpDecoder,
    NoExternalContext,
    PatchGrid,
    ResBlock,
    attention_scores,
    batched_fill,
    binarize_mask,
    fill,
    hole_out,
    patch_similarity,
    receptive_field,
)

D = torch.float64


def gen(seed):
    return torch.Generator().manual_seed(seed)


def oracle_fill(coarse, S, mask, p):
    """Explicit loops: classify patches, cosine on pooled descriptors, softmax, weighted sum."""
    C, H, W = S.shape
    rows, cols = H // p, W // p
    h, w = coarse.shape[-2:]
    fy, fx = h // rows, w // cols
    inner, outer, desc = [], [], []
    for r in range(rows):
        for c in range(cols):
            g = r * cols + c
            (inner if mask[r * p:(r + 1) * p, c * p:(c + 1) * p].any() else outer).append(g)
            desc.append(coarse[:, r * fy:(r + 1) * fy, c * fx:(c + 1) * fx].mean((1, 2)))

    def patch(g):
        r, c = divmod(g, cols)
        return S[:, r * p:(r + 1) * p, c * p:(c + 1) * p]

    def cos(a, b):
        return float(a @ b) / (math.sqrt(float(a @ a) + 1e-16) * math.sqrt(float(b @ b) + 1e-16))

    out = S.clone()
    for n in inner:
        sims = [cos(desc[n], desc[m]) for m in outer]
        z = sum(math.exp(s) for s in sims)
        acc = torch.zeros(C, p, p, dtype=S.dtype)
        for s, m in zip(sims, outer):
            acc += math.exp(s) / z * patch(m)
        r, c = divmod(n, cols)
        out[:, r * p:(r + 1) * p, c * p:(c + 1) * p] = acc
    return out


# --- binarize / hole out --------------------------------------------------------


def test_binarize_boundary_and_large():
    assert not binarize_mask(torch.zeros(1)).item()
    assert binarize_mask(torch.tensor([20.0])).item()


def test_binarize_matches_threshold_oracle():
    x = torch.randn(4, 4, generator=gen(0)) * 3
    for th in (0.2, 0.5, 0.9):
        assert torch.equal(binarize_mask(x, th), torch.sigmoid(x) > th)
    with pytest.raises(ValueError):
        binarize_mask(x, 1.0)


def test_binarize_is_detached():
    x = torch.randn(3, requires_grad=True)
    assert not binarize_mask(x).requires_grad


def test_hole_out():
    f = torch.randn(2, 4, 4, generator=gen(1))
    assert torch.equal(hole_out(f, torch.zeros(4, 4, dtype=torch.bool)), f)
    assert torch.count_nonzero(hole_out(f, torch.ones(4, 4, dtype=torch.bool))) == 0
    m = torch.rand(4, 4, generator=gen(2)) > 0.5
    assert torch.equal(hole_out(f, m), torch.where(m, torch.zeros_like(f), f))


# --- patch grid -----------------------------------------------------------------------


def test_patch_grid_any_pixel_rule():
    m = torch.zeros(4, 4, dtype=torch.bool)
    m[1, 2] = True
    grid = PatchGrid.from_mask(m, 2)
    assert grid.interior_index.tolist() == [1]
    assert grid.exterior_index.tolist() == [0, 2, 3]
    assert len(grid.interior_index) + len(grid.exterior_index) == 4


def test_patch_grid_rejects_indivisible():
    with pytest.raises(ValueError):
        PatchGrid.from_mask(torch.zeros(5, 4, dtype=torch.bool), 2)


# --- similarity and scores --------------------------------------------------------------


def _grid_from_interior(rows, cols, interior):
    flag = torch.zeros(rows * cols, dtype=torch.bool)
    flag[list(interior)] = True
    return PatchGrid(2, rows, cols, flag)


def test_similarity_self_and_orthogonal():
    coarse = torch.tensor([[[1.0, 1.0, 0.0]], [[0.0, 0.0, 1.0]]], dtype=D)  # C=2, 1x3
    grid = _grid_from_interior(1, 3, [0])
    sim = patch_similarity(coarse, grid)
    assert sim.shape == (1, 2)
    assert abs(sim[0, 0] - 1) < 1e-12 and abs(sim[0, 1]) < 1e-12


def test_similarity_hand_case():
    coarse = torch.tensor([[[3.0, 1.0]], [[4.0, 1.0]]], dtype=D)
    sim = patch_similarity(coarse, _grid_from_interior(1, 2, [0]))
    assert abs(sim.item() - 7 / (5 * math.sqrt(2))) < 1e-12


def test_similarity_no_context():
    with pytest.raises(NoExternalContext, match="no external context"):
        patch_similarity(torch.ones(1, 2, 2), _grid_from_interior(2, 2, [0, 1, 2, 3]))


def test_scores_cases():
    assert torch.equal(attention_scores(torch.tensor([[0.3]])), torch.tensor([[1.0]]))
    assert torch.allclose(attention_scores(torch.full((2, 4), 0.7)), torch.full((2, 4), 0.25))
    a = attention_scores(torch.tensor([[1.0, 0.0]], dtype=D))
    assert torch.allclose(a, torch.tensor([[math.e / (1 + math.e), 1 / (1 + math.e)]], dtype=D))


def test_scores_rows_sum_to_one():
    for seed in range(50):
        a = attention_scores(torch.randn(5, 7, generator=gen(seed)) * 4)
        assert (a.sum(-1) - 1).abs().max() < 1e-5 and (a >= 0).all() and (a <= 1).all()


# --- fill -------------------------------------------------------------------------------


def test_fill_single_exterior():
    S = torch.randn(2, 4, 4, dtype=D, generator=gen(3))
    grid = _grid_from_interior(2, 2, [0, 1, 2])
    out = fill(torch.ones(3, 1, dtype=D), S, grid)
    lone = S[:, 2:, 2:]
    for r in (0, 1):
        for c in (0, 1):
            assert torch.equal(out[:, 2 * r:2 * r + 2, 2 * c:2 * c + 2], lone)


def test_fill_identical_exteriors_ignore_alpha():
    S = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=D).repeat(1, 2, 2)
    grid = _grid_from_interior(2, 2, [3])
    alpha = torch.tensor([[0.2, 0.5, 0.3]], dtype=D)
    assert torch.allclose(fill(alpha, S, grid), S)


@pytest.mark.parametrize("size", [4, 8, 12, 16])
def test_fill_matches_oracle(size):
    for seed in range(15):
        g = gen(seed)
        S = torch.randn(3, size, size, dtype=D, generator=g)
        coarse = torch.randn(5, size // 2, size // 2, dtype=D, generator=g)
        mask = torch.rand(size, size, generator=g) < (0.05 + 0.05 * (seed % 6))
        grid = PatchGrid.from_mask(mask, 2)
        if grid.exterior_index.numel() == 0 or grid.interior_index.numel() == 0:
            continue
        ref = oracle_fill(coarse, S, mask, 2)
        out = fill(attention_scores(patch_similarity(coarse, grid)), S, grid)
        assert (out - ref).abs().max() < 1e-6
        batched, alpha, _ = batched_fill(coarse[None], S[None], mask[None, None], 2)
        assert (batched[0] - ref).abs().max() < 1e-6
        assert (alpha.sum(-1) - 1).abs().max() < 1e-5


def test_fill_exhaustive_masks_4x4():
    # every interior/exterior pattern of a 2x2 patch grid
    g = gen(9)
    S = torch.randn(2, 4, 4, dtype=D, generator=g)
    coarse = torch.randn(3, 2, 2, dtype=D, generator=g)
    for bits in range(1, 15):
        mask = torch.zeros(4, 4, dtype=torch.bool)
        for k in range(4):
            if bits >> k & 1:
                r, c = divmod(k, 2)
                mask[2 * r + 1, 2 * c] = True
        ref = oracle_fill(coarse, S, mask, 2)
        out, _, _ = batched_fill(coarse[None], S[None], mask[None, None], 2)
        assert (out[0] - ref).abs().max() < 1e-9


def test_empty_mask_is_identity():
    S = torch.randn(2, 4, 8, 8, generator=gen(4))
    out, _, interior = batched_fill(torch.randn(2, 6, 4, 4), S, torch.zeros(2, 1, 8, 8, dtype=torch.bool), 2)
    assert torch.equal(out, S) and not interior.any()


def test_full_mask_uses_fallback():
    S = torch.randn(2, 3, 4, 4, generator=gen(5))
    mask = torch.zeros(2, 1, 4, 4, dtype=torch.bool)
    mask[0] = True
    fb = torch.tensor([1.0, 2.0, 3.0])
    out, _, _ = batched_fill(torch.randn(2, 3, 2, 2), S, mask, 2, fb)
    assert torch.equal(out[0], fb[:, None, None].expand(3, 4, 4))
    assert torch.equal(out[1], S[1])


def test_full_mask_backward_is_finite():
    coarse = torch.randn(1, 3, 2, 2, requires_grad=True)
    S = torch.randn(1, 3, 4, 4, requires_grad=True)
    fb = torch.zeros(3, requires_grad=True)
    out, _, _ = batched_fill(coarse, S, torch.ones(1, 1, 4, 4, dtype=torch.bool), 2, fb)
    out.sum().backward()
    assert torch.isfinite(coarse.grad).all() and torch.isfinite(S.grad).all()
    assert torch.allclose(fb.grad, torch.full((3,), 16.0))


def test_fill_gradient_matches_finite_differences():
    g = gen(6)
    mask = torch.zeros(1, 1, 4, 4, dtype=torch.bool)
    mask[0, 0, 0, 1] = mask[0, 0, 3, 3] = True
    coarse = torch.randn(1, 3, 2, 2, dtype=D, generator=g)
    S = torch.randn(1, 2, 4, 4, dtype=D, generator=g)
    probe = torch.randn(1, 2, 4, 4, dtype=D, generator=g)
    err = max_rel_error(lambda c, s: (batched_fill(c, s, mask, 2)[0] * probe).sum(), [coarse, S])
    assert err < 1e-3


# --- refinement ------------------------------------------------------------------------------


def test_hdc_receptive_field():
    assert receptive_field() == 17
    # measured: impulse response support of the branch
    h = HDCRefine(1).double()
    with torch.no_grad():
        for conv in h.convs:
            conv.weight.fill_(1.0)
            conv.bias.zero_()
    x = torch.zeros(1, 1, 41, 41, dtype=D)
    x[0, 0, 20, 20] = 1.0
    support = torch.nonzero(h.branch(x)[0, 0].sum(0)).flatten()
    assert support.max() - support.min() + 1 == 17


def test_hdc_zero_branch_identity():
    h = HDCRefine(3)
    with torch.no_grad():
        for p in h.parameters():
            p.zero_()
    x = torch.randn(1, 3, 8, 8)
    assert torch.equal(h(x), x)


def test_hdc_constant_map_normalized_kernels():
    h = HDCRefine(2).double()
    with torch.no_grad():
        for conv in h.convs:
            conv.weight.fill_(1.0 / (9 * 2))
            conv.bias.zero_()
    x = torch.full((1, 2, 40, 40), 1.5, dtype=D)
    out = h.branch(x)
    assert torch.allclose(out[..., 8:-8, 8:-8], torch.full_like(out[..., 8:-8, 8:-8], 1.5))


def test_resblock_zero_branch_identity_and_gradient():
    blk = nn_zero(ResBlock(4))
    x = torch.randn(1, 4, 4, 4)
    assert torch.equal(blk(x), x)
    r = ResBlock(2).double()
    err = max_rel_error(lambda x: r(x).square().sum(), [torch.randn(1, 2, 3, 3, dtype=D, generator=gen(7))])
    assert err < 1e-3


def nn_zero(m):
    with torch.no_grad():
        m.conv2.weight.zero_()
        m.conv2.bias.zero_()
    return m


def test_rgb_head_and_decoder_shapes():
    dec = InpDecoder([8, 16, 32, 64])
    P4 = torch.randn(2, 64, 2, 2)
    S = [torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8), torch.randn(2, 32, 4, 4), None]
    logits = [torch.randn(2, 1, 16 >> i, 16 >> i) for i in range(3)]
    I, rgb, masks = dec(P4, S, logits)
    assert [tuple(x.shape) for x in I] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    assert [tuple(x.shape) for x in rgb] == [(2, 3, 16, 16), (2, 3, 8, 8), (2, 3, 4, 4)]
    assert all(m.dtype == torch.bool for m in masks)
    head = dec.rgb_heads[0]
    ref = torch.einsum("oc,bchw->bohw", head.weight[:, :, 0, 0], I[0]) + head.bias[None, :, None, None]
    assert torch.allclose(rgb[0], ref, atol=1e-6)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    assert torch.count_nonzero(head(I[0])) == 0


def test_decoder_background_logits_pass_skip_through():
    dec = InpDecoder([4, 8, 16, 32]).double()
    for h in dec.hdc:
        with torch.no_grad():
            for p in h.parameters():
                p.zero_()
    S = [torch.randn(1, 4, 8, 8, dtype=D), torch.randn(1, 8, 4, 4, dtype=D), torch.randn(1, 16, 2, 2, dtype=D), None]
    logits = [torch.full((1, 1, 8 >> i, 8 >> i), -5.0, dtype=D) for i in range(3)]
    I, _, _ = dec(torch.randn(1, 32, 1, 1, dtype=D), S, logits)
    for i in range(3):
        assert torch.equal(I[i], S[i])
