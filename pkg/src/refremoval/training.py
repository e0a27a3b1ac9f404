"""Training loop, checkpoints, evaluation and single-image removal."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import evalkit
from .config import TrainConfig, from_dict
from .dataforge import load_dataset, template_corpus
from .encoder import pooled_features
from .losses import (
    PatchDiscriminator,
    discriminator_loss,
    generator_adv_loss,
    make_report,
    rec_loss_terms,
    seg_loss_terms,
    total_loss,
)
from .model import ModelConfig, RemovalNet, TextBatch
from .textproc import TaggerParams, Vocabulary, normalize, tag_roles, tokenize, train_tagger

log = logging.getLogger(__name__)

_MIRROR = {"left": "right", "right": "left"}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Trainer:
    cfg: TrainConfig
    vocab: Vocabulary
    tagger: TaggerParams
    model: RemovalNet
    disc: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    sched: torch.optim.lr_scheduler.LRScheduler
    data_gen: torch.Generator
    step: int = 0

    _tag_cache: dict | None = None

    def tags_for(self, tokens: Sequence[str]) -> list[str]:
        if self._tag_cache is None:
            self._tag_cache = {}
        key = tuple(tokens)
        if key not in self._tag_cache:
            self._tag_cache[key] = tag_roles(tokenize(" ".join(tokens), self.tagger.vocab), self.tagger)
        return self._tag_cache[key]

    def text_batch(self, token_lists: Sequence[Sequence[str]]) -> TextBatch:
        ids = [[self.vocab.lookup(t) for t in toks] for toks in token_lists]
        return TextBatch.build(ids, [self.tags_for(t) for t in token_lists])


def build_vocab(cfg: TrainConfig, pairs: list[dict]) -> tuple[Vocabulary, list]:
    corpus = template_corpus(cfg.tagger_corpus, seed=cfg.seed)
    tokens = {t for toks, _ in corpus for t in toks}
    for p in pairs:
        for toks, _ in p["expressions"]:
            tokens.update(toks)
    return Vocabulary(tokens), corpus


def build_trainer(cfg: TrainConfig, pairs: list[dict], steps_per_epoch: int = 1) -> Trainer:
    torch.manual_seed(cfg.seed)
    vocab, corpus = build_vocab(cfg, pairs)
    tagger = train_tagger(corpus, vocab, epochs=cfg.tagger_epochs, seed=cfg.seed)
    torch.manual_seed(cfg.seed + 1)
    model = RemovalNet(ModelConfig(len(vocab), cfg.text_dim, cfg.encoder, cfg.fill_patch, cfg.threshold))
    disc = PatchDiscriminator(3, cfg.disc_width, cfg.disc_receptive_field)
    o = cfg.optim
    opt_g = torch.optim.AdamW(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=o.disc_lr, betas=tuple(o.disc_betas),
                              weight_decay=o.weight_decay)
    per_step = o.lr_decay ** (1.0 / max(steps_per_epoch, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=per_step)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    return Trainer(cfg, vocab, tagger, model, disc, opt_g, opt_d, sched, gen)


# ---------------------------------------------------------------------------
# data


def stack_pairs(pairs: list[dict]):
    comp = torch.from_numpy(np.stack([p["composite"] for p in pairs])).permute(0, 3, 1, 2).float()
    gt = torch.from_numpy(np.stack([p["gt"] for p in pairs])).permute(0, 3, 1, 2).float()
    mask = torch.from_numpy(np.stack([p["mask"] for p in pairs]))[:, None].float()
    return comp, gt, mask


def augment(comp, gt, mask, tokens, pad: int, gen: torch.Generator):
    """Random pad-and-crop plus horizontal flip; flips swap left/right words."""
    B, _, H, W = comp.shape
    tokens = [list(t) for t in tokens]
    if pad > 0:
        stacked = torch.cat([comp, gt, mask], 1)
        padded = F.pad(stacked, (pad,) * 4, mode="replicate")
        offs = torch.randint(0, 2 * pad + 1, (B, 2), generator=gen)
        crops = [padded[b, :, oy : oy + H, ox : ox + W] for b, (oy, ox) in enumerate(offs.tolist())]
        stacked = torch.stack(crops)
        comp, gt, mask = stacked[:, :3], stacked[:, 3:6], stacked[:, 6:]
    flip = torch.rand(B, generator=gen) < 0.5
    if flip.any():
        comp = torch.where(flip[:, None, None, None], comp.flip(-1), comp)
        gt = torch.where(flip[:, None, None, None], gt.flip(-1), gt)
        mask = torch.where(flip[:, None, None, None], mask.flip(-1), mask)
        for b in torch.nonzero(flip).flatten().tolist():
            tokens[b] = [_MIRROR.get(t, t) for t in tokens[b]]
    return comp, gt, mask, tokens


def sample_batch(tr: Trainer, data, exprs: list[list[list[str]]]):
    comp, gt, mask = data
    n = comp.shape[0]
    idx = torch.randint(0, n, (min(tr.cfg.batch_size, n),), generator=tr.data_gen) if n > tr.cfg.batch_size \
        else torch.randperm(n, generator=tr.data_gen)
    tokens = []
    for i in idx.tolist():
        j = int(torch.randint(0, len(exprs[i]), (1,), generator=tr.data_gen))
        tokens.append(exprs[i][j])
    c, g, m = comp[idx], gt[idx], mask[idx]
    if tr.cfg.augment:
        c, g, m, tokens = augment(c, g, m, tokens, tr.cfg.crop_pad, tr.data_gen)
    return c, g, m, tokens


# ---------------------------------------------------------------------------
# steps


def _param_norm(model) -> float:
    return float(torch.sqrt(sum((p.detach() ** 2).sum() for p in model.parameters())))


def train_step(tr: Trainer, comp, gt, mask, tokens):
    cfg = tr.cfg
    tr.model.train()
    text = tr.text_batch(tokens)
    out = tr.model(comp, text)
    seg_terms = seg_loss_terms(out.mask_logits, mask)
    rec_terms = rec_loss_terms(out.rgb, gt)
    for p in tr.disc.parameters():
        p.requires_grad_(False)
    adv = generator_adv_loss(tr.disc, out.image)
    for p in tr.disc.parameters():
        p.requires_grad_(True)
    seg, rec = torch.stack(seg_terms).sum(), torch.stack(rec_terms).sum()
    loss = total_loss(seg, rec, adv, cfg.losses)
    for name, val in (("seg", seg), ("rec", rec), ("adv", adv), ("total", loss)):
        if not torch.isfinite(val):
            raise TrainingDiverged(
                f"non-finite {name} loss at step {tr.step}; parameter norm {_param_norm(tr.model):.4g}"
            )
    tr.opt_g.zero_grad(set_to_none=True)
    loss.backward()
    tr.opt_g.step()
    tr.sched.step()

    d_loss = discriminator_loss(tr.disc, out.image.detach(), gt)
    tr.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    tr.opt_d.step()

    tr.step += 1
    pixels = mask.shape[-1] * mask.shape[-2]
    report = make_report(seg_terms, rec_terms, adv.detach(), cfg.losses, pixels, disc=float(d_loss.detach()))
    return report


def train(cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path | None = None,
          split: str = "train", pairs: list[dict] | None = None, max_steps: int | None = None) -> Trainer:
    """Train on ``split`` of the dataset at ``data_dir``; logs and checkpoints go to ``out_dir``."""
    if pairs is None:
        pairs = load_dataset(data_dir, split)
    if not pairs:
        raise ValueError(f"no pairs in split {split!r} of {data_dir}")
    steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    tr = build_trainer(cfg, pairs, steps_per_epoch)
    data = stack_pairs(pairs)
    exprs = [[toks for toks, _ in p["expressions"]] for p in pairs]
    total = cfg.steps if cfg.epochs is None else cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train_log.jsonl", "w")
    tr.history = []
    try:
        while tr.step < total:
            batch = sample_batch(tr, data, exprs)
            report = train_step(tr, *batch)
            tr.history.append(report)
            if logf is not None and tr.step % cfg.log_every == 0:
                logf.write(json.dumps({"step": tr.step, "lr": tr.sched.get_last_lr()[0], **report.to_dict()}) + "\n")
            if out is not None and cfg.checkpoint_every and tr.step % cfg.checkpoint_every == 0:
                save_checkpoint(tr, out / f"ckpt_{tr.step:06d}.pt")
    finally:
        if logf is not None:
            logf.close()
    if out is not None:
        save_checkpoint(tr, out / "final.pt")
    return tr


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(tr: Trainer, path: str | Path) -> None:
    torch.save({
        "model": tr.model.state_dict(),
        "disc": tr.disc.state_dict(),
        "opt_g": tr.opt_g.state_dict(),
        "opt_d": tr.opt_d.state_dict(),
        "sched": tr.sched.state_dict(),
        "step": tr.step,
        "config": tr.cfg.to_dict(),
        "config_hash": tr.cfg.digest(),
        "rng": torch.get_rng_state(),
        "data_rng": tr.data_gen.get_state(),
        "vocab": tr.vocab.itos[2:],
        "tagger": tr.tagger.state(),
    }, path)


def load_checkpoint(path: str | Path) -> Trainer:
    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_dict(state["config"])
    if cfg.digest() != state["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    vocab = Vocabulary(state["vocab"])
    tagger = TaggerParams.from_state(state["tagger"])
    model = RemovalNet(ModelConfig(len(vocab), cfg.text_dim, cfg.encoder, cfg.fill_patch, cfg.threshold))
    model.load_state_dict(state["model"])
    disc = PatchDiscriminator(3, cfg.disc_width, cfg.disc_receptive_field)
    disc.load_state_dict(state["disc"])
    o = cfg.optim
    opt_g = torch.optim.AdamW(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=o.disc_lr, betas=tuple(o.disc_betas),
                              weight_decay=o.weight_decay)
    opt_g.load_state_dict(state["opt_g"])
    opt_d.load_state_dict(state["opt_d"])
    sched = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=1.0)
    sched.load_state_dict(state["sched"])
    gen = torch.Generator()
    gen.set_state(state["data_rng"])
    torch.set_rng_state(state["rng"])
    model.eval()
    return Trainer(cfg, vocab, tagger, model, disc, opt_g, opt_d, sched, gen, state["step"])


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(tr: Trainer, images: torch.Tensor, token_lists: Sequence[Sequence[str]]):
    tr.model.eval()
    with torch.no_grad():
        return tr.model(images, tr.text_batch(token_lists))


def _to_hwc(x: torch.Tensor) -> np.ndarray:
    return x.clamp(0, 1).permute(1, 2, 0).numpy().astype(np.float64)


def evaluate(tr: Trainer, data_dir: str | Path | None = None, split: str = "test",
             pairs: list[dict] | None = None, batch: int = 8, timing_runs: int = 20) -> evalkit.MetricReport:
    """Aggregate metrics over ``split``; each pair is queried with its first expression."""
    if pairs is None:
        pairs = load_dataset(data_dir, split)
    comp, gt, mask = stack_pairs(pairs)
    tokens = [p["expressions"][0][0] for p in pairs]
    outs, masks = [], []
    for i in range(0, len(pairs), batch):
        o = predict(tr, comp[i : i + batch], tokens[i : i + batch])
        outs.append(o.image)
        masks.append(torch.sigmoid(o.mask_full) > tr.cfg.threshold)
    pred = torch.cat(outs)
    pmask = torch.cat(masks)

    ps, ps_hole, base_hole, ss, ious = [], [], [], [], []
    for k in range(len(pairs)):
        a, b = _to_hwc(pred[k]), _to_hwc(gt[k])
        hole = mask[k, 0].numpy() > 0.5
        ps.append(evalkit.psnr(a, b))
        ps_hole.append(evalkit.psnr(a, b, mask=hole))
        base_hole.append(evalkit.psnr(_to_hwc(comp[k]), b, mask=hole))
        ss.append(evalkit.ssim(a, b))
        ious.append(evalkit.iou(pmask[k, 0].numpy(), hole))

    feat = lambda imgs: pooled_features(tr.model.encoder, imgs.clamp(0, 1)).numpy()  # noqa: E731
    fid = evalkit.fid_proxy(pred, gt, feat) if len(pairs) > 1 else float("nan")
    overhead = evalkit.overhead_report(tr.model, comp[:1], tr.text_batch(tokens[:1]), runs=timing_runs)
    report = evalkit.MetricReport(
        psnr=float(np.mean(ps)), psnr_hole=float(np.mean(ps_hole)), ssim=float(np.mean(ss)),
        iou=float(np.mean(ious)), pr_at_k={str(k): evalkit.pr_at_k(ious, k) for k in (0.5, 0.7, 0.9)},
        fid_proxy=fid, param_count=overhead["params"], flops_estimate=overhead["flops"],
        fps=overhead["fps"], baseline_psnr_hole=float(np.mean(base_hole)),
        head_importance=tr.model.head_importance(),
    )
    report.per_pair = [
        {"pair_id": p["pair_id"], "psnr": a, "psnr_hole": h, "ssim": s, "iou": u}
        for p, a, h, s, u in zip(pairs, ps, ps_hole, ss, ious)
    ]
    return report


def write_report(report: evalkit.MetricReport, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    rows = getattr(report, "per_pair", [])
    if rows:
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def load_image(path: str | Path, size: int) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)


def remove(tr: Trainer, image: torch.Tensor, expression: str) -> dict:
    """Run removal on one image (3 x H x W in [0, 1])."""
    tokens = normalize(expression)
    if not tokens:
        raise ValueError("empty expression")
    out = predict(tr, image[None], [tokens])
    prob = torch.sigmoid(out.mask_full[0, 0])
    return {
        "image": out.image[0].clamp(0, 1),
        "mask": prob > tr.cfg.threshold,
        "max_prob": float(prob.max()),
        "low_confidence": bool(prob.max() <= tr.cfg.threshold),
        "tags": tr.tags_for(tokens),
    }


def remove_to_files(ckpt: str | Path, image_path: str | Path, expression: str, out_dir: str | Path) -> dict:
    tr = load_checkpoint(ckpt)
    img = load_image(image_path, tr.cfg.encoder.image_size)
    res = remove(tr, img, expression)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray((res["mask"].numpy() * 255).astype(np.uint8)).save(out / "mask.png")
    rgb = (res["image"].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(rgb).save(out / "output.png")
    info = {k: res[k] for k in ("max_prob", "low_confidence", "tags")}
    (out / "removal.json").write_text(json.dumps(info, indent=2))
    return info
