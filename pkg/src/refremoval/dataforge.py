"""Procedural composite/background pair generator.

Each pair is built in three steps: pick background candidates from the
target's cluster by lowest token overlap (Jaccard), place the sprite by
rejection sampling under a size-class quota, then harmonize the pasted
pixels against a ring of surrounding background. Expressions are produced
from slot templates after placement so spatial words match the final layout,
and every token carries its IW/AW/O role.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

log = logging.getLogger(__name__)

# 17 clusters over the 80 COCO categories
CLUSTER_NAMES = (
    "person", "traffic_p", "airplane", "train", "boat", "municipal engineering",
    "animal", "belongings", "sport_p", "snow sports", "surfboard", "tableware",
    "natural foods", "processed foods", "large furniture", "middle furniture",
    "miniature furniture",
)
COCO_CLUSTERS = {
    0: ["person"],
    1: ["bicycle", "car", "motorcycle", "bus", "truck"],
    2: ["airplane"],
    3: ["train"],
    4: ["boat"],
    5: ["traffic light", "fire hydrant", "stop sign", "parking meter", "bench"],
    6: ["bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"],
    7: ["backpack", "umbrella", "handbag", "tie", "suitcase"],
    8: ["frisbee", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard",
        "tennis racket"],
    9: ["skis", "snowboard"],
    10: ["surfboard"],
    11: ["bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl"],
    12: ["banana", "apple", "sandwich", "orange", "broccoli", "carrot"],
    13: ["hot dog", "pizza", "donut", "cake"],
    14: ["chair", "couch", "bed", "dining table", "toilet", "refrigerator"],
    15: ["tv", "microwave", "oven", "toaster", "sink"],
    16: ["potted plant", "laptop", "mouse", "remote", "keyboard", "cell phone", "book", "clock",
         "vase", "scissors", "teddy bear", "hair drier", "toothbrush"],
}

# Toy categories drawn procedurally. Geometric shapes ride along with the
# ball-like sport items and the small-object cluster.
TOY_CLUSTERS = {
    "circle": 8, "ring": 8, "kite": 8,
    "square": 16, "triangle": 16, "star": 16, "clock": 16,
    "car": 1, "bus": 1, "truck": 1,
    "train": 3, "boat": 4, "cat": 6, "umbrella": 7,
    "apple": 12, "donut": 13, "pizza": 13,
    "chair": 14, "tv": 15,
}
CATEGORIES = tuple(sorted(TOY_CLUSTERS))

COLORS = {
    "red": (215, 40, 40), "green": (40, 165, 60), "blue": (40, 80, 215),
    "yellow": (230, 205, 40), "purple": (135, 55, 175), "orange": (240, 135, 30),
    "pink": (240, 120, 180), "cyan": (40, 195, 205),
}
TEXTURES = ("plain", "striped", "dotted")
SIZE_CLASSES = ("small", "medium", "large")
SIZE_TARGETS = {"small": 0.11, "medium": 0.53, "large": 0.36}
SPLIT_RATIOS = {"train": 0.85, "val": 0.075, "test": 0.075}

FULL_SCALE_CANVAS = 480


def cluster_of(category: str) -> int:
    if category in TOY_CLUSTERS:
        return TOY_CLUSTERS[category]
    for cid, cats in COCO_CLUSTERS.items():
        if category in cats:
            return cid
    raise KeyError(category)


# ---------------------------------------------------------------------------
# sprites


def _draw_shape(draw: ImageDraw.ImageDraw, category: str, S: int) -> None:
    """Draw ``category`` in white on an S x S alpha canvas."""
    f = lambda *v: [int(round(c * S)) for c in v]  # noqa: E731
    W = 255
    if category in ("circle", "apple", "clock"):
        draw.ellipse(f(0.05, 0.1, 0.95, 1.0), fill=W)
        if category == "apple":
            draw.rectangle(f(0.45, 0.0, 0.55, 0.15), fill=W)
        if category == "clock":
            draw.rectangle(f(0.4, 0.0, 0.6, 0.12), fill=W)
    elif category in ("ring", "donut"):
        draw.ellipse(f(0.0, 0.0, 1.0, 1.0), fill=W)
        inner = 0.34 if category == "ring" else 0.38
        draw.ellipse(f(inner, inner, 1 - inner, 1 - inner), fill=0)
    elif category == "square":
        draw.rectangle(f(0.08, 0.08, 0.92, 0.92), fill=W)
    elif category == "triangle":
        draw.polygon([tuple(f(0.5, 0.02)), tuple(f(0.98, 0.95)), tuple(f(0.02, 0.95))], fill=W)
    elif category == "star":
        pts = []
        for k in range(10):
            r = 0.5 if k % 2 == 0 else 0.22
            a = -math.pi / 2 + k * math.pi / 5
            pts.append((S * (0.5 + r * math.cos(a)), S * (0.52 + r * math.sin(a))))
        draw.polygon(pts, fill=W)
    elif category == "kite":
        draw.polygon([tuple(f(0.5, 0.0)), tuple(f(0.85, 0.4)), tuple(f(0.5, 0.8)),
                      tuple(f(0.15, 0.4))], fill=W)
        draw.line(f(0.5, 0.8, 0.6, 1.0), fill=W, width=max(1, S // 12))
    elif category in ("car", "truck", "bus"):
        top = {"car": 0.25, "truck": 0.2, "bus": 0.15}[category]
        draw.rectangle(f(0.0, 0.45, 1.0, 0.8), fill=W)
        if category == "car":
            draw.rectangle(f(0.2, top, 0.75, 0.45), fill=W)
        elif category == "truck":
            draw.rectangle(f(0.6, top, 0.95, 0.45), fill=W)
        else:
            draw.rectangle(f(0.0, top, 1.0, 0.45), fill=W)
        for cx in (0.22, 0.78):
            draw.ellipse(f(cx - 0.12, 0.68, cx + 0.12, 0.92), fill=W)
    elif category == "train":
        draw.polygon([tuple(f(0.0, 0.2)), tuple(f(0.75, 0.2)), tuple(f(1.0, 0.5)),
                      tuple(f(1.0, 0.8)), tuple(f(0.0, 0.8))], fill=W)
        for cx in (0.15, 0.45, 0.75):
            draw.ellipse(f(cx - 0.08, 0.75, cx + 0.08, 0.9), fill=W)
    elif category == "boat":
        draw.polygon([tuple(f(0.0, 0.65)), tuple(f(1.0, 0.65)), tuple(f(0.8, 0.9)),
                      tuple(f(0.2, 0.9))], fill=W)
        draw.polygon([tuple(f(0.5, 0.05)), tuple(f(0.5, 0.6)), tuple(f(0.85, 0.6))], fill=W)
    elif category == "cat":
        draw.ellipse(f(0.1, 0.25, 0.9, 0.95), fill=W)
        draw.polygon([tuple(f(0.12, 0.45)), tuple(f(0.18, 0.05)), tuple(f(0.45, 0.3))], fill=W)
        draw.polygon([tuple(f(0.88, 0.45)), tuple(f(0.82, 0.05)), tuple(f(0.55, 0.3))], fill=W)
    elif category == "umbrella":
        draw.pieslice(f(0.0, 0.05, 1.0, 0.95), 180, 360, fill=W)
        draw.rectangle(f(0.46, 0.5, 0.54, 0.95), fill=W)
    elif category == "pizza":
        draw.pieslice(f(-0.5, 0.0, 1.0, 1.5), 270, 330, fill=W)
        draw.pieslice(f(0.0, 0.0, 1.0, 1.0), 300, 240 + 360, fill=W)
    elif category == "chair":
        draw.rectangle(f(0.15, 0.0, 0.3, 0.95), fill=W)
        draw.rectangle(f(0.15, 0.5, 0.85, 0.62), fill=W)
        draw.rectangle(f(0.75, 0.5, 0.85, 0.95), fill=W)
    elif category == "tv":
        draw.rectangle(f(0.0, 0.05, 1.0, 0.75), fill=W)
        draw.rectangle(f(0.42, 0.75, 0.58, 0.9), fill=W)
        draw.rectangle(f(0.25, 0.88, 0.75, 0.98), fill=W)
    else:
        raise ValueError(f"no sprite for category {category!r}")


@dataclass(frozen=True)
class ObjectSpec:
    """A foreground object: appearance slots plus sprite geometry."""

    category: str
    color: str
    texture: str = "plain"

    @property
    def appearance_tokens(self) -> frozenset[str]:
        toks = {self.category, self.color}
        if self.texture != "plain":
            toks.add(self.texture)
        return frozenset(toks)

    def sprite(self, side: int) -> np.ndarray:
        """RGBA uint8 sprite of ``side`` x ``side``; alpha is exactly 0 or 255."""
        ss = 4
        canvas = Image.new("L", (side * ss, side * ss), 0)
        _draw_shape(ImageDraw.Draw(canvas), self.category, side * ss)
        cover = np.asarray(canvas, dtype=np.float64).reshape(side, ss, side, ss).mean(axis=(1, 3))
        alpha = np.where(cover >= 128, 255, 0).astype(np.uint8)

        rgb = np.empty((side, side, 3), dtype=np.float64)
        rgb[:] = COLORS[self.color]
        yy, xx = np.mgrid[0:side, 0:side]
        if self.texture == "striped":
            rgb[((xx + yy) // 2) % 2 == 1] *= 0.55
        elif self.texture == "dotted":
            rgb[(xx % 3 == 1) & (yy % 3 == 1)] = 245.0
        # mild top-down shading
        rgb *= (1.05 - 0.15 * yy / max(side - 1, 1))[..., None]
        out = np.dstack([np.clip(rgb, 0, 255).round().astype(np.uint8), alpha])
        return out


_FILL_CACHE: dict[str, float] = {}


def fill_ratio(category: str) -> float:
    if category not in _FILL_CACHE:
        a = ObjectSpec(category, "red").sprite(64)[..., 3]
        _FILL_CACHE[category] = float((a > 0).mean())
    return _FILL_CACHE[category]


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneObject:
    spec: ObjectSpec
    mask: np.ndarray  # bool H x W

    @property
    def centroid(self) -> tuple[float, float]:
        ys, xs = np.nonzero(self.mask)
        return float(xs.mean()), float(ys.mean())


@dataclass
class Scene:
    scene_id: int
    cluster: int
    image: np.ndarray  # uint8 H x W x 3
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def occupancy(self) -> np.ndarray:
        occ = np.zeros(self.image.shape[:2], dtype=bool)
        for obj in self.objects:
            occ |= obj.mask
        return occ


def jaccard(a: set | frozenset, b: set | frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def scene_similarity(obj: ObjectSpec, scene: Scene) -> float:
    return max((jaccard(obj.appearance_tokens, o.spec.appearance_tokens) for o in scene.objects),
               default=0.0)


def match_scenes(obj: ObjectSpec, pool: Sequence[Scene], k: int = 5) -> list[Scene]:
    """The ``k`` scenes least similar to ``obj`` (ties by scene id)."""
    if len(pool) < k:
        log.warning("scene pool has %d scenes, fewer than k=%d", len(pool), k)
    ranked = sorted(pool, key=lambda s: (scene_similarity(obj, s), s.scene_id))
    return ranked[:k]


def random_background(size: int, rng: np.random.Generator) -> np.ndarray:
    top = rng.uniform(60, 200, 3)
    bottom = rng.uniform(60, 200, 3)
    t = np.linspace(0.0, 1.0, size)[:, None, None]
    img = np.broadcast_to(top * (1 - t) + bottom * t, (size, size, 3)).copy()
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(2):
        cx, cy = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.2, 0.45) * size
        amp = rng.uniform(-40, 40, 3)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))[..., None]
    img += rng.normal(0, 2.0, img.shape)
    return np.clip(img, 0, 255).round().astype(np.uint8)


def random_object(category: str, rng: np.random.Generator) -> ObjectSpec:
    return ObjectSpec(category, str(rng.choice(list(COLORS))), str(rng.choice(TEXTURES)))


def paste(image: np.ndarray, sprite: np.ndarray, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Hard-alpha paste; returns (new image, mask)."""
    out = image.copy()
    h, w = sprite.shape[:2]
    mask = np.zeros(image.shape[:2], dtype=bool)
    mask[y : y + h, x : x + w] = sprite[..., 3] > 0
    region = out[y : y + h, x : x + w]
    sel = sprite[..., 3] > 0
    region[sel] = sprite[..., :3][sel]
    return out, mask


# ---------------------------------------------------------------------------
# size classes and placement


def size_thresholds(canvas: int) -> tuple[float, float]:
    scale = (canvas / FULL_SCALE_CANVAS) ** 2
    return 32**2 * scale, 96**2 * scale


def size_class(mask: np.ndarray, canvas: int | None = None) -> str:
    area = int(np.count_nonzero(mask))
    canvas = mask.shape[0] if canvas is None else canvas
    return size_class_of_area(area, canvas)


def size_class_of_area(area: float, canvas: int = FULL_SCALE_CANVAS) -> str:
    small, medium = size_thresholds(canvas)
    if area < small:
        return "small"
    if area <= medium:
        return "medium"
    return "large"


def area_range(cls: str, canvas: int) -> tuple[float, float]:
    small, medium = size_thresholds(canvas)
    lo_small = 6.0
    hi_large = 0.22 * canvas * canvas
    if small <= lo_small or hi_large <= medium * 1.1:
        raise ValueError(
            f"size quota infeasible on a {canvas}px canvas: small objects need area < {small:.1f}px, "
            f"large objects need area in ({medium:.1f}, {hi_large:.1f}]"
        )
    return {"small": (lo_small, small - 0.5), "medium": (small, medium),
            "large": (medium + 1, hi_large)}[cls]


class SizeQuota:
    """Deterministic scheduler that keeps class tallies closest to targets."""

    def __init__(self, targets: dict[str, float] | None = None):
        self.targets = dict(SIZE_TARGETS if targets is None else targets)
        self.counts = {c: 0 for c in self.targets}

    def next_class(self) -> str:
        n = sum(self.counts.values()) + 1
        cls = max(self.targets, key=lambda c: (self.targets[c] * n - self.counts[c], -SIZE_CLASSES.index(c)))
        self.counts[cls] += 1
        return cls


@dataclass
class Placement:
    x: int
    y: int
    side: int
    sprite: np.ndarray

    @property
    def scale(self) -> int:
        return self.side


def place_object(
    fg: ObjectSpec,
    scene: Scene,
    size_cls: str,
    rng: np.random.Generator,
    margin: int = 2,
    attempts: int = 100,
) -> Placement | None:
    """Rejection-sample a scale in ``size_cls`` and a free position."""
    canvas = scene.size
    lo, hi = area_range(size_cls, canvas)
    occ = scene.occupancy()
    ratio = fill_ratio(fg.category)
    sprites: dict[int, np.ndarray] = {}
    for _ in range(attempts):
        area = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        side = max(2, int(round(math.sqrt(area / ratio))))
        if side + 2 * margin > canvas:
            continue
        if side not in sprites:
            sprites[side] = fg.sprite(side)
        sprite = sprites[side]
        alpha = sprite[..., 3] > 0
        if size_class_of_area(int(alpha.sum()), canvas) != size_cls:
            continue
        x = int(rng.integers(margin, canvas - side - margin + 1))
        y = int(rng.integers(margin, canvas - side - margin + 1))
        if np.any(occ[y : y + side, x : x + side] & alpha):
            continue
        return Placement(x, y, side, sprite)
    return None


# ---------------------------------------------------------------------------
# harmonization


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])


def harmonize(composite: np.ndarray, mask: np.ndarray, ring_px: int = 4, strength: float = 1.0) -> np.ndarray:
    """Match foreground luminance mean/std to a ring of surrounding pixels.

    ``composite`` is float RGB in [0, 1]. Only masked pixels change; the
    luminance shift is added equally to the three channels.
    """
    mask = mask.astype(bool)
    out = composite.copy()
    if not mask.any():
        return out
    ring = ndimage.binary_dilation(mask, np.ones((3, 3), bool), iterations=ring_px) & ~mask
    if not ring.any():
        return out
    lum = luminance(composite)
    fg, bg = lum[mask], lum[ring]
    mu_f, sd_f = fg.mean(), fg.std()
    mu_r, sd_r = bg.mean(), bg.std()
    gain = sd_r / sd_f if sd_f > 1e-6 else 1.0
    target = mu_r + (fg - mu_f) * gain
    shift = strength * (target - fg)
    out[mask] = np.clip(composite[mask] + shift[:, None], 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# expressions

Expression = list[tuple[str, str]]  # (token, BIO role)


def position_words(obj: SceneObject, canvas: int) -> tuple[str | None, str | None]:
    cx, cy = obj.centroid
    h = "left" if cx < canvas / 3 else "right" if cx >= 2 * canvas / 3 else None
    v = "top" if cy < canvas / 3 else "bottom" if cy >= 2 * canvas / 3 else None
    return h, v


def nearest_neighbor(obj: SceneObject, others: Sequence[SceneObject]) -> SceneObject | None:
    if not others:
        return None
    cx, cy = obj.centroid
    return min(others, key=lambda o: (o.centroid[0] - cx) ** 2 + (o.centroid[1] - cy) ** 2)


def object_attributes(obj: SceneObject, scene_objects: Sequence[SceneObject], canvas: int) -> set[str]:
    attrs = set(obj.spec.appearance_tokens)
    attrs.update(w for w in position_words(obj, canvas) if w)
    nn_ = nearest_neighbor(obj, [o for o in scene_objects if o is not obj])
    if nn_ is not None:
        attrs.add("near:" + nn_.spec.category)
    return attrs


def expression_attributes(expr: Expression) -> set[str]:
    attrs = set()
    toks = [t for t, _ in expr]
    for i, (tok, role) in enumerate(expr):
        if role == "O":
            continue
        if i >= 2 and toks[i - 2] == "near" and role == "B-AW":
            attrs.add("near:" + tok)
        else:
            attrs.add(tok)
    return attrs


def matches(expr: Expression, obj: SceneObject, scene_objects, canvas: int) -> bool:
    return expression_attributes(expr) <= object_attributes(obj, scene_objects, canvas)


def is_unique(expr: Expression, target: SceneObject, scene_objects, canvas: int) -> bool:
    hits = [o for o in scene_objects if matches(expr, o, scene_objects, canvas)]
    return hits == [target]


def _candidate_expressions(obj: SceneObject, scene_objects, canvas: int) -> list[Expression]:
    spec = obj.spec
    h, v = position_words(obj, canvas)
    cat = [(spec.category, "B-IW")]
    color = [(spec.color, "B-AW")]
    tex = [(spec.texture, "B-AW")] if spec.texture != "plain" else []
    the = [("the", "O")]
    out: list[Expression] = [
        the + cat,
        the + color + cat,
    ]
    if tex:
        out.append(the + tex + color + cat)
    if h:
        out.append(the + color + cat + [("on", "O"), ("the", "O"), (h, "B-AW")])
    if v:
        out.append(the + cat + [("at", "O"), ("the", "O"), (v, "B-AW")])
    if h and v:
        out.append(the + color + cat + [("in", "O"), ("the", "O"), (v, "B-AW"), (h, "I-AW")])
    nn_ = nearest_neighbor(obj, [o for o in scene_objects if o is not obj])
    if nn_ is not None:
        out.append(the + color + tex + cat + [("near", "O"), ("the", "O"), (nn_.spec.category, "B-AW")])
    if tex and (h or v):
        pos = [(w, "B-AW") for w in (v, h) if w]
        if len(pos) == 2:
            pos[1] = (pos[1][0], "I-AW")
        out.append(the + tex + color + cat + [("in", "O"), ("the", "O")] + pos)
    return out


def describe(obj: SceneObject, scene_objects: Sequence[SceneObject], canvas: int,
             rng: np.random.Generator | None = None, max_expressions: int = 3) -> list[Expression]:
    """Unique referring expressions for ``obj`` among ``scene_objects``."""
    cands = [e for e in _candidate_expressions(obj, scene_objects, canvas)
             if is_unique(e, obj, scene_objects, canvas)]
    if rng is not None and cands:
        verbs = [[], [("remove", "O")], [("erase", "O")], [("delete", "O")]]
        cands = [verbs[int(rng.integers(len(verbs)))] + e for e in cands]
    return cands[:max_expressions]


# ---------------------------------------------------------------------------
# tagger training corpus

_MOTION = ("approaching", "parked", "moving", "leaving")
_VEHICLES = ("car", "bus", "truck", "train", "boat")


def template_expression(rng: np.random.Generator) -> Expression:
    """One random templated expression with gold roles."""
    cat = str(rng.choice(CATEGORIES))
    color = str(rng.choice(list(COLORS)))
    tex = str(rng.choice(["striped", "dotted"]))
    h = str(rng.choice(["left", "right"]))
    v = str(rng.choice(["top", "bottom"]))
    other = str(rng.choice(CATEGORIES))
    verb = [[], [("remove", "O")], [("erase", "O")], [("delete", "O")],
            [("please", "O"), ("remove", "O")]][int(rng.integers(5))]
    the = [("the", "O")]
    C, K = [(cat, "B-IW")], [(color, "B-AW")]
    templates = [
        the + C,
        the + K + C,
        the + [(tex, "B-AW")] + K + C,
        the + K + C + [("on", "O"), ("the", "O"), (h, "B-AW")],
        the + C + [("at", "O"), ("the", "O"), (v, "B-AW")],
        the + K + C + [("in", "O"), ("the", "O"), (v, "B-AW"), (h, "I-AW")],
        the + K + C + [("near", "O"), ("the", "O"), (other, "B-AW")],
        C + [("on", "O"), ("the", "O"), (h, "B-AW")],
        the + C + [("with", "O"), (tex, "B-AW"), ("pattern", "O")],
    ]
    if cat in _VEHICLES:
        m = str(rng.choice(_MOTION))
        templates += [
            C + [(m, "B-AW"), ("with", "O"), ("headlight", "B-AW"), ("on", "I-AW")],
            the + K + C + [(m, "B-AW")],
            the + [(m, "B-AW")] + C + [("on", "O"), ("the", "O"), (h, "B-AW")],
        ]
    return verb + templates[int(rng.integers(len(templates)))]


def template_corpus(n: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        e = template_expression(rng)
        out.append(([t for t, _ in e], [r for _, r in e]))
    return out


# ---------------------------------------------------------------------------
# pairs and datasets


@dataclass
class ScenePair:
    pair_id: int
    composite: np.ndarray  # uint8 H x W x 3
    background: np.ndarray  # uint8 H x W x 3, ground truth
    mask: np.ndarray  # bool H x W
    expressions: list[Expression]
    size_class: str
    category: str

    def validate(self, scene_objects: Sequence[SceneObject] | None = None) -> None:
        if not self.mask.any():
            raise ValueError(f"pair {self.pair_id}: empty mask")
        if not np.array_equal(self.composite[~self.mask], self.background[~self.mask]):
            raise ValueError(f"pair {self.pair_id}: composite differs from background outside mask")
        if not self.expressions:
            raise ValueError(f"pair {self.pair_id}: no expressions")
        if scene_objects is not None:
            target = next(o for o in scene_objects if np.array_equal(o.mask, self.mask))
            for e in self.expressions:
                if not is_unique(e, target, scene_objects, self.mask.shape[0]):
                    raise ValueError(f"pair {self.pair_id}: ambiguous expression {e}")


@dataclass
class GeneratorConfig:
    canvas: int = 64
    num_pairs: int = 500
    pool_size: int = 8
    candidates: int = 5
    max_scene_objects: int = 2
    harmonize_strength: float = 0.5
    size_targets: dict = field(default_factory=lambda: dict(SIZE_TARGETS))
    split_ratios: dict = field(default_factory=lambda: dict(SPLIT_RATIOS))


def make_scene(scene_id: int, cluster: int, canvas: int, rng: np.random.Generator,
               max_objects: int = 2) -> Scene:
    scene = Scene(scene_id, cluster, random_background(canvas, rng))
    cats = [c for c in CATEGORIES if TOY_CLUSTERS[c] == cluster]
    for _ in range(int(rng.integers(0, max_objects + 1))):
        spec = random_object(str(rng.choice(cats)), rng)
        cls = str(rng.choice(["medium", "large"], p=[0.6, 0.4]))
        pl = place_object(spec, scene, cls, rng, attempts=30)
        if pl is None:
            continue
        scene.image, m = paste(scene.image, pl.sprite, pl.x, pl.y)
        scene.objects.append(SceneObject(spec, m))
    return scene


def generate_pair(pair_id: int, size_cls: str, cfg: GeneratorConfig,
                  rng: np.random.Generator) -> tuple[ScenePair, list[SceneObject]] | None:
    category = str(rng.choice(CATEGORIES))
    spec = random_object(category, rng)
    cluster = cluster_of(category)
    pool = [make_scene(s, cluster, cfg.canvas, rng, cfg.max_scene_objects) for s in range(cfg.pool_size)]
    for scene in match_scenes(spec, pool, cfg.candidates):
        pl = place_object(spec, scene, size_cls, rng)
        if pl is None:
            continue
        raw, mask = paste(scene.image, pl.sprite, pl.x, pl.y)
        target = SceneObject(spec, mask)
        objects = scene.objects + [target]
        exprs = describe(target, objects, cfg.canvas, rng)
        if not exprs:
            continue
        harm = harmonize(raw.astype(np.float64) / 255.0, mask, strength=cfg.harmonize_strength)
        composite = scene.image.copy()
        composite[mask] = np.clip(np.round(harm[mask] * 255.0), 0, 255).astype(np.uint8)
        pair = ScenePair(pair_id, composite, scene.image, mask, exprs,
                         size_class(mask, cfg.canvas), category)
        pair.validate(objects)
        return pair, objects
    return None


def pair_rng(seed: int, pair_id: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, pair_id, attempt]))


def build_pair(pair_id: int, size_cls: str, cfg: GeneratorConfig, seed: int,
               max_attempts: int = 50) -> tuple[ScenePair, list[SceneObject]]:
    """Deterministic pair ``pair_id`` and the objects of its scene (target last)."""
    for attempt in range(max_attempts):
        got = generate_pair(pair_id, size_cls, cfg, pair_rng(seed, pair_id, attempt))
        if got is not None:
            return got
    raise RuntimeError(f"pair {pair_id}: no valid {size_cls} placement after {max_attempts} attempts")


def assign_splits(n: int, ratios: dict, rng: np.random.Generator) -> dict[str, list[int]]:
    n_val = int(round(n * ratios["val"]))
    n_test = int(round(n * ratios["test"]))
    order = rng.permutation(n).tolist()
    return {
        "train": sorted(order[n_val + n_test :]),
        "val": sorted(order[:n_val]),
        "test": sorted(order[n_val : n_val + n_test]),
    }


def size_schedule(cfg: GeneratorConfig) -> list[str]:
    quota = SizeQuota(cfg.size_targets)
    return [quota.next_class() for _ in range(cfg.num_pairs)]


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def generate_dataset(out_dir: str | Path, cfg: GeneratorConfig | None = None, seed: int = 0) -> dict:
    """Write a dataset under ``out_dir`` and return its manifest."""
    cfg = cfg or GeneratorConfig()
    for cls in SIZE_CLASSES:
        area_range(cls, cfg.canvas)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    classes = size_schedule(cfg)
    splits = assign_splits(cfg.num_pairs, cfg.split_ratios, np.random.default_rng(seed))
    split_of = {i: s for s, ids in splits.items() for i in ids}

    tallies = {c: 0 for c in SIZE_CLASSES}
    pairs_meta = []
    with open(out / "annotations.jsonl", "w") as ann:
        for i, cls in enumerate(classes):
            pair, _ = build_pair(i, cls, cfg, seed)
            tallies[pair.size_class] += 1
            files = {
                "composite": f"images/composite_{i:04d}.png",
                "gt": f"images/gt_{i:04d}.png",
                "mask": f"images/mask_{i:04d}.png",
            }
            _save_png(pair.composite, out / files["composite"])
            _save_png(pair.background, out / files["gt"])
            _save_png(pair.mask.astype(np.uint8) * 255, out / files["mask"])
            for expr in pair.expressions:
                ann.write(json.dumps({
                    "pair_id": i,
                    "tokens": [t for t, _ in expr],
                    "roles": [r for _, r in expr],
                    "size_class": pair.size_class,
                    "category": pair.category,
                    "split": split_of[i],
                }) + "\n")
            pairs_meta.append({"pair_id": i, "split": split_of[i], **files})

    manifest = {
        "seed": seed,
        "canvas": cfg.canvas,
        "num_pairs": cfg.num_pairs,
        "split_sizes": {k: len(v) for k, v in splits.items()},
        "splits": splits,
        "size_tallies": tallies,
        "pairs": pairs_meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(root: str | Path, split: str | None = None) -> list[dict]:
    """Read pairs (images as float arrays in [0, 1]) and their expressions."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    exprs: dict[int, list] = {}
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            exprs.setdefault(rec["pair_id"], []).append((rec["tokens"], rec["roles"]))
    out = []
    for meta in manifest["pairs"]:
        if split is not None and meta["split"] != split:
            continue
        load = lambda k: np.asarray(Image.open(root / meta[k]))  # noqa: E731
        out.append({
            "pair_id": meta["pair_id"],
            "composite": load("composite").astype(np.float32) / 255.0,
            "gt": load("gt").astype(np.float32) / 255.0,
            "mask": load("mask") > 127,
            "expressions": exprs[meta["pair_id"]],
        })
    return out
