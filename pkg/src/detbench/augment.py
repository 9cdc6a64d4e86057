"""
Seedable image/label augmentations.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
geometric op moves the bounding-box labels with the pixels. Resampling is
nearest-neighbour throughout so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from detbench.boxes import BBox, BoxTransform, GroundTruth, clip_box
from detbench.errors import InputError

DEFAULT_FILL = 0.5


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    labels: tuple[GroundTruth, ...] = ()

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise InputError(f"image must be (H, W, 3), got {img.shape}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "labels", tuple(self.labels))
        h, w = img.shape[:2]
        for lab in self.labels:
            b = lab.bbox
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise InputError(f"label {b.as_tuple()} outside {w}x{h} image")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    """Random-pipeline settings.

    The magnitudes below are working placeholders, not measured values.
    """

    translate_frac: float = 0.1
    scale_range: tuple[float, float] = (0.5, 1.5)
    hflip_prob: float = 0.5
    hsv_gains: tuple[float, float, float] = (0.015, 0.7, 0.4)
    mosaic_enabled: bool = True
    mixup_enabled: bool = False
    mixup_beta: float = 32.0
    min_box_area: float = 4.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InputError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.translate_frac < 0:
            raise InputError("translate_frac must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise InputError("hflip_prob must be in [0, 1]")
        if any(g < 0 for g in self.hsv_gains):
            raise InputError("hsv_gains must be >= 0")
        if self.mixup_beta <= 0:
            raise InputError("mixup_beta must be > 0")


def _resize_nearest(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.int64), w - 1)
    return img[rows[:, None], cols[None, :]]


def _map_labels(labels, fn, width, height, min_box_area):
    out = []
    for lab in labels:
        b = clip_box(fn(lab.bbox), width, height)
        if b.area >= min_box_area:
            out.append(replace(lab, bbox=b))
    return tuple(out)


def letterbox(src: LabeledImage, target: int, pad_value: float = DEFAULT_FILL) -> tuple[LabeledImage, BoxTransform]:
    """Aspect-preserving resize so the longer side equals ``target``, centred on a square canvas."""
    if target < 1:
        raise InputError("letterbox target must be >= 1")
    h, w = src.height, src.width
    scale = target / max(h, w)
    new_w = min(target, max(1, int(round(w * scale))))
    new_h = min(target, max(1, int(round(h * scale))))
    pad_x = (target - new_w) // 2
    pad_y = (target - new_h) // 2

    canvas = np.full((target, target, 3), pad_value, dtype=np.float64)
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = _resize_nearest(src.image, new_h, new_w)
    t = BoxTransform(scale, float(pad_x), float(pad_y), w, h, target, target)
    labels = tuple(replace(lab, bbox=clip_box(t.forward(lab.bbox), target, target)) for lab in src.labels)
    return LabeledImage(canvas, labels), t


def affine_translate_scale(
    src: LabeledImage,
    tx: float,
    ty: float,
    s: float,
    min_box_area: float = 4.0,
    fill: float = DEFAULT_FILL,
) -> LabeledImage:
    """Apply ``p -> s * p + (tx, ty)`` on a same-size canvas; off-canvas labels are clipped or dropped."""
    if not s > 0:
        raise InputError(f"scale must be positive, got {s}")
    h, w = src.height, src.width
    ys = np.floor((np.arange(h) + 0.5 - ty) / s).astype(np.int64)
    xs = np.floor((np.arange(w) + 0.5 - tx) / s).astype(np.int64)
    valid = ((ys >= 0) & (ys < h))[:, None] & ((xs >= 0) & (xs < w))[None, :]
    out = src.image[np.clip(ys, 0, h - 1)[:, None], np.clip(xs, 0, w - 1)[None, :]]
    out = np.where(valid[..., None], out, fill)

    def move(b):
        return BBox(b.x_min * s + tx, b.y_min * s + ty, b.x_max * s + tx, b.y_max * s + ty)

    return LabeledImage(out, _map_labels(src.labels, move, w, h, min_box_area))


def hflip(src: LabeledImage) -> LabeledImage:
    w = src.width
    labels = tuple(
        replace(lab, bbox=BBox(w - lab.bbox.x_max, lab.bbox.y_min, w - lab.bbox.x_min, lab.bbox.y_max))
        for lab in src.labels
    )
    return LabeledImage(src.image[:, ::-1].copy(), labels)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        np.mod((g - b) / safe, 6.0),
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def hsv_jitter(src: LabeledImage, dh: float, ds: float, dv: float) -> LabeledImage:
    """Shift hue by ``dh`` turns and scale saturation/value by ``1 + ds`` / ``1 + dv``."""
    hsv = rgb_to_hsv(src.image)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + ds), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + dv), 0.0, 1.0)
    return LabeledImage(np.clip(hsv_to_rgb(hsv), 0.0, 1.0), src.labels)


def mosaic(
    srcs: Sequence[LabeledImage],
    canvas: int,
    center: tuple[int, int],
    min_box_area: float = 4.0,
    fill: float = DEFAULT_FILL,
) -> LabeledImage:
    """Tile four images around ``center``: top-left, top-right, bottom-left, bottom-right.

    Each image is anchored at the centre point (the top-left one ends there, the
    bottom-right one starts there) and cropped to its quadrant.
    """
    if len(srcs) != 4:
        raise InputError(f"mosaic needs exactly 4 images, got {len(srcs)}")
    if canvas < 2:
        raise InputError("mosaic canvas must be >= 2")
    xc, yc = int(center[0]), int(center[1])
    if not (0 < xc < canvas and 0 < yc < canvas):
        raise InputError(f"mosaic center {center} not inside the canvas interior")

    out = np.full((canvas, canvas, 3), fill, dtype=np.float64)
    quadrants = [(0, 0, xc, yc), (xc, 0, canvas, yc), (0, yc, xc, canvas), (xc, yc, canvas, canvas)]
    labels = []
    for k, (src, (qx0, qy0, qx1, qy1)) in enumerate(zip(srcs, quadrants)):
        h, w = src.height, src.width
        ox = xc - w if k in (0, 2) else xc
        oy = yc - h if k in (0, 1) else yc
        x0, y0 = max(ox, qx0), max(oy, qy0)
        x1, y1 = min(ox + w, qx1), min(oy + h, qy1)
        if x1 > x0 and y1 > y0:
            out[y0:y1, x0:x1] = src.image[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        for lab in src.labels:
            b = lab.bbox
            moved = BBox(
                min(max(b.x_min + ox, qx0), qx1),
                min(max(b.y_min + oy, qy0), qy1),
                min(max(b.x_max + ox, qx0), qx1),
                min(max(b.y_max + oy, qy0), qy1),
            )
            if moved.area >= min_box_area and moved.area > 0:
                labels.append(replace(lab, bbox=moved))
    return LabeledImage(out, tuple(labels))


def mixup(a: LabeledImage, b: LabeledImage, lam: float) -> LabeledImage:
    """Blend ``lam * a + (1 - lam) * b``; labels of both images are kept as-is."""
    if a.image.shape != b.image.shape:
        raise InputError(f"mixup size mismatch: {a.image.shape} vs {b.image.shape}")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"mixup lambda {lam} outside [0, 1]")
    return LabeledImage(lam * a.image + (1.0 - lam) * b.image, a.labels + b.labels)


# -- randomized pipeline ------------------------------------------------------


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index) so samples can be built in any order."""
    return np.random.default_rng([int(seed), int(index)])


def random_mosaic_center(rng: np.random.Generator, canvas: int) -> tuple[int, int]:
    lo, hi = canvas // 4, (3 * canvas) // 4
    lo = max(lo, 1)
    hi = max(min(hi, canvas - 1), lo)
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def random_affine(src: LabeledImage, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledImage:
    s = float(rng.uniform(*cfg.scale_range))
    h, w = src.height, src.width
    # scale about the image centre, then translate
    tx = (1.0 - s) * w / 2.0 + float(rng.uniform(-cfg.translate_frac, cfg.translate_frac)) * w
    ty = (1.0 - s) * h / 2.0 + float(rng.uniform(-cfg.translate_frac, cfg.translate_frac)) * h
    return affine_translate_scale(src, tx, ty, s, cfg.min_box_area)


def _base_sample(dataset, index, cfg, size, rng):
    if cfg.mosaic_enabled:
        picks = [index] + [int(i) for i in rng.integers(0, len(dataset), 3)]
        tiles = [letterbox(dataset[i], size)[0] for i in picks]
        img = mosaic(tiles, size, random_mosaic_center(rng, size), cfg.min_box_area)
    else:
        img = letterbox(dataset[index], size)[0]
    img = random_affine(img, cfg, rng)
    if rng.random() < cfg.hflip_prob:
        img = hflip(img)
    gh, gs, gv = cfg.hsv_gains
    dh, ds, dv = (float(x) for x in rng.uniform(-1.0, 1.0, 3) * np.array([gh, gs, gv]))
    return hsv_jitter(img, dh, ds, dv)


def augment_sample(dataset: Sequence[LabeledImage], index: int, cfg: AugmentConfig, size: int) -> LabeledImage:
    """Build augmented training sample ``index`` of ``dataset`` at ``size`` x ``size``."""
    if not dataset:
        raise InputError("empty dataset")
    if not 0 <= index < len(dataset):
        raise InputError(f"sample index {index} outside dataset of {len(dataset)}")
    rng = sample_rng(cfg.seed, index)
    out = _base_sample(dataset, index, cfg, size, rng)
    if cfg.mixup_enabled:
        other = int(rng.integers(0, len(dataset)))
        partner = _base_sample(dataset, other, cfg, size, rng)
        out = mixup(out, partner, float(rng.beta(cfg.mixup_beta, cfg.mixup_beta)))
    return out
