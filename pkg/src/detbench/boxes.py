"""
Axis-aligned box geometry.

Box formats understood by :func:`convert`:

- ``xyxy``:   (x_min, y_min, x_max, y_max)
- ``cxcywh``: (center_x, center_y, width, height)
- ``xywh``:   (x_min, y_min, width, height)  (COCO ``bbox`` layout)

All coordinates are continuous pixel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from detbench.errors import InputError

BOX_FORMATS = ("xyxy", "cxcywh", "xywh")

# aspect-ratio guard for degenerate predictions
_MIN_SIDE = 1e-9
_V_SCALE = 4.0 / math.pi**2


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"non-finite box coordinates {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise InputError(f"invalid box {coords}: max < min")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_format(cls, box: Sequence[float], fmt: str) -> "BBox":
        return cls(*convert(box, fmt, "xyxy"))


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 0:
            raise InputError(f"negative class id {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: int
    ignore: bool = False

    def __post_init__(self):
        if self.class_id < 0:
            raise InputError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class BoxTransform:
    """Letterbox bookkeeping: ``target = original * scale + pad``."""

    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int
    target_w: int
    target_h: int

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError(f"scale must be positive, got {self.scale}")
        if self.pad_x < 0 or self.pad_y < 0:
            raise InputError("padding must be non-negative")

    @classmethod
    def identity(cls, width: int, height: int) -> "BoxTransform":
        return cls(1.0, 0.0, 0.0, width, height, width, height)

    def forward(self, box: BBox) -> BBox:
        """Map a box from original-image to letterboxed coordinates."""
        return BBox(
            box.x_min * self.scale + self.pad_x,
            box.y_min * self.scale + self.pad_y,
            box.x_max * self.scale + self.pad_x,
            box.y_max * self.scale + self.pad_y,
        )


def convert(box: Sequence[float], from_format: str, to_format: str) -> tuple[float, float, float, float]:
    """Convert a 4-tuple between the formats listed in :data:`BOX_FORMATS`."""
    for fmt in (from_format, to_format):
        if fmt not in BOX_FORMATS:
            raise InputError(f"unknown box format {fmt!r}; expected one of {BOX_FORMATS}")
    if len(box) != 4:
        raise InputError(f"box must have 4 values, got {len(box)}")
    a, b, c, d = (float(v) for v in box)

    if from_format == "xyxy":
        x1, y1, x2, y2 = a, b, c, d
    elif from_format == "cxcywh":
        x1, y1, x2, y2 = a - c / 2.0, b - d / 2.0, a + c / 2.0, b + d / 2.0
    else:
        x1, y1, x2, y2 = a, b, a + c, b + d

    if to_format == "xyxy":
        return x1, y1, x2, y2
    w, h = x2 - x1, y2 - y1
    if to_format == "cxcywh":
        return x1 + w / 2.0, y1 + h / 2.0, w, h
    return x1, y1, w, h


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy arrays.

    Evaluates the same expression as :func:`iou`, so results agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    ok = overlap & (union > 0.0)
    np.divide(inter, union, out=out, where=ok)
    return out


def _ciou_terms(pred: BBox, gt: BBox):
    """Shared forward pass for ciou and ciou_loss; returns every intermediate."""
    px1, py1, px2, py2 = pred.as_tuple()
    gx1, gy1, gx2, gy2 = gt.as_tuple()
    if gt.width <= 0.0 or gt.height <= 0.0:
        raise InputError(f"degenerate ground-truth box {gt.as_tuple()}")

    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    overlap = iw > 0.0 and ih > 0.0
    inter = iw * ih if overlap else 0.0
    union = pred.area + gt.area - inter
    iou_val = inter / union

    dx = (px1 + px2) / 2.0 - (gx1 + gx2) / 2.0
    dy = (py1 + py2) / 2.0 - (gy1 + gy2) / 2.0
    rho2 = dx * dx + dy * dy
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch

    w = max(pred.width, _MIN_SIDE)
    h = max(pred.height, _MIN_SIDE)
    dtheta = math.atan(gt.width / gt.height) - math.atan(w / h)
    v = _V_SCALE * dtheta * dtheta
    denom = (1.0 - iou_val) + v
    alpha = v / denom if denom > 0.0 else 0.0

    return dict(
        iw=iw, ih=ih, overlap=overlap, inter=inter, union=union, iou=iou_val,
        dx=dx, dy=dy, rho2=rho2, cw=cw, ch=ch, c2=c2,
        w=w, h=h, dtheta=dtheta, v=v, alpha=alpha,
    )


def ciou(pred: BBox, gt: BBox) -> float:
    """Complete IoU: IoU minus the normalized center distance and aspect penalty."""
    t = _ciou_terms(pred, gt)
    return t["iou"] - t["rho2"] / t["c2"] - t["alpha"] * t["v"]


def ciou_loss(pred: BBox, gt: BBox) -> tuple[float, tuple[float, float, float, float]]:
    """``1 - ciou(pred, gt)`` and its gradient w.r.t. (x_min, y_min, x_max, y_max) of ``pred``.

    The trade-off weight alpha is held constant during differentiation, as detector
    training code does (it is computed under no-grad). The returned gradient is
    therefore the exact derivative of ``1 - (IoU - rho^2/c^2 - alpha0 * v)`` with
    ``alpha0`` frozen at its current value.
    """
    t = _ciou_terms(pred, gt)
    px1, py1, px2, py2 = pred.as_tuple()
    gx1, gy1, gx2, gy2 = gt.as_tuple()
    value = 1.0 - (t["iou"] - t["rho2"] / t["c2"] - t["alpha"] * t["v"])

    # intersection
    d_inter = [0.0, 0.0, 0.0, 0.0]
    if t["overlap"]:
        iw, ih = t["iw"], t["ih"]
        if px1 > gx1:
            d_inter[0] = -ih
        if px2 < gx2:
            d_inter[2] = ih
        if py1 > gy1:
            d_inter[1] = -iw
        if py2 < gy2:
            d_inter[3] = iw
    # pred area
    pw, ph = pred.width, pred.height
    d_area = [-ph, -pw, ph, pw]
    inter, union = t["inter"], t["union"]
    d_iou = [(di * union - inter * (da - di)) / (union * union) for di, da in zip(d_inter, d_area)]

    # distance penalty rho^2 / c^2
    dx, dy, cw, ch, rho2, c2 = t["dx"], t["dy"], t["cw"], t["ch"], t["rho2"], t["c2"]
    d_rho2 = [dx, dy, dx, dy]
    d_c2 = [
        -2.0 * cw if px1 < gx1 else 0.0,
        -2.0 * ch if py1 < gy1 else 0.0,
        2.0 * cw if px2 > gx2 else 0.0,
        2.0 * ch if py2 > gy2 else 0.0,
    ]
    d_dist = [(dr * c2 - rho2 * dc) / (c2 * c2) for dr, dc in zip(d_rho2, d_c2)]

    # aspect penalty v; the guard clamp zeroes the derivative of a collapsed side
    w, h = t["w"], t["h"]
    r2 = w * w + h * h
    dv_dw = -2.0 * _V_SCALE * t["dtheta"] * (h / r2) if pw > _MIN_SIDE else 0.0
    dv_dh = 2.0 * _V_SCALE * t["dtheta"] * (w / r2) if ph > _MIN_SIDE else 0.0
    d_v = [-dv_dw, -dv_dh, dv_dw, dv_dh]

    alpha = t["alpha"]
    grad = tuple(-di + dd + alpha * dv for di, dd, dv in zip(d_iou, d_dist, d_v))
    return value, grad


def nms(dets: Sequence[Detection], iou_threshold: float, per_class: bool = True) -> list[Detection]:
    """Greedy non-maximum suppression.

    Detections are visited by descending score (ties keep input order); every
    remaining detection whose IoU with a kept one exceeds ``iou_threshold`` is
    dropped. With ``per_class`` only same-class detections suppress each other.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InputError(f"iou_threshold {iou_threshold} outside [0, 1]")
    n = len(dets)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    xyxy = np.array([dets[i].bbox.as_tuple() for i in order], dtype=np.float64)
    overlaps = iou_matrix(xyxy, xyxy) > iou_threshold
    if per_class:
        cls = np.array([dets[i].class_id for i in order])
        overlaps &= cls[:, None] == cls[None, :]

    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for k in range(n):
        if suppressed[k]:
            continue
        keep.append(order[k])
        suppressed |= overlaps[k]
    return [dets[i] for i in keep]


def unletterbox(box: BBox, t: BoxTransform) -> BBox:
    """Map a box from the letterboxed frame back to original image coordinates, clipped."""

    def back(v, pad, limit):
        return min(max((v - pad) / t.scale, 0.0), float(limit))

    return BBox(
        back(box.x_min, t.pad_x, t.orig_w),
        back(box.y_min, t.pad_y, t.orig_h),
        back(box.x_max, t.pad_x, t.orig_w),
        back(box.y_max, t.pad_y, t.orig_h),
    )


def clip_box(box: BBox, width: float, height: float) -> BBox:
    return BBox(
        min(max(box.x_min, 0.0), width),
        min(max(box.y_min, 0.0), height),
        min(max(box.x_max, 0.0), width),
        min(max(box.y_max, 0.0), height),
    )
