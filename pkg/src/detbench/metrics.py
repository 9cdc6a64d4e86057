"""
COCO-style detection evaluation.

Matching, precision/recall curves, 101-point interpolated AP and the mAP
breakdown over IoU thresholds, classes and object-size strata.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from detbench.boxes import Detection, GroundTruth, iou_matrix
from detbench.errors import InputError, UndefinedMetricError

TP = "tp"
FP = "fp"
IGNORED = "ignored"

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
COCO_AREA_RANGES = (
    ("all", 0.0, math.inf),
    ("small", 0.0, 32.0**2),
    ("medium", 32.0**2, 96.0**2),
    ("large", 96.0**2, math.inf),
)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    recall_points: int = 101
    # (name, lo, hi) with membership lo <= area < hi
    area_ranges: tuple[tuple[str, float, float], ...] = COCO_AREA_RANGES
    max_detections_per_image: int = 100

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts:
            raise InputError("at least one IoU threshold is required")
        if any(not 0.0 < t <= 1.0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise InputError(f"IoU thresholds must be strictly increasing in (0, 1]: {ts}")
        object.__setattr__(self, "iou_thresholds", ts)
        if self.recall_points < 2:
            raise InputError("recall_points must be >= 2")
        if self.max_detections_per_image < 1:
            raise InputError("max_detections_per_image must be >= 1")
        names = [name for name, _, _ in self.area_ranges]
        if "all" not in names or len(set(names)) != len(names):
            raise InputError("area ranges need unique names including 'all'")
        for name, lo, hi in self.area_ranges:
            if not 0.0 <= lo < hi:
                raise InputError(f"area range {name!r} is empty or negative")
        strata = sorted((lo, hi) for name, lo, hi in self.area_ranges if name != "all")
        if any(b[0] < a[1] for a, b in zip(strata, strata[1:])):
            raise InputError("size strata overlap")

    def area_range(self, name: str) -> tuple[float, float]:
        for n, lo, hi in self.area_ranges:
            if n == name:
                return lo, hi
        raise KeyError(name)


@dataclass(frozen=True)
class MatchResult:
    labels: tuple[str, ...]  # aligned with the input detection order
    gt_matched: tuple[bool, ...]


@dataclass(frozen=True)
class PRCurve:
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    n_gt: int

    @property
    def defined(self) -> bool:
        return self.n_gt > 0

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall, self.precision))


@dataclass
class EvalSummary:
    """mAP breakdown. ``None`` marks an undefined value (no ground truth to score)."""

    map: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    iou_thresholds: tuple[float, ...]
    # area name -> class id -> per-threshold AP
    ap_table: dict[str, dict[int, tuple[Optional[float], ...]]] = field(default_factory=dict)

    def class_ap(self, class_id: int, area: str = "all") -> Optional[float]:
        row = self.ap_table[area].get(class_id)
        if row is None or row[0] is None:
            return None
        return float(np.mean(row))

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_small": self.ap_small,
            "AP_medium": self.ap_medium,
            "AP_large": self.ap_large,
            "iou_thresholds": list(self.iou_thresholds),
            "ap_table": {
                area: {str(c): list(row) for c, row in sorted(rows.items())}
                for area, rows in self.ap_table.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSummary":
        return cls(
            map=d["mAP"],
            ap50=d["AP50"],
            ap75=d["AP75"],
            ap_small=d["AP_small"],
            ap_medium=d["AP_medium"],
            ap_large=d["AP_large"],
            iou_thresholds=tuple(d["iou_thresholds"]),
            ap_table={
                area: {int(c): tuple(row) for c, row in rows.items()}
                for area, rows in d.get("ap_table", {}).items()
            },
        )


def _score_order(scores: Sequence[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def _match(scores, ious: np.ndarray, gt_ignore: np.ndarray, iou_threshold: float):
    """Greedy COCO matching on a precomputed (n_det, n_gt) IoU matrix.

    Returns per-detection codes (1 TP, 0 FP, -1 ignored) in input order and the
    matched flag of every GT.
    """
    n_det, n_gt = ious.shape
    codes = np.zeros(n_det, dtype=np.int8)
    matched = np.zeros(n_gt, dtype=bool)
    if n_gt == 0:
        return codes, matched
    for d in _score_order(scores):
        ok = (~matched) & (ious[d] >= iou_threshold)
        if not ok.any():
            continue
        regular = ok & ~gt_ignore
        pool = regular if regular.any() else ok
        row = np.where(pool, ious[d], -1.0)
        g = int(np.argmax(row))
        matched[g] = True
        codes[d] = -1 if gt_ignore[g] else 1
    return codes, matched


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float
) -> MatchResult:
    """Match one image's detections of a single class to its ground truths.

    Detections are taken by descending score. Each one claims the unmatched
    regular GT of highest IoU >= ``iou_threshold``; failing that, an unmatched
    ignored GT absorbs it (label ``ignored``). Anything else is a false positive.
    """
    boxes_d = np.array([d.bbox.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
    boxes_g = np.array([g.bbox.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(boxes_d, boxes_g)
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    codes, matched = _match([d.score for d in dets], ious, ignore, iou_threshold)
    names = {1: TP, 0: FP, -1: IGNORED}
    return MatchResult(tuple(names[int(c)] for c in codes), tuple(bool(m) for m in matched))


def pr_curve(labels: Sequence[str], n_gt: int) -> PRCurve:
    """Cumulative precision/recall after each detection.

    ``labels`` must already be sorted by descending score and hold only TP/FP.
    With ``n_gt == 0`` the curve is empty and flagged undefined.
    """
    if n_gt < 0:
        raise InputError("n_gt must be non-negative")
    if n_gt == 0:
        return PRCurve((), (), 0)
    recall, precision = [], []
    tp = fp = 0
    for lab in labels:
        if lab == TP:
            tp += 1
        elif lab == FP:
            fp += 1
        else:
            raise InputError(f"unexpected label {lab!r} in PR curve input")
        recall.append(tp / n_gt)
        precision.append(tp / (tp + fp))
    return PRCurve(tuple(recall), tuple(precision), n_gt)


def ap_101(curve: PRCurve, recall_points: int = 101) -> Optional[float]:
    """Interpolated AP: mean of the precision envelope sampled at evenly spaced recalls.

    Returns ``None`` for an undefined curve.
    """
    if not curve.defined:
        return None
    if not curve.recall:
        return 0.0
    rc = np.asarray(curve.recall, dtype=np.float64)
    envelope = np.maximum.accumulate(np.asarray(curve.precision, dtype=np.float64)[::-1])[::-1]
    grid = np.arange(recall_points, dtype=np.float64) / (recall_points - 1)
    idx = np.searchsorted(rc, grid, side="left")
    q = np.zeros(recall_points)
    hit = idx < len(rc)
    q[hit] = envelope[idx[hit]]
    return float(np.mean(q))


def _image_entries(img_dets, img_gts, classes, config, thresholds):
    """Per-image matching for every (class, area, threshold).

    Returns {(class, area_idx): (scores, codes per threshold, n_gt)} where codes
    exclude nothing yet; ignored detections are filtered during the reduction.
    """
    out = {}
    for c in classes:
        dets = [(pos, d) for pos, d in img_dets if d.class_id == c]
        gts = [g for g in img_gts if g.class_id == c]
        boxes_d = np.array([d.bbox.as_tuple() for _, d in dets], dtype=np.float64).reshape(-1, 4)
        boxes_g = np.array([g.bbox.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
        ious = iou_matrix(boxes_d, boxes_g)
        scores = [d.score for _, d in dets]
        positions = [pos for pos, _ in dets]
        det_area = np.array([d.bbox.area for _, d in dets], dtype=np.float64)
        gt_area = np.array([g.bbox.area for g in gts], dtype=np.float64)
        gt_flag = np.array([g.ignore for g in gts], dtype=bool)
        for a, (_, lo, hi) in enumerate(config.area_ranges):
            gt_ignore = gt_flag | (gt_area < lo) | (gt_area >= hi)
            det_out = (det_area < lo) | (det_area >= hi)
            per_t = []
            for t in thresholds:
                codes, _ = _match(scores, ious, gt_ignore, t)
                codes = codes.copy()
                codes[(codes == 0) & det_out] = -1
                per_t.append(codes)
            out[(c, a)] = (scores, positions, per_t, int((~gt_ignore).sum()))
    return out


def coco_map(
    dets: Mapping[Hashable, Sequence[Detection]],
    gts: Mapping[Hashable, Sequence[GroundTruth]],
    config: EvalConfig = EvalConfig(),
    workers: int = 1,
) -> EvalSummary:
    """Evaluate a dataset the COCO way.

    ``dets`` and ``gts`` map image ids to that image's detections/annotations.
    Score ties across the dataset are broken by input order: images in the order
    of ``gts`` (then any detection-only images), detections in list order.
    Classes with no regular ground truth are undefined and left out of every mean.
    """
    image_ids = list(gts) + [i for i in dets if i not in gts]
    classes = sorted({g.class_id for v in gts.values() for g in v} | {d.class_id for v in dets.values() for d in v})
    thresholds = config.iou_thresholds

    # global input position, then per-image truncation to the top-scoring detections
    per_image = []
    pos = 0
    for img in image_ids:
        img_dets = list(dets.get(img, ()))
        indexed = [(pos + k, d) for k, d in enumerate(img_dets)]
        pos += len(img_dets)
        keep = _score_order([d.score for d in img_dets])[: config.max_detections_per_image]
        per_image.append(([indexed[k] for k in sorted(keep)], list(gts.get(img, ()))))

    def work(item):
        return _image_entries(item[0], item[1], classes, config, thresholds)

    if workers > 1 and len(per_image) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, per_image))
    else:
        results = [work(item) for item in per_image]

    ap_table: dict[str, dict[int, tuple[Optional[float], ...]]] = {}
    for a, (area_name, _, _) in enumerate(config.area_ranges):
        rows = {}
        for c in classes:
            n_gt = 0
            entries = [[] for _ in thresholds]
            for res in results:
                scores, positions, per_t, n = res[(c, a)]
                n_gt += n
                for ti, codes in enumerate(per_t):
                    entries[ti].extend(
                        (-s, p, int(code)) for s, p, code in zip(scores, positions, codes) if code >= 0
                    )
            row = []
            for ti in range(len(thresholds)):
                ordered = sorted(entries[ti])
                curve = pr_curve([TP if code == 1 else FP for _, _, code in ordered], n_gt)
                row.append(ap_101(curve, config.recall_points))
            rows[c] = tuple(row)
        ap_table[area_name] = rows

    def mean_over(area: str, t_index: Optional[int] = None) -> Optional[float]:
        rows = ap_table.get(area)
        if rows is None:
            return None
        vals = []
        for row in rows.values():
            if row[0] is None:
                continue
            vals.append(row[t_index] if t_index is not None else float(np.mean(row)))
        return float(np.mean(vals)) if vals else None

    def t_index(value: float) -> Optional[int]:
        for i, t in enumerate(thresholds):
            if abs(t - value) < 1e-12:
                return i
        return None

    overall = mean_over("all")
    if overall is None:
        raise UndefinedMetricError("no class has ground truth; mAP is undefined")
    i50, i75 = t_index(0.5), t_index(0.75)
    return EvalSummary(
        map=overall,
        ap50=mean_over("all", i50) if i50 is not None else None,
        ap75=mean_over("all", i75) if i75 is not None else None,
        ap_small=mean_over("small"),
        ap_medium=mean_over("medium"),
        ap_large=mean_over("large"),
        iou_thresholds=thresholds,
        ap_table=ap_table,
    )
