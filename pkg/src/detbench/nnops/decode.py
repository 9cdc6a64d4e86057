from __future__ import annotations

from typing import Sequence

import numpy as np

from detbench.boxes import BBox, Detection
from detbench.errors import InputError
from detbench.nnops.layers import sigmoid


def yolo_decode(
    raw,
    anchors: Sequence[tuple[float, float]],
    stride: float,
    conf_threshold: float = 0.25,
) -> list[Detection]:
    """Turn one raw YOLOv5-style head map into detections in input-pixel xyxy.

    ``raw`` is (A * (5 + K), H, W); channel block ``a`` holds
    (tx, ty, tw, th, obj, cls_0 .. cls_{K-1}) for anchor ``a``. Per cell (i, j):

        center = (2 * sigmoid(t_xy) - 0.5 + (j, i)) * stride
        size   = (2 * sigmoid(t_wh)) ** 2 * anchor
        score  = sigmoid(obj) * max_k sigmoid(cls_k)

    Output order is anchor-major, then row, then column.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n_anchor = len(anchors)
    if raw.ndim != 3 or n_anchor == 0 or raw.shape[0] % n_anchor:
        raise InputError(f"raw head shape {raw.shape} incompatible with {n_anchor} anchors")
    per = raw.shape[0] // n_anchor
    if per < 6:
        raise InputError(f"need at least one class per anchor; got {per} channels per anchor")
    _, h, w = raw.shape
    t = sigmoid(raw.reshape(n_anchor, per, h, w))
    anchor_arr = np.asarray(anchors, dtype=np.float64).reshape(n_anchor, 2)
    if np.any(anchor_arr <= 0):
        raise InputError("anchors must be positive")

    cols = np.arange(w, dtype=np.float64)[None, None, :]
    rows = np.arange(h, dtype=np.float64)[None, :, None]
    cx = (2.0 * t[:, 0] - 0.5 + cols) * stride
    cy = (2.0 * t[:, 1] - 0.5 + rows) * stride
    bw = (2.0 * t[:, 2]) ** 2 * anchor_arr[:, 0, None, None]
    bh = (2.0 * t[:, 3]) ** 2 * anchor_arr[:, 1, None, None]
    cls_p = t[:, 5:]
    cls_id = cls_p.argmax(axis=1)
    score = t[:, 4] * cls_p.max(axis=1)

    out = []
    for a, i, j in zip(*np.nonzero(score >= conf_threshold)):
        half_w, half_h = bw[a, i, j] / 2.0, bh[a, i, j] / 2.0
        x, y = cx[a, i, j], cy[a, i, j]
        out.append(
            Detection(
                BBox(float(x - half_w), float(y - half_h), float(x + half_w), float(y + half_h)),
                int(cls_id[a, i, j]),
                float(score[a, i, j]),
            )
        )
    return out
