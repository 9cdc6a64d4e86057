"""Classification losses returning value and analytic gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from detbench.errors import InputError


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: Union[np.ndarray, float]


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    return shifted - math.log(np.exp(shifted).sum())


def cross_entropy(logits, target: int) -> LossValue:
    """Softmax cross-entropy for one example; gradient is ``softmax - onehot``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise InputError(f"cross_entropy needs a vector of >= 2 logits, got shape {z.shape}")
    if not 0 <= target < z.shape[0]:
        raise InputError(f"target {target} out of range for {z.shape[0]} classes")
    logp = log_softmax(z)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return LossValue(float(-logp[target]), grad)


def focal_loss(p: float, target: int, gamma: float = 2.0, alpha: float = 0.25) -> LossValue:
    """Binary focal loss ``-alpha * (1 - p_t)**gamma * log(p_t)`` and its derivative w.r.t. ``p``.

    ``p_t`` is ``p`` for a positive target and ``1 - p`` otherwise. ``p`` must lie
    strictly inside (0, 1); clamp upstream.
    """
    if not 0.0 < p < 1.0:
        raise InputError(f"focal_loss probability must be in (0, 1), got {p}")
    if gamma < 0 or not 0.0 < alpha <= 1.0:
        raise InputError("focal_loss needs gamma >= 0 and alpha in (0, 1]")
    if target not in (0, 1):
        raise InputError(f"focal_loss target must be 0 or 1, got {target}")
    pt = p if target else 1.0 - p
    sign = 1.0 if target else -1.0
    q = 1.0 - pt
    log_pt = math.log(pt)
    value = -alpha * q**gamma * log_pt
    d_pt = alpha * (gamma * q ** (gamma - 1.0) * log_pt if gamma > 0 else 0.0) - alpha * q**gamma / pt
    return LossValue(value, sign * d_pt)
