"""Dense layer math on numpy arrays laid out as (C, H, W)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from detbench.errors import InputError


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Zero-padded 2-D cross-correlation.

    Args:
        x: (C_in, H, W) input
        weight: (C_out, C_in // groups, k_h, k_w) kernels
        bias: optional (C_out,) bias
        stride, padding: applied equally on both spatial axes
        groups: channel groups (C_in and C_out must both be divisible)

    Returns:
        (C_out, H', W') with H' = (H + 2 * padding - k_h) // stride + 1
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 3 or weight.ndim != 4:
        raise InputError(f"conv2d expects x (C,H,W) and weight (O,I,kh,kw); got {x.shape}, {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise InputError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    c_in = x.shape[0]
    c_out, c_per_group, kh, kw = weight.shape
    if c_in % groups or c_out % groups or c_in // groups != c_per_group:
        raise InputError(f"conv2d channel mismatch: input {c_in}, weight {weight.shape}, groups {groups}")
    if bias is not None and np.shape(bias) != (c_out,):
        raise InputError(f"conv2d bias shape {np.shape(bias)} != ({c_out},)")

    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    if x.shape[1] < kh or x.shape[2] < kw:
        raise InputError(f"kernel {kh}x{kw} larger than padded input {x.shape[1:]}")
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]

    out_per_group = c_out // groups
    parts = []
    for g in range(groups):
        win = windows[g * c_per_group:(g + 1) * c_per_group]
        w = weight[g * out_per_group:(g + 1) * out_per_group]
        parts.append(np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])))
    out = np.concatenate(parts, axis=0) if groups > 1 else parts[0]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


_ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "relu": relu}


def activation(kind: str, x):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise InputError(f"unknown activation {kind!r}") from None
    return fn(x)


def global_avg_pool(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InputError(f"global_avg_pool expects (C,H,W), got {x.shape}")
    return x.mean(axis=(1, 2))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped (in_features, out_features)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[0] != x.shape[0]:
        raise InputError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        if np.shape(bias) != (weight.shape[1],):
            raise InputError(f"linear bias shape {np.shape(bias)} != ({weight.shape[1]},)")
        out = out + bias
    return out


@dataclass(frozen=True)
class SEBlockSpec:
    """Squeeze-and-excitation weights: C -> ceil(C/r) -> C with biases."""

    channels: int
    reduction: int
    w1: np.ndarray  # (C, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, C)
    b2: np.ndarray  # (C,)

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise InputError("SE channels and reduction must be >= 1")
        m = self.hidden
        expected = {"w1": (self.channels, m), "b1": (m,), "w2": (m, self.channels), "b2": (self.channels,)}
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InputError(f"SE {name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    @property
    def hidden(self) -> int:
        return hidden_channels(self.channels, self.reduction)

    @classmethod
    def zeros(cls, channels: int, reduction: int = 16) -> "SEBlockSpec":
        m = hidden_channels(channels, reduction)
        return cls(channels, reduction, np.zeros((channels, m)), np.zeros(m), np.zeros((m, channels)), np.zeros(channels))

    @classmethod
    def random(cls, channels: int, reduction: int = 16, rng=None) -> "SEBlockSpec":
        rng = np.random.default_rng(rng)
        m = hidden_channels(channels, reduction)
        return cls(
            channels,
            reduction,
            rng.normal(0, 1 / math.sqrt(channels), (channels, m)),
            rng.normal(0, 0.1, m),
            rng.normal(0, 1 / math.sqrt(m), (m, channels)),
            rng.normal(0, 0.1, channels),
        )


def hidden_channels(channels: int, reduction: int) -> int:
    return -(-channels // reduction)


def se_channel_scales(x, spec: SEBlockSpec):
    return sigmoid(linear(relu(linear(global_avg_pool(x), spec.w1, spec.b1)), spec.w2, spec.b2))


def se_block(x, spec: SEBlockSpec):
    """Rescale each channel of ``x`` by its excitation weight in (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != spec.channels:
        raise InputError(f"se_block expects ({spec.channels},H,W), got {x.shape}")
    return x * se_channel_scales(x, spec)[:, None, None]
