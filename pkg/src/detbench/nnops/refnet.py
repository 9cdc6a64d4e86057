"""
Tiny single-scale YOLO-style reference detector.

Three stride-2 conv + SiLU stages (8 -> 16 -> 32 channels), an optional SE block
after the second stage, and a 1x1 detect head emitting A * (5 + K) channels.
Small enough to run end to end in tests, shaped like the real thing so the
decode / NMS / evaluation / cost paths all get exercised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from detbench.costmodel import INPUT, GraphIR, Node
from detbench.errors import InputError
from detbench.nnops.layers import SEBlockSpec, conv2d, hidden_channels, se_block, silu

DEFAULT_ANCHORS = ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0))


@dataclass(frozen=True)
class RefNetSpec:
    num_classes: int = 3
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    channels: tuple[int, int, int] = (8, 16, 32)
    use_se: bool = True
    se_reduction: int = 4
    in_channels: int = 3

    def __post_init__(self):
        if self.num_classes < 1:
            raise InputError("num_classes must be >= 1")
        if not self.anchors or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise InputError("anchors must be non-empty positive (w, h) pairs")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise InputError("channels must be three positive widths")
        object.__setattr__(self, "anchors", tuple((float(w), float(h)) for w, h in self.anchors))

    @property
    def stride(self) -> int:
        return 8

    @property
    def head_channels(self) -> int:
        return len(self.anchors) * (5 + self.num_classes)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2, c3 = self.channels
        shapes = {
            "backbone.stage1.conv.weight": (c1, self.in_channels, 3, 3),
            "backbone.stage1.conv.bias": (c1,),
            "backbone.stage2.conv.weight": (c2, c1, 3, 3),
            "backbone.stage2.conv.bias": (c2,),
        }
        if self.use_se:
            m = hidden_channels(c2, self.se_reduction)
            shapes.update({
                "backbone.se.fc1.weight": (c2, m),
                "backbone.se.fc1.bias": (m,),
                "backbone.se.fc2.weight": (m, c2),
                "backbone.se.fc2.bias": (c2,),
            })
        shapes.update({
            "backbone.stage3.conv.weight": (c3, c2, 3, 3),
            "backbone.stage3.conv.bias": (c3,),
            "head.conv.weight": (self.head_channels, c3, 1, 1),
            "head.conv.bias": (self.head_channels,),
        })
        return shapes


def init_weights(spec: RefNetSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal conv kernels, small biases, objectness bias pulled negative."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("weight"):
            fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
            weights[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        else:
            weights[name] = rng.normal(0.0, 0.05, shape)
    per = 5 + spec.num_classes
    head_b = weights["head.conv.bias"]
    head_b[4::per] -= 2.0
    return weights


def _check_weights(spec: RefNetSpec, weights: Mapping[str, np.ndarray]):
    expected = spec.param_shapes()
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise InputError(f"weights do not match spec (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if np.shape(weights[name]) != shape:
            raise InputError(f"weight {name} has shape {np.shape(weights[name])}, expected {shape}")


def _conv_stage(prefix):
    def run(w, x):
        return silu(conv2d(x, w[f"{prefix}.conv.weight"], w[f"{prefix}.conv.bias"], stride=2, padding=1))
    return run


def _se_stage(spec):
    def run(w, x):
        se = SEBlockSpec(
            spec.channels[1], spec.se_reduction,
            w["backbone.se.fc1.weight"], w["backbone.se.fc1.bias"],
            w["backbone.se.fc2.weight"], w["backbone.se.fc2.bias"],
        )
        return se_block(x, se)
    return run


def _head(w, x):
    return conv2d(x, w["head.conv.weight"], w["head.conv.bias"])


def stages(spec: RefNetSpec) -> list[tuple[str, Callable]]:
    """Ordered (name, fn(weights, x)) pairs making up the forward pass."""
    out = [("stage1", _conv_stage("backbone.stage1")), ("stage2", _conv_stage("backbone.stage2"))]
    if spec.use_se:
        out.append(("se", _se_stage(spec)))
    out += [("stage3", _conv_stage("backbone.stage3")), ("head", _head)]
    return out


def image_to_chw(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise InputError(f"image must be (H, W, C), got {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def forward_trace(spec: RefNetSpec, weights: Mapping[str, np.ndarray], image: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Run the network and return every stage output in order (the last is the raw head)."""
    _check_weights(spec, weights)
    x = image_to_chw(image)
    if x.shape[0] != spec.in_channels:
        raise InputError(f"expected {spec.in_channels} image channels, got {x.shape[0]}")
    h, w = x.shape[1:]
    if h % spec.stride or w % spec.stride:
        raise InputError(f"image size {w}x{h} not divisible by total stride {spec.stride}")
    trace = []
    for name, fn in stages(spec):
        x = fn(weights, x)
        trace.append((name, x))
    return trace


def refnet_forward(spec: RefNetSpec, weights: Mapping[str, np.ndarray], image: np.ndarray) -> np.ndarray:
    """Raw head tensor of shape (A * (5 + K), H / 8, W / 8)."""
    return forward_trace(spec, weights, image)[-1][1]


def refnet_graph(spec: RefNetSpec) -> GraphIR:
    """The same network as a cost graph; node names follow the parameter prefixes."""
    c1, c2, c3 = spec.channels
    nodes = [
        Node("stage1.conv", "conv", (INPUT,), {"out": c1, "kernel": 3, "stride": 2, "padding": 1}),
        Node("stage1.act", "activation", ("stage1.conv",), {"fn": "silu"}),
        Node("stage2.conv", "conv", ("stage1.act",), {"out": c2, "kernel": 3, "stride": 2, "padding": 1}),
        Node("stage2.act", "activation", ("stage2.conv",), {"fn": "silu"}),
    ]
    last = "stage2.act"
    if spec.use_se:
        nodes.append(Node("se", "se", (last,), {"reduction": spec.se_reduction}))
        last = "se"
    nodes += [
        Node("stage3.conv", "conv", (last,), {"out": c3, "kernel": 3, "stride": 2, "padding": 1}),
        Node("stage3.act", "activation", ("stage3.conv",), {"fn": "silu"}),
        Node("head.conv", "conv", ("stage3.act",), {"out": spec.head_channels, "kernel": 1}),
    ]
    return GraphIR(nodes, spec.in_channels)
