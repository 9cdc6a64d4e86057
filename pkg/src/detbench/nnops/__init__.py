"""Minimal dense neural math for the in-repo reference detector."""

from detbench.nnops.decode import yolo_decode
from detbench.nnops.freeze import FreezePlan, FreezeSpec, freeze_plan
from detbench.nnops.layers import (
    SEBlockSpec,
    activation,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    se_block,
    sigmoid,
    silu,
)
from detbench.nnops.losses import LossValue, cross_entropy, focal_loss
from detbench.nnops.refnet import (
    RefNetSpec,
    forward_trace,
    init_weights,
    refnet_forward,
    refnet_graph,
)
from detbench.nnops.weights import load_weights, save_weights, weight_file_overhead

__all__ = [
    "FreezePlan",
    "FreezeSpec",
    "LossValue",
    "RefNetSpec",
    "SEBlockSpec",
    "activation",
    "conv2d",
    "cross_entropy",
    "focal_loss",
    "forward_trace",
    "freeze_plan",
    "global_avg_pool",
    "init_weights",
    "linear",
    "load_weights",
    "refnet_forward",
    "refnet_graph",
    "relu",
    "save_weights",
    "se_block",
    "sigmoid",
    "silu",
    "weight_file_overhead",
    "yolo_decode",
]
