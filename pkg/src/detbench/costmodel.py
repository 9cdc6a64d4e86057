"""
Analytical cost accounting over a layer graph.

Counting conventions:

- MACs are multiply-accumulates of conv/linear/SE matrix products only.
- Elementwise ops: one per output element for activations and pooling, one per
  output element for each bias add, and for SE blocks the pooling sum plus the
  channel rescale (C*H*W each) plus the two small bias adds.
- FLOPs = 2 * MACs + elementwise ops. Both MACs and FLOPs are reported since
  tools disagree on which one they call "FLOPs".

Graph text format, one node per line (``#`` starts a comment)::

    $in input channels=3
    stem conv out=8 kernel=3 stride=2 padding=1 input=$in
    act activation fn=silu input=stem
    cat concat input=act,other
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from detbench.errors import GraphError, InputError

INPUT = "$in"
KINDS = ("conv", "linear", "pool", "activation", "se", "upsample", "concat")

Shape = tuple  # (C, H, W) feature map, (N,) vector; spatial dims may be None when unknown


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    inputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def get(self, key, default=None):
        return self.attrs.get(key, default)


@dataclass
class GraphIR:
    nodes: list[Node]
    input_channels: Optional[int] = None

    def __post_init__(self):
        seen = {INPUT}
        for node in self.nodes:
            if node.kind not in KINDS:
                raise GraphError(node.name, f"unknown kind {node.kind!r}")
            if node.name in seen:
                raise GraphError(node.name, "duplicate node name")
            if not node.inputs:
                raise GraphError(node.name, "node has no input")
            for src in node.inputs:
                # inputs must be defined earlier, which also rules out cycles
                if src not in seen:
                    raise GraphError(node.name, f"input {src!r} is not defined before use")
            if node.kind != "concat" and len(node.inputs) != 1:
                raise GraphError(node.name, f"{node.kind} takes exactly one input")
            seen.add(node.name)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


@dataclass(frozen=True)
class NodeCost:
    name: str
    kind: str
    out_shape: Shape
    params: int
    macs: int
    elementwise: int

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


@dataclass
class CostReport:
    nodes: list[NodeCost]
    storage_bytes: Optional[int] = None

    @property
    def params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def elementwise(self) -> int:
        return sum(n.elementwise for n in self.nodes)

    @property
    def flops(self) -> int:
        return sum(n.flops for n in self.nodes)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "out_shape", "params", "macs", "elementwise", "flops"])
        for n in self.nodes:
            w.writerow([n.name, n.kind, "x".join(str(d) for d in n.out_shape), n.params, n.macs, n.elementwise, n.flops])
        w.writerow(["TOTAL", "", "", self.params, self.macs, self.elementwise, self.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [("name", "kind", "out", "params", "MACs", "FLOPs")]
        for n in self.nodes:
            rows.append((n.name, n.kind, "x".join(str(d) for d in n.out_shape), str(n.params), str(n.macs), str(n.flops)))
        rows.append(("TOTAL", "", "", str(self.params), str(self.macs), str(self.flops)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(wd) if i < 3 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths))) for r in rows]
        lines.append(f"GFLOPs: {self.gflops:.6f}")
        if self.storage_bytes is not None:
            lines.append(f"storage: {self.storage_bytes} bytes")
        return "\n".join(lines)


def _out_dim(size, k, s, p, node):
    if size is None:
        return None
    out = (size + 2 * p - k) // s + 1
    if size + 2 * p - k < 0 or out < 1:
        raise GraphError(node.name, f"non-positive output size from input {size}, kernel {k}, stride {s}, padding {p}")
    return out


def _prod(values):
    return math.prod(values)


def _node_cost(node: Node, in_shapes: list[Shape]) -> NodeCost:
    kind = node.kind
    shape = in_shapes[0]
    params = macs = elem = 0

    if kind == "conv":
        if len(shape) != 3:
            raise GraphError(node.name, f"conv needs a (C,H,W) input, got {shape}")
        c_in, h, w = shape
        c_out = int(node.get("out", 0))
        k = int(node.get("kernel", 1))
        s = int(node.get("stride", 1))
        p = int(node.get("padding", 0))
        g = int(node.get("groups", 1))
        if c_out < 1 or k < 1 or s < 1 or p < 0 or g < 1:
            raise GraphError(node.name, "conv needs out >= 1, kernel >= 1, stride >= 1, padding >= 0, groups >= 1")
        if c_in % g or c_out % g:
            raise GraphError(node.name, f"channels {c_in}->{c_out} not divisible by groups {g}")
        out = (c_out, _out_dim(h, k, s, p, node), _out_dim(w, k, s, p, node))
        bias = bool(node.get("bias", True))
        params = k * k * (c_in // g) * c_out + (c_out if bias else 0)
        if out[1] is not None:
            positions = out[1] * out[2]
            macs = k * k * (c_in // g) * c_out * positions
            elem = c_out * positions if bias else 0
    elif kind == "linear":
        if any(d is None for d in shape):
            raise GraphError(node.name, "linear input size depends on an unknown spatial shape")
        n_in = _prod(shape)
        n_out = int(node.get("out", 0))
        if n_out < 1:
            raise GraphError(node.name, "linear needs out >= 1")
        bias = bool(node.get("bias", True))
        out = (n_out,)
        params = n_in * n_out + (n_out if bias else 0)
        macs = n_in * n_out
        elem = n_out if bias else 0
    elif kind == "pool":
        if len(shape) != 3:
            raise GraphError(node.name, f"pool needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        if node.get("global", False):
            out = (c, 1, 1)
        else:
            k = int(node.get("kernel", 2))
            s = int(node.get("stride", k))
            p = int(node.get("padding", 0))
            out = (c, _out_dim(h, k, s, p, node), _out_dim(w, k, s, p, node))
        if out[1] is not None:
            elem = _prod(out)
    elif kind == "activation":
        out = tuple(shape)
        if all(d is not None for d in out):
            elem = _prod(out)
    elif kind == "se":
        if len(shape) != 3:
            raise GraphError(node.name, f"se needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        r = int(node.get("reduction", 16))
        if r < 1:
            raise GraphError(node.name, "se reduction must be >= 1")
        m = -(-c // r)
        out = tuple(shape)
        params = c * m + m + m * c + c
        macs = 2 * c * m
        if h is not None:
            elem = 2 * c * h * w + m + c
    elif kind == "upsample":
        if len(shape) != 3:
            raise GraphError(node.name, f"upsample needs a (C,H,W) input, got {shape}")
        f = int(node.get("scale", 2))
        if f < 1:
            raise GraphError(node.name, "upsample scale must be >= 1")
        c, h, w = shape
        out = (c, None if h is None else h * f, None if w is None else w * f)
    elif kind == "concat":
        if len(in_shapes) < 2:
            raise GraphError(node.name, "concat needs at least two inputs")
        if any(len(s) != 3 for s in in_shapes):
            raise GraphError(node.name, "concat inputs must be (C,H,W)")
        spatial = {tuple(s[1:]) for s in in_shapes}
        if len(spatial) != 1:
            raise GraphError(node.name, f"concat spatial mismatch: {sorted(spatial, key=str)}")
        out = (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]
    else:  # pragma: no cover - rejected by GraphIR
        raise GraphError(node.name, f"unknown kind {kind!r}")
    return NodeCost(node.name, kind, out, params, macs, elem)


def _walk(graph: GraphIR, input_shape: Shape) -> list[NodeCost]:
    shapes = {INPUT: tuple(input_shape)}
    costs = []
    for node in graph.nodes:
        cost = _node_cost(node, [shapes[i] for i in node.inputs])
        shapes[node.name] = cost.out_shape
        costs.append(cost)
    return costs


def _as_shape(input_shape) -> Shape:
    shape = tuple(int(d) for d in input_shape)
    if len(shape) not in (1, 3) or any(d < 1 for d in shape):
        raise InputError(f"input shape must be (C,H,W) or (N,) with positive dims, got {input_shape}")
    return shape


def resolve_shapes(graph: GraphIR, input_shape) -> dict[str, Shape]:
    return {c.name: c.out_shape for c in _walk(graph, _as_shape(input_shape))}


def count_params(graph: GraphIR, input_shape=None) -> tuple[dict[str, int], int]:
    """Per-node and total parameter counts.

    Only channel counts matter, so without ``input_shape`` the graph's declared
    input channels are used and spatial sizes stay unknown.
    """
    if input_shape is None:
        if graph.input_channels is None:
            raise InputError("graph declares no input channels; pass input_shape")
        costs = _walk(graph, (graph.input_channels, None, None))
    else:
        costs = _walk(graph, _as_shape(input_shape))
    per_node = {c.name: c.params for c in costs}
    return per_node, sum(per_node.values())


def count_flops(graph: GraphIR, input_shape) -> CostReport:
    return CostReport(_walk(graph, _as_shape(input_shape)))


def storage_cost(graph: GraphIR, bytes_per_param: int = 4, header_overhead: int = 0, input_shape=None) -> int:
    """Predicted weight-file size: ``params * bytes_per_param + header_overhead``."""
    if bytes_per_param not in (2, 4, 8):
        raise InputError(f"bytes_per_param must be 2, 4 or 8, got {bytes_per_param}")
    if header_overhead < 0:
        raise InputError("header_overhead must be non-negative")
    _, total = count_params(graph, input_shape)
    return total * bytes_per_param + header_overhead


# -- text format ----------------------------------------------------------------


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_graph(text: str) -> GraphIR:
    nodes = []
    input_channels = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise InputError(f"graph line {lineno}: expected 'name kind key=value...'")
        name, kind = parts[0], parts[1]
        attrs = {}
        for item in parts[2:]:
            if "=" not in item:
                raise InputError(f"graph line {lineno}: malformed attribute {item!r}")
            k, v = item.split("=", 1)
            attrs[k] = v
        if name == INPUT:
            if kind != "input":
                raise InputError(f"graph line {lineno}: '$in' must be declared with kind 'input'")
            try:
                input_channels = int(attrs["channels"])
            except (KeyError, ValueError):
                raise InputError(f"graph line {lineno}: input declaration needs channels=<int>") from None
            continue
        inputs = tuple(s for s in attrs.pop("input", INPUT).split(",") if s)
        nodes.append(Node(name, kind, inputs, {k: _parse_value(v) for k, v in attrs.items()}))
    return GraphIR(nodes, input_channels)


def format_graph(graph: GraphIR) -> str:
    lines = []
    if graph.input_channels is not None:
        lines.append(f"{INPUT} input channels={graph.input_channels}")
    for n in graph.nodes:
        attrs = " ".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in n.attrs.items())
        parts = [n.name, n.kind] + ([attrs] if attrs else []) + [f"input={','.join(n.inputs)}"]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def chain(graphs: Sequence[GraphIR]) -> GraphIR:
    """Concatenate graphs so each one consumes the previous graph's final output."""
    nodes = []
    prev_out = INPUT
    for gi, g in enumerate(graphs):
        rename = {INPUT: prev_out}
        for n in g.nodes:
            new = f"g{gi}.{n.name}"
            rename[n.name] = new
            nodes.append(Node(new, n.kind, tuple(rename[i] for i in n.inputs), dict(n.attrs)))
        prev_out = rename[g.nodes[-1].name]
    return GraphIR(nodes, graphs[0].input_channels if graphs else None)
