"""Architecture IR for BLite / FDLite plus shape, parameter and FLOP auditing.

A :class:`LayerGraph` is an ordered list of primitive :class:`LayerSpec` nodes.
Node order is always a valid topological order; every node lists the tensor
names it consumes (node names, or the graph input name).  Composite units
(CBL, CL, CDw, FRU, FPN levels, CCPM, heads) exist only as dotted name
prefixes, which is what the per-unit audits group on.

Tensors follow N,H,W,C semantics.  Head outputs are reshaped to
``(n, rows, 1, cols)`` so that vertical concatenation is a Concat on axis 1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .errors import ConfigurationError, StructuralError

KINDS = (
    "Conv",
    "BatchNorm",
    "LeakyReLU",
    "MaxPool",
    "UpsampleNearest2x",
    "Concat",
    "Add",
    "Reshape",
)

# Head tensor column counts per anchor: face/background logits, box offsets,
# 5 landmark points.
HEAD_COLS = {"cls": 2, "bbox": 4, "landm": 10}
LEVEL_STRIDES = (8, 16, 32)

ANCHOR_ORDER_CONTRACT = (
    "rows of cls/bbox/landm outputs are ordered level-major (stride 8, 16, 32), "
    "then feature-map row-major (row, col), then anchor size index"
)


@dataclass(frozen=True)
class TensorShape:
    n: int
    h: int
    w: int
    c: int

    def __post_init__(self):
        for dim in ("n", "h", "w", "c"):
            if getattr(self, dim) < 1:
                raise StructuralError(f"tensor dimension {dim} must be >= 1, got {self}")

    @property
    def numel(self) -> int:
        return self.n * self.h * self.w * self.c

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.h, self.w, self.c)


@dataclass(frozen=True)
class LayerSpec:
    """One primitive node.

    ``weight`` is the key under which Conv/BatchNorm parameters are stored;
    nodes sharing a key share weights (the detector head does this across
    its two branches).  ``axis`` only matters for Concat and ``slope`` only
    for LeakyReLU.
    """

    kind: str
    name: str
    inputs: tuple[str, ...]
    kernel_h: int = 1
    kernel_w: int = 1
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False
    weight: str | None = None
    slope: float = 0.1
    axis: int = 3
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}", self.name)
        if self.groups < 1 or self.stride < 1 or self.padding < 0:
            raise StructuralError("need groups >= 1, stride >= 1, padding >= 0", self.name)
        if self.kind == "Conv":
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise StructuralError(
                    f"channels {self.in_channels}->{self.out_channels} not divisible "
                    f"by groups={self.groups}",
                    self.name,
                )
        if self.kind == "MaxPool" and self.padding >= max(self.kernel_h, self.kernel_w):
            raise StructuralError("max-pool padding must be smaller than the window", self.name)
        if self.kind == "Concat" and self.axis not in (1, 3):
            raise StructuralError("concat axis must be 1 (rows) or 3 (channels)", self.name)

    @property
    def weight_key(self) -> str:
        return self.weight if self.weight is not None else self.name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        d = dict(d)
        d["inputs"] = tuple(d["inputs"])
        return cls(**d)


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple[LayerSpec, ...]
    inputs: tuple[str, ...] = ("image",)
    outputs: Mapping[str, str] = field(default_factory=dict)
    input_channels: int = 3
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        seen = set(self.inputs)
        for node in self.nodes:
            if node.name in seen:
                raise StructuralError("duplicate tensor name", node.name)
            for src in node.inputs:
                if src not in seen:
                    raise StructuralError(f"producer {src!r} missing or defined later", node.name)
            seen.add(node.name)
        for alias, ref in self.outputs.items():
            if ref not in seen:
                raise StructuralError(f"output {alias!r} references unknown tensor {ref!r}")

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, node.name) for node in self.nodes for src in node.inputs]

    def node(self, name: str) -> LayerSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "format": "fdlite-graph",
            "version": 1,
            "inputs": list(self.inputs),
            "input_channels": self.input_channels,
            "outputs": dict(self.outputs),
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "metadata": dict(self.metadata),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, doc: Mapping) -> "LayerGraph":
        nodes = tuple(LayerSpec.from_dict(n) for n in doc["nodes"])
        graph = cls(
            nodes=nodes,
            inputs=tuple(doc["inputs"]),
            outputs=dict(doc["outputs"]),
            input_channels=int(doc.get("input_channels", 3)),
            metadata=dict(doc.get("metadata", {})),
        )
        declared = {tuple(e) for e in doc.get("edges", graph.edges)}
        if declared != set(graph.edges):
            raise StructuralError("edge list disagrees with node inputs")
        return graph


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BackboneConfig:
    """BLite options.

    ``fru_variant='dense'`` builds every FRU conv with groups=1, as written
    in the architecture text.  ``'grouped'`` gives the three 3x3 FRU convs
    ``groups = k // fru_group_width`` for an FRU on k channels.
    """

    fru_variant: str = "dense"
    slope: float = 0.1
    fru_group_width: int = 8

    def validate(self):
        if not self.slope > 0 or not self.slope < 1:
            raise ConfigurationError(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")
        if self.fru_variant not in ("dense", "grouped"):
            raise ConfigurationError(f"unknown FRU variant {self.fru_variant!r}")
        if self.fru_group_width < 1:
            raise ConfigurationError("fru_group_width must be >= 1")


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn_width: int = 32
    ccpm: str = "ssh"
    anchors_per_cell: int = 3

    def validate(self):
        self.backbone.validate()
        if self.fpn_width < 4 or self.fpn_width % 4:
            raise ConfigurationError(
                f"FPN width must be a positive multiple of 4 (CCPM branch split), got {self.fpn_width}"
            )
        if self.ccpm != "ssh":
            raise ConfigurationError(f"unknown CCPM topology {self.ccpm!r}")
        if self.anchors_per_cell < 1:
            raise ConfigurationError("anchors_per_cell must be >= 1")


# --------------------------------------------------------------------------
# builder


class GraphBuilder:
    """Accumulates primitive nodes; every unit method returns its output tensor name."""

    def __init__(self, slope: float = 0.1, input_name: str = "image", input_channels: int = 3):
        self.slope = slope
        self.nodes: list[LayerSpec] = []
        self.channels: dict[str, int] = {input_name: input_channels}
        self.input_name = input_name
        self.input_channels = input_channels

    def _add(self, spec: LayerSpec, out_channels: int) -> str:
        self.nodes.append(spec)
        self.channels[spec.name] = out_channels
        return spec.name

    # primitives

    def conv(self, x, name, k, out, stride=1, padding=0, groups=1, bias=False, weight=None):
        kh, kw = (k, k) if isinstance(k, int) else k
        spec = LayerSpec(
            "Conv", name, (x,), kernel_h=kh, kernel_w=kw,
            in_channels=self.channels[x], out_channels=out, stride=stride,
            padding=padding, groups=groups, has_bias=bias, weight=weight,
        )
        return self._add(spec, out)

    def bn(self, x, name):
        c = self.channels[x]
        return self._add(LayerSpec("BatchNorm", name, (x,), in_channels=c, out_channels=c), c)

    def leaky(self, x, name):
        c = self.channels[x]
        return self._add(
            LayerSpec("LeakyReLU", name, (x,), in_channels=c, out_channels=c, slope=self.slope), c
        )

    def maxpool(self, x, name, k, stride, padding):
        c = self.channels[x]
        spec = LayerSpec("MaxPool", name, (x,), kernel_h=k, kernel_w=k, in_channels=c,
                         out_channels=c, stride=stride, padding=padding)
        return self._add(spec, c)

    def add(self, a, b, name):
        c = self.channels[a]
        return self._add(LayerSpec("Add", name, (a, b), in_channels=c, out_channels=c), c)

    def concat(self, xs, name, axis=3):
        if axis == 3:
            c = sum(self.channels[x] for x in xs)
        else:
            c = self.channels[xs[0]]
        return self._add(LayerSpec("Concat", name, tuple(xs), out_channels=c, axis=axis), c)

    def upsample(self, x, ref, name):
        c = self.channels[x]
        return self._add(
            LayerSpec("UpsampleNearest2x", name, (x, ref), in_channels=c, out_channels=c), c
        )

    def reshape(self, x, name, cols):
        c = self.channels[x]
        if c % cols:
            raise StructuralError(f"cannot reshape {c} channels into rows of {cols}", name)
        return self._add(
            LayerSpec("Reshape", name, (x,), in_channels=c, out_channels=cols), cols
        )

    # composite units

    def cbl(self, x, name, k, out, stride=1, padding=0, groups=1):
        y = self.conv(x, f"{name}.conv", k, out, stride, padding, groups, bias=False)
        y = self.bn(y, f"{name}.bn")
        return self.leaky(y, f"{name}.act")

    def cb(self, x, name, k, out, stride=1, padding=0, groups=1):
        """Conv + BatchNorm without activation (tail of a CCPM branch)."""
        y = self.conv(x, f"{name}.conv", k, out, stride, padding, groups, bias=False)
        return self.bn(y, f"{name}.bn")

    def cl(self, x, name, k, out, stride=1, padding=0, groups=1):
        y = self.conv(x, f"{name}.conv", k, out, stride, padding, groups, bias=True)
        return self.leaky(y, f"{name}.act")

    def cdw(self, x, name, k_in, q, s):
        if self.channels[x] != k_in:
            raise StructuralError(f"CDw expects {k_in} channels, got {self.channels[x]}", name)
        y = self.cbl(x, f"{name}.pw", 1, q, 1, 0, 1)
        return self.cbl(y, f"{name}.dw", 3, q, s, 1, q)

    def fru(self, x, name, k, groups3=1):
        if self.channels[x] != k or k % 2:
            raise StructuralError(f"FRU({k}) got {self.channels[x]} channels", name)
        y = self.cl(x, f"{name}.cl0", 3, k, 1, 1, groups3)
        a = self.cl(y, f"{name}.cl3", 3, k // 2, 1, 1, groups3)
        b = self.cl(y, f"{name}.cl1", 1, k // 2, 1, 0, 1)
        y = self.concat([a, b], f"{name}.cat")
        y = self.cl(y, f"{name}.cl4", 3, k, 1, 1, groups3)
        return self.add(y, x, f"{name}.add")

    def graph(self, outputs, metadata=None) -> LayerGraph:
        return LayerGraph(
            nodes=tuple(self.nodes),
            inputs=(self.input_name,),
            outputs=dict(outputs),
            input_channels=self.input_channels,
            metadata=dict(metadata or {}),
        )


def _fru_groups(cfg: BackboneConfig, k: int) -> int:
    if cfg.fru_variant == "dense":
        return 1
    g = max(1, k // cfg.fru_group_width)
    if k % g or (k // 2) % g:
        raise ConfigurationError(f"FRU({k}) cannot use {g} groups")
    return g


def _blite_into(b: GraphBuilder, cfg: BackboneConfig) -> dict[str, str]:
    x = b.input_name
    x = b.cbl(x, "ife.cbl", 7, 8, 2, 3, 1)
    x = b.cdw(x, "ife.cdw0", 8, 16, 1)
    x = b.cdw(x, "ife.cdw1", 16, 32, 2)
    outs = {"C_in": x}
    k_in = 32
    for level, k in ((1, 64), (2, 128)):
        p = f"l{level}"
        g = _fru_groups(cfg, k)
        x = b.cbl(x, f"{p}.cbl", 3, k, 2, 1, 1)
        x = b.fru(x, f"{p}.fru0", k, g)
        x = b.fru(x, f"{p}.fru1", k, g)
        x = b.cdw(x, f"{p}.cdw", k, k, 1)
        x = b.fru(x, f"{p}.fru2", k, g)
        outs[f"C{level}"] = x
        k_in = k
    x = b.maxpool(x, "l3.mp", 3, 2, 1)
    x = b.cdw(x, "l3.cdw0", k_in, 128, 1)
    x = b.cdw(x, "l3.cdw1", 128, 256, 1)
    x = b.cdw(x, "l3.cdw2", 256, 256, 1)
    outs["C3"] = x
    return outs


def build_blite(config: BackboneConfig | None = None) -> LayerGraph:
    """Backbone only; outputs ``C1``, ``C2``, ``C3`` (strides 8, 16, 32)."""
    cfg = config or BackboneConfig()
    cfg.validate()
    b = GraphBuilder(slope=cfg.slope)
    outs = _blite_into(b, cfg)
    return b.graph(
        {k: outs[k] for k in ("C1", "C2", "C3")},
        metadata={"model": "blite", "fru_variant": cfg.fru_variant, "slope": cfg.slope},
    )


def _ccpm(b: GraphBuilder, x: str, name: str, c: int) -> str:
    a = b.cb(x, f"{name}.a0", 3, c // 2, 1, 1)
    y = b.cbl(x, f"{name}.b0", 3, c // 4, 1, 1)
    bb = b.cb(y, f"{name}.b1", 3, c // 4, 1, 1)
    y = b.cbl(x, f"{name}.c0", 3, c // 4, 1, 1)
    y = b.cbl(y, f"{name}.c1", 3, c // 4, 1, 1)
    cc = b.cb(y, f"{name}.c2", 3, c // 4, 1, 1)
    y = b.concat([a, bb, cc], f"{name}.cat")
    return b.leaky(y, f"{name}.act")


def build_fdlite(config: DetectorConfig | None = None) -> LayerGraph:
    """Full detector: BLite -> FPN -> cascaded CCPM pair -> shared heads.

    Outputs ``cls_u``, ``bbox_u``, ``landm_u`` for branch u in {1, 2}, each of
    shape ``(n, A_total, 1, cols)``.
    """
    cfg = config or DetectorConfig()
    cfg.validate()
    width, A = cfg.fpn_width, cfg.anchors_per_cell
    b = GraphBuilder(slope=cfg.backbone.slope)
    c = _blite_into(b, cfg.backbone)

    lateral = {i: b.cbl(c[f"C{i}"], f"fpn.lat{i}", 1, width, 1, 0) for i in (1, 2, 3)}
    pyramid = {3: b.cbl(lateral[3], "fpn.merge3", 3, width, 1, 1)}
    top = lateral[3]
    for i in (2, 1):
        up = b.upsample(top, lateral[i], f"fpn.up{i}")
        top = b.add(lateral[i], up, f"fpn.sum{i}")
        pyramid[i] = b.cbl(top, f"fpn.merge{i}", 3, width, 1, 1)

    rows: dict[tuple[str, int], list[str]] = {}
    for i in (1, 2, 3):
        feats = {1: _ccpm(b, pyramid[i], f"ccpm{i}.u1", width)}
        feats[2] = _ccpm(b, feats[1], f"ccpm{i}.u2", width)
        for u in (1, 2):
            for task, cols in HEAD_COLS.items():
                y = b.conv(
                    feats[u], f"head{i}.u{u}.{task}", 1, A * cols,
                    bias=True, weight=f"head{i}.{task}",
                )
                rows.setdefault((task, u), []).append(
                    b.reshape(y, f"head{i}.u{u}.{task}.flat", cols)
                )
    outputs = {}
    for u in (1, 2):
        for task in HEAD_COLS:
            outputs[f"{task}_{u}"] = b.concat(rows[(task, u)], f"out.{task}_{u}", axis=1)
    meta = {
        "model": "fdlite",
        "fru_variant": cfg.backbone.fru_variant,
        "slope": cfg.backbone.slope,
        "fpn_width": width,
        "anchors_per_cell": A,
        "level_strides": list(LEVEL_STRIDES),
        "anchor_order": ANCHOR_ORDER_CONTRACT,
    }
    return b.graph(outputs, metadata=meta)


# --------------------------------------------------------------------------
# analysis


def conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _infer_node(node: LayerSpec, ins: list[TensorShape]) -> TensorShape:
    x = ins[0]
    kind = node.kind
    if kind in ("Conv", "BatchNorm", "LeakyReLU", "MaxPool") and x.c != node.in_channels:
        raise StructuralError(f"expects {node.in_channels} channels, got {x.c}", node.name)
    if kind in ("Conv", "MaxPool"):
        h = conv_out(x.h, node.kernel_h, node.stride, node.padding)
        w = conv_out(x.w, node.kernel_w, node.stride, node.padding)
        if h < 1 or w < 1:
            raise StructuralError(f"input {x.as_tuple()} too small for window", node.name)
        c = node.out_channels if kind == "Conv" else x.c
        return TensorShape(x.n, h, w, c)
    if kind in ("BatchNorm", "LeakyReLU"):
        return x
    if kind == "Add":
        if any(s != x for s in ins[1:]):
            raise StructuralError(
                f"Add needs equal shapes, got {[s.as_tuple() for s in ins]}", node.name
            )
        return x
    if kind == "Concat":
        if node.axis == 3:
            if any((s.n, s.h, s.w) != (x.n, x.h, x.w) for s in ins):
                raise StructuralError("channel concat needs equal n,h,w", node.name)
            return TensorShape(x.n, x.h, x.w, sum(s.c for s in ins))
        if any((s.n, s.w, s.c) != (x.n, x.w, x.c) for s in ins):
            raise StructuralError("row concat needs equal n,w,c", node.name)
        return TensorShape(x.n, sum(s.h for s in ins), x.w, x.c)
    if kind == "UpsampleNearest2x":
        ref = ins[1] if len(ins) > 1 else TensorShape(x.n, 2 * x.h, 2 * x.w, x.c)
        if ref.n != x.n:
            raise StructuralError("upsample reference batch mismatch", node.name)
        return TensorShape(x.n, ref.h, ref.w, x.c)
    if kind == "Reshape":
        cols = node.out_channels
        if x.c % cols:
            raise StructuralError(f"{x.c} channels not divisible into {cols} columns", node.name)
        return TensorShape(x.n, x.h * x.w * (x.c // cols), 1, cols)
    raise StructuralError(f"no shape rule for {kind}", node.name)


def shape_infer(graph: LayerGraph, input: TensorShape) -> dict[str, TensorShape]:
    """Shape of every tensor (graph input included), keyed by name."""
    if input.c != graph.input_channels:
        raise StructuralError(
            f"graph expects {graph.input_channels} input channels, got {input.c}", graph.inputs[0]
        )
    shapes = {graph.inputs[0]: input}
    for node in graph.nodes:
        shapes[node.name] = _infer_node(node, [shapes[s] for s in node.inputs])
    return shapes


@dataclass(frozen=True)
class NodeBudget:
    name: str
    params: int
    flops: int


@dataclass(frozen=True)
class BudgetReport:
    """Per-node and total cost.

    ``total_flops`` counts a multiply-add as 2; ``total_macs`` halves only the
    convolution terms and keeps element-wise costs as-is.  BatchNorm running
    statistics are excluded from ``total_params`` and reported in
    ``non_learned_params``.  Shared weights are charged to their first user.
    """

    per_node: tuple[NodeBudget, ...]
    total_params: int
    total_flops: int
    total_macs: int
    non_learned_params: int
    input_shape: TensorShape | None

    def by_prefix(self, depth: int = 1) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for nb in self.per_node:
            key = ".".join(nb.name.split(".")[:depth])
            p, f = out.get(key, (0, 0))
            out[key] = (p + nb.params, f + nb.flops)
        return out

    def unit(self, prefix: str) -> tuple[int, int]:
        """(params, flops) summed over nodes whose name starts with ``prefix.``."""
        p = f = 0
        for nb in self.per_node:
            if nb.name == prefix or nb.name.startswith(prefix + "."):
                p += nb.params
                f += nb.flops
        return p, f

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape.as_tuple()) if self.input_shape else None,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_macs": self.total_macs,
            "non_learned_params": self.non_learned_params,
            "per_node": [[n.name, n.params, n.flops] for n in self.per_node],
        }


def node_params(node: LayerSpec) -> int:
    if node.kind == "Conv":
        p = node.kernel_h * node.kernel_w * (node.in_channels // node.groups) * node.out_channels
        return p + (node.out_channels if node.has_bias else 0)
    if node.kind == "BatchNorm":
        return 2 * node.in_channels
    return 0


def node_flops(node: LayerSpec, out: TensorShape) -> tuple[int, int]:
    """(flops, conv_flops) for one node given its output shape."""
    if node.kind == "Conv":
        f = (2 * node.kernel_h * node.kernel_w * (node.in_channels // node.groups)
             * node.out_channels * out.h * out.w * out.n)
        return f, f
    if node.kind == "BatchNorm":
        return 2 * out.numel, 0
    if node.kind in ("LeakyReLU", "Add"):
        return out.numel, 0
    if node.kind == "MaxPool":
        return (node.kernel_h * node.kernel_w - 1) * out.numel, 0
    return 0, 0


def _report(graph: LayerGraph, shapes: dict[str, TensorShape] | None, input_shape) -> BudgetReport:
    per_node = []
    seen: set[str] = set()
    total_p = total_f = conv_f = stats = 0
    for node in graph.nodes:
        p = 0
        if node.kind in ("Conv", "BatchNorm") and node.weight_key not in seen:
            seen.add(node.weight_key)
            p = node_params(node)
            if node.kind == "BatchNorm":
                stats += 2 * node.in_channels
        f = cf = 0
        if shapes is not None:
            f, cf = node_flops(node, shapes[node.name])
        per_node.append(NodeBudget(node.name, p, f))
        total_p += p
        total_f += f
        conv_f += cf
    return BudgetReport(
        per_node=tuple(per_node),
        total_params=total_p,
        total_flops=total_f,
        total_macs=total_f - conv_f // 2,
        non_learned_params=stats,
        input_shape=input_shape,
    )


def count_params(graph: LayerGraph) -> BudgetReport:
    return _report(graph, None, None)


def count_flops(graph: LayerGraph, input: TensorShape) -> BudgetReport:
    return _report(graph, shape_infer(graph, input), input)


def residual_pairs(graph: LayerGraph) -> Iterable[LayerSpec]:
    """Add nodes that close an FRU residual connection."""
    return [n for n in graph.nodes if n.kind == "Add" and ".fru" in n.name]
