"""Computation-graph IR: typed operation nodes, parser, executor, compaction.

Node kinds fall into five families:

* stop ops (``linear``, ``conv``) own weights and may change the channel
  count between input and output,
* coupling ops (``add``, ``matmul``, ``concat``) take several inputs whose
  channel dimensions are tied together,
* pass-through ops (``relu``, ``gelu``, ``norm``, ``reshape``, ``transpose``,
  ``pool``, ``softmax``) preserve the channel count,
* sources (``input``, ``param``) and sinks (``output``, ``loss``).

Values are batched; all shape metadata below excludes the batch axis.
Layout convention: conv-like values are NCHW (channel axis 1), vector and
token values keep the channel on the last axis.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

STOP_KINDS = frozenset({"linear", "conv"})
COUPLING_KINDS = frozenset({"add", "matmul", "concat"})
PASSTHROUGH_KINDS = frozenset({"relu", "gelu", "norm", "reshape", "transpose",
                               "pool", "softmax"})
SOURCE_KINDS = frozenset({"input", "param"})
SINK_KINDS = frozenset({"output", "loss"})
ALL_KINDS = STOP_KINDS | COUPLING_KINDS | PASSTHROUGH_KINDS | SOURCE_KINDS | SINK_KINDS


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class OpNode:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    # filled in by shape inference
    shape_nb: tuple[int, ...] = ()       # output shape without the batch axis
    channel_axis: int | None = None      # absolute axis incl. batch; None = untracked
    param_names: tuple[str, ...] = ()

    @property
    def out_channels(self) -> int:
        if self.channel_axis is None:
            return 0
        return self.shape_nb[self.channel_axis - 1]

    @property
    def out_spatial(self) -> tuple[int, int] | None:
        """(h, w) for NCHW values, None otherwise."""
        if len(self.shape_nb) == 3 and self.channel_axis == 1:
            return (self.shape_nb[1], self.shape_nb[2])
        return None

    def kind_is(self, *kinds: str) -> bool:
        return self.kind in kinds

    @property
    def is_stop(self) -> bool:
        return self.kind in STOP_KINDS

    @property
    def is_coupling(self) -> bool:
        return self.kind in COUPLING_KINDS

    @property
    def is_passthrough(self) -> bool:
        return self.kind in PASSTHROUGH_KINDS


class ComputationGraph:
    """Immutable-after-validation DAG of OpNodes plus their parameters."""

    def __init__(self, nodes: dict[str, OpNode]):
        self.nodes = nodes
        self.topo_order: list[str] = []
        self.named_inputs: list[str] = []
        self.named_outputs: list[str] = []
        self.params: dict[str, Tensor] = {}
        self._successors: dict[str, list[str]] = {}
        self._validate()

    # -- construction ------------------------------------------------------

    def _validate(self) -> None:
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref not in self.nodes:
                    raise GraphError(f"node '{node.id}': dangling input reference '{ref}'")
        self.topo_order = self._toposort()
        self._successors = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                self._successors[ref].append(node.id)
        self.named_inputs = [n.id for n in self.nodes.values() if n.kind == "input"]
        self.named_outputs = [n.id for n in self.nodes.values()
                              if n.kind in ("output", "loss")]
        for nid in self.topo_order:
            _infer_shape(self, self.nodes[nid])
        self._init_params()

    def _toposort(self) -> list[str]:
        indeg = {nid: 0 for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                indeg[node.id] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        succ: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for ref in node.inputs:
                succ[ref].append(node.id)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for s in sorted(succ[nid]):
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
            ready.sort()
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise GraphError(f"cycle detected involving nodes {stuck}")
        return order

    def _init_params(self) -> None:
        for nid in self.topo_order:
            node = self.nodes[nid]
            names = []
            for pname, shape in _param_shapes(self, node):
                full = f"{nid}.{pname}"
                names.append(full)
                if full not in self.params:
                    if pname == "gamma":
                        init = np.ones(shape)
                    else:
                        init = np.zeros(shape)
                    self.params[full] = Tensor(init)
            node.param_names = tuple(names)

    # -- convenience -------------------------------------------------------

    def successors(self, nid: str) -> list[str]:
        return self._successors[nid]

    def stop_ops(self) -> list[str]:
        return [nid for nid in self.topo_order if self.nodes[nid].is_stop]

    def coupling_ops(self) -> list[str]:
        return [nid for nid in self.topo_order if self.nodes[nid].is_coupling]

    def clone(self) -> "ComputationGraph":
        g = parse_graph(serialize_graph(self))
        for name, t in self.params.items():
            g.params[name] = Tensor(t.data.copy())
        return g

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None


def init_params(graph: ComputationGraph, seed: int = 0) -> None:
    """He-style initialization for weights; norm scale 1, shifts 0."""
    rng = np.random.default_rng(seed)
    for name in sorted(graph.params):
        t = graph.params[name]
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(t.shape[1:])) or 1
            t.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape)
        elif kind == "value":
            t.data = rng.normal(0.0, 0.1, size=t.shape)
        elif kind == "gamma":
            t.data = np.ones(t.shape)
        else:
            t.data = np.zeros(t.shape)


# ---------------------------------------------------------------------------
# shape inference

def _one_input(graph: ComputationGraph, node: OpNode) -> OpNode:
    if len(node.inputs) != 1:
        raise GraphError(f"node '{node.id}' ({node.kind}) takes exactly one input")
    return graph.nodes[node.inputs[0]]


def _infer_shape(graph: ComputationGraph, node: OpNode) -> None:
    kind = node.kind
    if kind not in ALL_KINDS:
        raise GraphError(f"node '{node.id}': unknown op kind '{kind}'")
    a = node.attrs

    if kind == "input":
        if a.get("labels"):
            if "h" in a:
                node.shape_nb = (int(a["h"]), int(a["w"]))
            else:
                node.shape_nb = ()
            node.channel_axis = None
        elif "h" in a:
            node.shape_nb = (int(a["channels"]), int(a["h"]), int(a["w"]))
            node.channel_axis = 1
        else:
            node.shape_nb = (int(a["channels"]),)
            node.channel_axis = 1
        return

    if kind == "param":
        node.shape_nb = (int(a["channels"]),)
        node.channel_axis = 1
        return

    if kind == "linear":
        x = _one_input(graph, node)
        if x.channel_axis != len(x.shape_nb):
            raise GraphError(f"node '{node.id}': linear needs channel-last input")
        out = int(a["out"])
        node.shape_nb = x.shape_nb[:-1] + (out,)
        node.channel_axis = len(node.shape_nb)
        return

    if kind == "conv":
        x = _one_input(graph, node)
        if len(x.shape_nb) != 3 or x.channel_axis != 1:
            raise GraphError(f"node '{node.id}': conv needs an NCHW input")
        cin, h, w = x.shape_nb
        out = int(a["out"])
        k = int(a.get("k", 3))
        stride = int(a.get("stride", 1))
        pad = int(a.get("pad", k // 2))
        groups = int(a.get("groups", 1))
        if k > 5:
            raise GraphError(f"node '{node.id}': kernel sizes above 5 are unsupported")
        if cin % groups or out % groups:
            raise GraphError(f"node '{node.id}': channels ({cin}->{out}) not divisible "
                             f"by groups={groups}")
        if groups == cin and out != cin:
            raise GraphError(f"node '{node.id}': depthwise conv requires out == in "
                             f"channels, got {cin}->{out}")
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        if ho <= 0 or wo <= 0:
            raise GraphError(f"node '{node.id}': conv output would be empty")
        node.shape_nb = (out, ho, wo)
        node.channel_axis = 1
        return

    if kind in ("relu", "gelu", "norm", "softmax"):
        x = _one_input(graph, node)
        node.shape_nb = x.shape_nb
        node.channel_axis = x.channel_axis
        if kind == "norm" and len(x.shape_nb) < 2:
            raise GraphError(f"node '{node.id}': norm needs a spatial or token axis")
        if kind == "softmax" and float(a.get("temp", 1.0)) <= 0:
            raise GraphError(f"node '{node.id}': softmax temperature must be positive")
        return

    if kind == "pool":
        x = _one_input(graph, node)
        if len(x.shape_nb) != 3 or x.channel_axis != 1:
            raise GraphError(f"node '{node.id}': pool needs an NCHW input")
        c, h, w = x.shape_nb
        if a.get("kind", "avg") == "global":
            node.shape_nb = (c,)
            node.channel_axis = 1
        else:
            size = int(a.get("size", 2))
            if h % size or w % size:
                raise GraphError(f"node '{node.id}': pool size {size} does not divide "
                                 f"spatial dims {(h, w)}")
            node.shape_nb = (c, h // size, w // size)
            node.channel_axis = 1
        return

    if kind == "reshape":
        x = _one_input(graph, node)
        to = a.get("to")
        if to == "nlc":
            if len(x.shape_nb) != 3 or x.channel_axis != 1:
                raise GraphError(f"node '{node.id}': reshape to=nlc needs NCHW input")
            c, h, w = x.shape_nb
            node.shape_nb = (h * w, c)
            node.channel_axis = 2
        elif to == "nchw":
            if len(x.shape_nb) != 2 or x.channel_axis != 2:
                raise GraphError(f"node '{node.id}': reshape to=nchw needs NLC input")
            h, w = int(a["h"]), int(a["w"])
            l, c = x.shape_nb
            if l != h * w:
                raise GraphError(f"node '{node.id}': token count {l} != {h}x{w}")
            node.shape_nb = (c, h, w)
            node.channel_axis = 1
        else:
            raise GraphError(f"node '{node.id}': reshape needs to=nlc or to=nchw")
        return

    if kind == "transpose":
        x = _one_input(graph, node)
        perm = _parse_perm(node)
        if sorted(perm) != list(range(len(x.shape_nb) + 1)) or perm[0] != 0:
            raise GraphError(f"node '{node.id}': perm must permute non-batch axes, "
                             f"got {perm}")
        node.shape_nb = tuple(x.shape_nb[p - 1] for p in perm[1:])
        if x.channel_axis is None:
            node.channel_axis = None
        else:
            node.channel_axis = perm.index(x.channel_axis)
        return

    if kind == "add":
        if len(node.inputs) < 2:
            raise GraphError(f"node '{node.id}': add needs at least two inputs")
        first = graph.nodes[node.inputs[0]]
        for ref in node.inputs[1:]:
            other = graph.nodes[ref]
            if other.out_channels != first.out_channels:
                raise GraphError(
                    f"node '{node.id}': channel mismatch at add: "
                    f"'{node.inputs[0]}' has {first.out_channels}, "
                    f"'{ref}' has {other.out_channels}")
            if other.shape_nb != first.shape_nb:
                raise GraphError(f"node '{node.id}': shape mismatch at add: "
                                 f"{first.shape_nb} vs {other.shape_nb}")
        node.shape_nb = first.shape_nb
        node.channel_axis = first.channel_axis
        return

    if kind == "matmul":
        if len(node.inputs) != 2:
            raise GraphError(f"node '{node.id}': matmul takes exactly two inputs")
        x, y = (graph.nodes[r] for r in node.inputs)
        if len(x.shape_nb) != 2 or len(y.shape_nb) != 2:
            raise GraphError(f"node '{node.id}': matmul expects token-layout (NLC) inputs")
        la, ca = x.shape_nb
        lb, cb = y.shape_nb
        if a.get("transpose_b"):
            if ca != cb:
                raise GraphError(f"node '{node.id}': channel mismatch at matmul: "
                                 f"contracted dims {ca} vs {cb}")
            node.shape_nb = (la, lb)
        else:
            if ca != lb:
                raise GraphError(f"node '{node.id}': channel mismatch at matmul: "
                                 f"contracted dims {ca} vs {lb}")
            node.shape_nb = (la, cb)
        node.channel_axis = 2
        return

    if kind == "concat":
        if len(node.inputs) < 2:
            raise GraphError(f"node '{node.id}': concat needs at least two inputs")
        ins = [graph.nodes[r] for r in node.inputs]
        ax = ins[0].channel_axis
        for other in ins[1:]:
            if other.channel_axis != ax or len(other.shape_nb) != len(ins[0].shape_nb):
                raise GraphError(f"node '{node.id}': concat inputs must share layout")
            rest = [d for i, d in enumerate(other.shape_nb, 1) if i != ax]
            rest0 = [d for i, d in enumerate(ins[0].shape_nb, 1) if i != ax]
            if rest != rest0:
                raise GraphError(f"node '{node.id}': concat non-channel dims differ")
        total = sum(n.out_channels for n in ins)
        shape = list(ins[0].shape_nb)
        shape[ax - 1] = total
        node.shape_nb = tuple(shape)
        node.channel_axis = ax
        return

    if kind == "output":
        x = _one_input(graph, node)
        node.shape_nb = x.shape_nb
        node.channel_axis = x.channel_axis
        return

    if kind == "loss":
        if len(node.inputs) != 2:
            raise GraphError(f"node '{node.id}': loss takes (logits, labels)")
        node.shape_nb = ()
        node.channel_axis = None
        return


def _parse_perm(node: OpNode) -> list[int]:
    raw = str(node.attrs.get("perm", ""))
    digits = [ch for ch in raw if ch.isdigit()]
    if not digits:
        raise GraphError(f"node '{node.id}': transpose needs perm attribute")
    return [int(ch) for ch in digits]


def _param_shapes(graph: ComputationGraph, node: OpNode):
    if node.kind == "linear":
        cin = graph.nodes[node.inputs[0]].out_channels
        out = int(node.attrs["out"])
        yield "weight", (out, cin)
        if node.attrs.get("bias", 1):
            yield "bias", (out,)
    elif node.kind == "conv":
        cin = graph.nodes[node.inputs[0]].out_channels
        out = int(node.attrs["out"])
        k = int(node.attrs.get("k", 3))
        groups = int(node.attrs.get("groups", 1))
        yield "weight", (out, cin // groups, k, k)
        if node.attrs.get("bias", 1):
            yield "bias", (out,)
    elif node.kind == "norm":
        c = node.out_channels
        yield "gamma", (c,)
        yield "beta", (c,)
    elif node.kind == "param":
        yield "value", (int(node.attrs["channels"]),)


# ---------------------------------------------------------------------------
# parsing / serialization

_LINE_RE = re.compile(r"^(\w+)\s*=\s*(\w+)\s*\(([^)]*)\)\s*(?:\{(.*)\})?\s*$")


def _parse_attr_value(raw: str):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_graph(text: str) -> ComputationGraph:
    """Parse the one-node-per-line graph description into a validated graph."""
    nodes: dict[str, OpNode] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise ParseError(f"line {lineno}: cannot parse '{line}'")
        nid, kind, args, attrs_raw = m.groups()
        if kind not in ALL_KINDS:
            raise ParseError(f"line {lineno}: node '{nid}': unknown op kind '{kind}'")
        if nid in nodes:
            raise ParseError(f"line {lineno}: duplicate node id '{nid}'")
        inputs = [s.strip() for s in args.split(",") if s.strip()]
        attrs = {}
        if attrs_raw:
            for pair in attrs_raw.split(","):
                if not pair.strip():
                    continue
                if "=" not in pair:
                    raise ParseError(f"line {lineno}: bad attribute '{pair.strip()}'")
                k, v = pair.split("=", 1)
                attrs[k.strip()] = _parse_attr_value(v)
        nodes[nid] = OpNode(id=nid, kind=kind, inputs=inputs, attrs=attrs)
    if not nodes:
        raise ParseError("empty graph document")
    try:
        return ComputationGraph(nodes)
    except GraphError:
        raise
    except Exception as e:  # surface inference errors with context
        raise GraphError(str(e)) from e


def _format_attr(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_graph(graph: ComputationGraph) -> str:
    """Deterministic text form: topological node order, key-sorted attributes."""
    lines = []
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        args = ", ".join(node.inputs)
        line = f"{nid} = {node.kind}({args})"
        if node.attrs:
            inner = ", ".join(f"{k}={_format_attr(node.attrs[k])}"
                              for k in sorted(node.attrs))
            line += " {" + inner + "}"
        lines.append(line)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# execution

def execute(graph: ComputationGraph, inputs: dict, record_gradients: bool = False,
            node_masks: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """Run the graph on named input arrays, returning sink and output values.

    ``node_masks`` maps node ids to 0/1 channel vectors; masked channels are
    multiplied out along the node's channel axis (the gated forward used
    during pruning).
    """
    if record_gradients:
        return _execute(graph, inputs, node_masks)
    with T.no_grad():
        return _execute(graph, inputs, node_masks)


def _execute(graph, inputs, node_masks):
    values: dict[str, Tensor] = {}
    labels: dict[str, np.ndarray] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        kind = node.kind
        if kind == "input":
            if nid not in inputs:
                raise GraphError(f"missing graph input '{nid}'")
            raw = inputs[nid]
            if node.attrs.get("labels"):
                labels[nid] = np.asarray(raw)
                continue
            val = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64))
            expect = node.shape_nb
            if val.shape[1:] != expect:
                raise GraphError(f"input '{nid}' shape {val.shape} does not match "
                                 f"declared {('N',) + expect}")
        elif kind == "param":
            val = graph.params[f"{nid}.value"]
        elif kind == "linear":
            x = values[node.inputs[0]]
            w = graph.params[f"{nid}.weight"]
            val = T.matmul(x, T.transpose(w, (1, 0)))
            if f"{nid}.bias" in graph.params:
                val = T.add(val, graph.params[f"{nid}.bias"])
        elif kind == "conv":
            x = values[node.inputs[0]]
            w = graph.params[f"{nid}.weight"]
            b = graph.params.get(f"{nid}.bias")
            val = T.conv2d(x, w, b,
                           stride=int(node.attrs.get("stride", 1)),
                           padding=int(node.attrs.get("pad", int(node.attrs.get("k", 3)) // 2)),
                           groups=int(node.attrs.get("groups", 1)))
        elif kind == "relu":
            val = T.relu(values[node.inputs[0]])
        elif kind == "gelu":
            val = T.gelu(values[node.inputs[0]])
        elif kind == "norm":
            x = values[node.inputs[0]]
            val = T.channel_norm(x, graph.params[f"{nid}.gamma"],
                                 graph.params[f"{nid}.beta"], node.channel_axis)
        elif kind == "softmax":
            val = T.softmax(values[node.inputs[0]],
                            axis=int(node.attrs.get("axis", -1)),
                            temperature=float(node.attrs.get("temp", 1.0)))
        elif kind == "pool":
            x = values[node.inputs[0]]
            if node.attrs.get("kind", "avg") == "global":
                val = T.global_avg_pool(x)
            else:
                val = T.avg_pool2d(x, int(node.attrs.get("size", 2)))
        elif kind == "reshape":
            x = values[node.inputs[0]]
            if node.attrs["to"] == "nlc":
                n = x.shape[0]
                c, h, w = graph.nodes[node.inputs[0]].shape_nb
                val = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
            else:
                n = x.shape[0]
                h, w = int(node.attrs["h"]), int(node.attrs["w"])
                c = x.shape[2]
                val = T.transpose(T.reshape(x, (n, h, w, c)), (0, 3, 1, 2))
        elif kind == "transpose":
            val = T.transpose(values[node.inputs[0]], tuple(_parse_perm(node)))
        elif kind == "add":
            val = values[node.inputs[0]]
            for ref in node.inputs[1:]:
                val = T.add(val, values[ref])
        elif kind == "matmul":
            x = values[node.inputs[0]]
            y = values[node.inputs[1]]
            if node.attrs.get("transpose_b"):
                y = T.transpose(y, (0, 2, 1))
            val = T.matmul(x, y)
            scale = node.attrs.get("scale")
            if scale is not None:
                val = T.mul(val, Tensor(float(scale)))
        elif kind == "concat":
            ax = node.channel_axis
            val = T.concat([values[r] for r in node.inputs], axis=ax)
        elif kind == "output":
            val = values[node.inputs[0]]
        elif kind == "loss":
            logits_node = graph.nodes[node.inputs[0]]
            logits = values[node.inputs[0]]
            if not np.isfinite(logits.data).all():
                raise NumericalError(f"non-finite values reached loss node '{nid}'")
            target = labels.get(node.inputs[1])
            if target is None:
                raise GraphError(f"loss node '{nid}': labels input "
                                 f"'{node.inputs[1]}' not provided")
            val = T.cross_entropy(logits, target, class_axis=logits_node.channel_axis)
            if not np.isfinite(val.data).all():
                raise NumericalError(f"non-finite loss at node '{nid}'")
        else:
            raise GraphError(f"node '{nid}': unknown op kind '{kind}'")

        if val.shape[1:] != node.shape_nb:
            raise GraphError(f"node '{nid}': runtime shape {val.shape[1:]} does not "
                             f"match declared {node.shape_nb}")
        if node_masks and nid in node_masks and node.channel_axis is not None:
            mvec = node_masks[nid]
            shape = [1] * (len(node.shape_nb) + 1)
            shape[node.channel_axis] = len(mvec)
            val = T.mul(val, Tensor(np.asarray(mvec, dtype=np.float64).reshape(shape)))
        values[nid] = val
    return {nid: values[nid] for nid in graph.named_outputs}


# ---------------------------------------------------------------------------
# compaction

def compact(graph: ComputationGraph, masks: dict[str, np.ndarray]) -> ComputationGraph:
    """Physically remove masked channels, returning a new dense graph.

    ``masks`` maps stop-op ids to 0/1 vectors over their output channels.
    The forward of the result equals the gated forward of the original.
    """
    keep: dict[str, np.ndarray | None] = {}
    new_attrs: dict[str, dict] = {}
    new_params: dict[str, np.ndarray] = {}

    for nid in graph.topo_order:
        node = graph.nodes[nid]
        kind = node.kind
        kin = [keep.get(r) for r in node.inputs]

        if kind == "input" or kind == "param":
            keep[nid] = None if node.channel_axis is None else np.arange(node.out_channels)
            if kind == "param":
                new_params[f"{nid}.value"] = graph.params[f"{nid}.value"].data.copy()
            continue

        if kind == "linear":
            k_in = _keep_or_all(kin[0], graph.nodes[node.inputs[0]].out_channels)
            k_out = _stop_keep(node, masks)
            w = graph.params[f"{nid}.weight"].data
            new_params[f"{nid}.weight"] = w[np.ix_(k_out, k_in)].copy()
            if f"{nid}.bias" in graph.params:
                new_params[f"{nid}.bias"] = graph.params[f"{nid}.bias"].data[k_out].copy()
            new_attrs[nid] = dict(node.attrs, out=len(k_out))
            keep[nid] = k_out
            continue

        if kind == "conv":
            cin = graph.nodes[node.inputs[0]].out_channels
            k_in = _keep_or_all(kin[0], cin)
            k_out = _stop_keep(node, masks)
            groups = int(node.attrs.get("groups", 1))
            w = graph.params[f"{nid}.weight"].data
            attrs = dict(node.attrs, out=len(k_out))
            if groups == 1:
                new_w = w[np.ix_(k_out, k_in)].copy()
            elif groups == cin:  # depthwise: in and out pruned in lockstep
                if not np.array_equal(k_in, k_out):
                    raise GraphError(
                        f"node '{nid}': depthwise conv masks inconsistent within "
                        f"its coupling group")
                new_w = w[k_out].copy()
                attrs["groups"] = len(k_out)
            else:
                new_w = _slice_grouped_weight(nid, w, groups, cin, k_in, k_out)
                attrs["groups"] = groups
            new_params[f"{nid}.weight"] = new_w
            if f"{nid}.bias" in graph.params:
                new_params[f"{nid}.bias"] = graph.params[f"{nid}.bias"].data[k_out].copy()
            new_attrs[nid] = attrs
            keep[nid] = k_out
            continue

        if kind == "norm":
            k_in = kin[0]
            sel = _keep_or_all(k_in, node.out_channels)
            new_params[f"{nid}.gamma"] = graph.params[f"{nid}.gamma"].data[sel].copy()
            new_params[f"{nid}.beta"] = graph.params[f"{nid}.beta"].data[sel].copy()
            keep[nid] = k_in
            continue

        if kind == "add":
            base = kin[0]
            for ref, k in zip(node.inputs[1:], kin[1:]):
                if not _keep_equal(base, k):
                    raise GraphError(
                        f"node '{nid}': masks inconsistent within coupling group: "
                        f"inputs '{node.inputs[0]}' and '{ref}' keep different channels")
            keep[nid] = base
            continue

        if kind == "matmul":
            if node.attrs.get("transpose_b"):
                if not _keep_equal(kin[0], kin[1]):
                    raise GraphError(
                        f"node '{nid}': masks inconsistent within coupling group: "
                        f"matmul contracted channels differ between inputs")
                keep[nid] = None
            else:
                ca = graph.nodes[node.inputs[0]].out_channels
                if kin[0] is not None and len(kin[0]) != ca:
                    raise GraphError(
                        f"node '{nid}': cannot prune the contracted axis of input "
                        f"'{node.inputs[0]}' against an unpruned token axis")
                keep[nid] = kin[1]
            continue

        if kind == "concat":
            parts = []
            offset = 0
            for ref, k in zip(node.inputs, kin):
                c = graph.nodes[ref].out_channels
                parts.append(offset + _keep_or_all(k, c))
                offset += c
            keep[nid] = np.concatenate(parts)
            continue

        # remaining pass-throughs, sinks: channel identity is preserved
        keep[nid] = kin[0] if node.inputs else None

    # rebuild with updated attrs, then install sliced parameters
    lines = []
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        attrs = new_attrs.get(nid, node.attrs)
        args = ", ".join(node.inputs)
        line = f"{nid} = {node.kind}({args})"
        if attrs:
            inner = ", ".join(f"{k}={_format_attr(attrs[k])}" for k in sorted(attrs))
            line += " {" + inner + "}"
        lines.append(line)
    out = parse_graph("\n".join(lines) + "\n")
    for name, arr in new_params.items():
        if out.params[name].shape != arr.shape:
            raise GraphError(f"compaction produced inconsistent shape for '{name}': "
                             f"{arr.shape} vs expected {out.params[name].shape}")
        out.params[name] = Tensor(arr)
    return out


def _keep_or_all(k: np.ndarray | None, count: int) -> np.ndarray:
    return np.arange(count) if k is None else k


def _keep_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None and b is None:
        return True
    if a is None or b is None:
        return False
    return len(a) == len(b) and bool(np.all(a == b))


def _stop_keep(node: OpNode, masks: dict[str, np.ndarray]) -> np.ndarray:
    if node.id not in masks:
        return np.arange(node.out_channels)
    mask = np.asarray(masks[node.id])
    if mask.shape != (node.out_channels,):
        raise GraphError(f"node '{node.id}': mask length {mask.shape} does not match "
                         f"{node.out_channels} channels")
    k = np.flatnonzero(mask)
    if len(k) == 0:
        raise GraphError(f"node '{node.id}': mask would empty the layer to zero channels")
    return k


def _slice_grouped_weight(nid: str, w: np.ndarray, groups: int, cin: int,
                          k_in: np.ndarray, k_out: np.ndarray) -> np.ndarray:
    cout = w.shape[0]
    in_block, out_block = cin // groups, cout // groups
    blocks = []
    ref_in = None
    for gi in range(groups):
        sel_out = k_out[(k_out >= gi * out_block) & (k_out < (gi + 1) * out_block)]
        sel_in = k_in[(k_in >= gi * in_block) & (k_in < (gi + 1) * in_block)] - gi * in_block
        if ref_in is None:
            ref_in = len(sel_in)
            ref_out = len(sel_out)
        elif len(sel_in) != ref_in or len(sel_out) != ref_out:
            raise GraphError(
                f"node '{nid}': grouped conv masks must remove equal channel counts "
                f"per group; group {gi} diverges")
        blocks.append(w[np.ix_(sel_out - 0, sel_in)])
    return np.concatenate(blocks, axis=0).copy()
