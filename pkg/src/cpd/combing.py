"""Model-agnostic pruning dependency resolution.

For every stop op we follow the channel slice it emits through all
channel-preserving operations (pass-throughs, additions, concat slices and
the free side of matrix products). Stop ops block the flow. Every coupling
operation reached on a channel axis it constrains ties the producers
together; the transitive closure of that relation yields the coupling
groups whose output channels must be pruned in lockstep, together with the
consumer stop ops whose input channels shrink with them.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import ComputationGraph, GraphError, serialize_graph


class CombingError(GraphError):
    pass


@dataclass(frozen=True, order=True)
class Consumer:
    """A stop op whose input slot consumes the group's channels at `offset`."""
    op: str
    slot: int
    offset: int


@dataclass
class CouplingGroup:
    gid: int
    producers: tuple[str, ...]
    coupling_ops: tuple[str, ...]
    consumers: tuple[Consumer, ...]
    channels: int
    tile_blocks: int = 1          # channels prune in lockstep across this many blocks
    prunable: bool = True
    # channel slices of intermediate values carrying this group's channels;
    # internal (recomputable from the graph), not part of the wire format
    owned: tuple[tuple[str, int], ...] = ()
    riders: tuple[tuple[str, int], ...] = ()

    @property
    def unit_count(self) -> int:
        return self.channels // self.tile_blocks

    def unit_channels(self, unit: int) -> list[int]:
        """Concrete channel indices removed when pruning one unit."""
        size = self.channels // self.tile_blocks
        return [b * size + unit for b in range(self.tile_blocks)]


@dataclass
class PruningScheme:
    groups: list[CouplingGroup]
    graph_fingerprint: str
    _by_producer: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_producer = {p: g.gid for g in self.groups for p in g.producers}

    def group_of(self, producer: str) -> CouplingGroup:
        return self.groups[self._by_producer[producer]]

    def prunable_groups(self) -> list[CouplingGroup]:
        return [g for g in self.groups if g.prunable]


@dataclass
class MaskViolation:
    group: int
    channels: list[int]
    message: str


def graph_fingerprint(graph: ComputationGraph) -> str:
    return hashlib.sha256(serialize_graph(graph).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# direct relations

def direct_successors(graph: ComputationGraph, node: str) -> set[str]:
    """Nodes reachable through pass-through-only paths, including the first
    non-pass-through node on each path."""
    if node not in graph.nodes:
        raise GraphError(f"unknown node '{node}'")
    out: set[str] = set()
    stack = [node]
    while stack:
        nid = stack.pop()
        for succ in graph.successors(nid):
            if succ in out:
                continue
            out.add(succ)
            if graph.nodes[succ].is_passthrough:
                stack.append(succ)
    return out


# ---------------------------------------------------------------------------
# channel-flow walk

@dataclass
class _WalkResult:
    couplings: set = field(default_factory=set)          # coupling op ids
    union_arrivals: set = field(default_factory=set)     # (kind, op_id, slot)
    consumers: set = field(default_factory=set)          # Consumer
    riders: set = field(default_factory=set)             # (norm id, offset)
    owned: set = field(default_factory=set)              # (node id, offset)
    links: set = field(default_factory=set)              # producer ids to merge with
    tiles: set = field(default_factory=set)              # required block counts
    frozen: bool = False
    frozen_why: str = ""

    def freeze(self, why: str) -> None:
        if not self.frozen:
            self.frozen = True
            self.frozen_why = why


def _matmul_contracted_axis(node, slot: int) -> int:
    if slot == 0:
        return 2
    return 2 if node.attrs.get("transpose_b") else 1


def _channel_walk(graph: ComputationGraph, start: str) -> _WalkResult:
    """Trace the channel slice emitted by `start` through the graph."""
    res = _WalkResult()
    origin = graph.nodes[start]
    channels = origin.out_channels
    seen: set[tuple] = set()
    stack: list[tuple[str, int, int]] = [(start, origin.channel_axis, 0)]
    while stack:
        nid, axis, off = stack.pop()
        if (nid, axis, off) in seen:
            continue
        seen.add((nid, axis, off))
        res.owned.add((nid, off))
        for sid in graph.successors(nid):
            succ = graph.nodes[sid]
            for slot, ref in enumerate(succ.inputs):
                if ref != nid:
                    continue
                kind = succ.kind
                if kind in ("linear", "conv"):
                    res.consumers.add(Consumer(sid, slot, off))
                    groups = int(succ.attrs.get("groups", 1))
                    cin = graph.nodes[succ.inputs[0]].out_channels
                    if kind == "conv" and groups > 1:
                        if groups == cin:
                            # depthwise: output channels mirror the input slice
                            res.links.add(sid)
                        else:
                            res.tiles.add(groups)
                elif kind in ("relu", "gelu", "softmax"):
                    stack.append((sid, axis, off))
                elif kind == "norm":
                    res.riders.add((sid, off))
                    stack.append((sid, axis, off))
                elif kind == "pool":
                    stack.append((sid, 1, off))
                elif kind == "reshape":
                    if succ.attrs.get("to") == "nlc" and axis == 1:
                        stack.append((sid, 2, off))
                    elif succ.attrs.get("to") == "nchw" and axis == 2:
                        stack.append((sid, 1, off))
                    else:
                        res.freeze(f"untrackable reshape at '{sid}'")
                elif kind == "transpose":
                    perm = [int(ch) for ch in str(succ.attrs.get("perm", "")) if ch.isdigit()]
                    stack.append((sid, perm.index(axis), off))
                elif kind == "add":
                    res.couplings.add(sid)
                    res.union_arrivals.add(("add", sid, slot))
                    if off != 0 or channels != succ.out_channels:
                        res.freeze(f"partial channel slice meets add '{sid}'")
                    stack.append((sid, axis, off))
                elif kind == "concat":
                    res.couplings.add(sid)
                    new_off = off
                    for j in range(slot):
                        new_off += graph.nodes[succ.inputs[j]].out_channels
                    stack.append((sid, succ.channel_axis, new_off))
                elif kind == "matmul":
                    contracted = _matmul_contracted_axis(succ, slot)
                    if axis == contracted:
                        res.couplings.add(sid)
                        res.union_arrivals.add(("matmul", sid, slot))
                        if off != 0:
                            res.freeze(f"partial channel slice contracted at '{sid}'")
                    else:
                        out_axis = 1 if slot == 0 else 2
                        stack.append((sid, out_axis, off))
                elif kind == "output":
                    res.freeze(f"feeds task output '{sid}'")
                elif kind == "loss":
                    if slot == 0:
                        res.freeze(f"feeds loss node '{sid}'")
                else:
                    res.freeze(f"untrackable op '{sid}'")
    return res


def following_couplings(graph: ComputationGraph, stop_op: str) -> set[str]:
    """Coupling ops that constrain the given stop op's output channels."""
    node = graph.nodes.get(stop_op)
    if node is None or not node.is_stop:
        raise GraphError(f"'{stop_op}' is not a stop op")
    return set(_channel_walk(graph, stop_op).couplings)


# ---------------------------------------------------------------------------
# group construction

class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_coupling_groups(graph: ComputationGraph) -> PruningScheme:
    """Partition all stop ops into coupling groups (Eq. 2 closed transitively)."""
    producers = graph.stop_ops()
    # graph inputs and free parameters emit frozen channel slices: anything
    # coupled to them can never be pruned
    pseudo = [nid for nid in graph.topo_order
              if graph.nodes[nid].kind in ("input", "param")
              and graph.nodes[nid].channel_axis is not None]
    walks = {nid: _channel_walk(graph, nid) for nid in producers + pseudo}

    uf = _UnionFind(producers + pseudo)
    arrivals: dict[tuple, dict[int, list[str]]] = {}
    for nid, res in walks.items():
        for kind, op, slot in res.union_arrivals:
            arrivals.setdefault((kind, op), {}).setdefault(slot, []).append(nid)
        for linked in res.links:
            uf.union(nid, linked)
    frozen_extra: set[str] = set()
    for (kind, op), by_slot in arrivals.items():
        members = [m for ms in by_slot.values() for m in ms]
        for m in members[1:]:
            uf.union(members[0], m)
        expected = 2 if kind == "matmul" else len(graph.nodes[op].inputs)
        if len(by_slot) < expected:
            # a coupled partner carries no prunable channels (e.g. a token
            # axis): the arriving producers can never shrink consistently
            frozen_extra.update(members)

    components: dict[str, list[str]] = {}
    for nid in producers + pseudo:
        components.setdefault(uf.find(nid), []).append(nid)

    raw_groups = []
    for members in components.values():
        prod = sorted(m for m in members if m in set(producers))
        if not prod:
            continue
        frozen = any(m not in set(producers) for m in members)
        why = "coupled to a graph input" if frozen else ""
        counts = {graph.nodes[p].out_channels for p in prod}
        if len(counts) > 1:
            raise CombingError(
                "conflicting channel counts inside a forced group: "
                + ", ".join(f"'{p}'={graph.nodes[p].out_channels}" for p in prod))
        couplings: set[str] = set()
        consumers: set[Consumer] = set()
        owned: set[tuple[str, int]] = set()
        riders: set[tuple[str, int]] = set()
        tiles: set[int] = {1}
        for m in members:
            res = walks[m]
            couplings |= res.couplings
            tiles |= res.tiles
            if m in set(producers):
                consumers |= res.consumers
                owned |= res.owned
                riders |= res.riders
                if res.frozen:
                    frozen, why = True, res.frozen_why
                if m in frozen_extra:
                    frozen = True
                    why = why or "coupled against an unprunable axis"
            elif res.frozen or m in frozen_extra:
                pass  # pseudo sources are frozen by membership already
        channels = counts.pop()
        tile = 1
        for t in sorted(tiles):
            tile = tile * t // math.gcd(tile, t)
        for p in prod:
            node = graph.nodes[p]
            g = int(node.attrs.get("groups", 1))
            if node.kind == "conv" and 1 < g < channels:
                tile = tile * g // math.gcd(tile, g)
            h = int(node.attrs.get("heads", 1))
            if h > 1:
                tile = tile * h // math.gcd(tile, h)
        if channels % tile:
            raise CombingError(
                f"group {prod}: tile constraint {tile} does not divide "
                f"{channels} channels")
        raw_groups.append(CouplingGroup(
            gid=-1,
            producers=tuple(prod),
            coupling_ops=tuple(sorted(couplings)),
            consumers=tuple(sorted(consumers)),
            channels=channels,
            tile_blocks=tile,
            prunable=not frozen,
            owned=tuple(sorted(owned)),
            riders=tuple(sorted(riders)),
        ))

    raw_groups.sort(key=lambda g: g.producers[0])
    groups = [CouplingGroup(gid=i, producers=g.producers, coupling_ops=g.coupling_ops,
                            consumers=g.consumers, channels=g.channels,
                            tile_blocks=g.tile_blocks, prunable=g.prunable,
                            owned=g.owned, riders=g.riders)
              for i, g in enumerate(raw_groups)]
    return PruningScheme(groups=groups, graph_fingerprint=graph_fingerprint(graph))


# ---------------------------------------------------------------------------
# masks

def validate_masks(scheme: PruningScheme, masks: dict[str, np.ndarray]) -> list[MaskViolation]:
    """Empty list iff every group's producers share identical channel masks."""
    violations = []
    for group in scheme.groups:
        missing = [p for p in group.producers if p not in masks]
        if missing:
            raise ValueError(f"masks missing for producers {missing}")
        base_p = group.producers[0]
        base = np.asarray(masks[base_p])
        for p in group.producers[1:]:
            m = np.asarray(masks[p])
            diff = np.flatnonzero(base != m)
            if diff.size:
                violations.append(MaskViolation(
                    group.gid, diff.tolist(),
                    f"producers '{base_p}' and '{p}' diverge at channels {diff.tolist()}"))
        if group.tile_blocks > 1:
            size = group.channels // group.tile_blocks
            for r in range(size):
                unit = group.unit_channels(r)
                vals = base[unit]
                if not np.all(vals == vals[0]):
                    violations.append(MaskViolation(
                        group.gid, unit,
                        f"unit {r} must prune channels {unit} together"))
    return violations


def group_gates_to_masks(scheme: PruningScheme,
                         gates: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Expand per-group gate vectors into per-producer masks."""
    masks = {}
    for group in scheme.groups:
        gv = gates.get(group.gid)
        if gv is None:
            gv = np.ones(group.channels)
        for p in group.producers:
            masks[p] = np.asarray(gv, dtype=np.float64)
    return masks


def node_gate_vectors(graph: ComputationGraph, scheme: PruningScheme,
                      gates: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-node channel masks for the gated forward pass."""
    out: dict[str, np.ndarray] = {}
    for group in scheme.groups:
        gv = gates.get(group.gid)
        if gv is None or np.all(gv == 1):
            continue
        for nid, off in group.owned:
            node = graph.nodes[nid]
            vec = out.setdefault(nid, np.ones(node.out_channels))
            vec[off:off + group.channels] *= gv
    return out


def sample_masks(scheme: PruningScheme, rng: np.random.Generator,
                 max_fraction: float = 0.5) -> dict[str, np.ndarray]:
    """Random scheme-consistent masks (testing aid); keeps >= 1 unit per group."""
    gates = {}
    for group in scheme.groups:
        gv = np.ones(group.channels)
        if group.prunable:
            units = group.unit_count
            n_prune = int(rng.integers(0, max(1, int(units * max_fraction)) + 1))
            n_prune = min(n_prune, units - 1)
            for r in rng.choice(units, size=n_prune, replace=False):
                gv[group.unit_channels(int(r))] = 0.0
        gates[group.gid] = gv
    return group_gates_to_masks(scheme, gates)


# ---------------------------------------------------------------------------
# serialization (the comb -> prune wire format)

def scheme_to_json(scheme: PruningScheme) -> str:
    doc = {
        "fingerprint": scheme.graph_fingerprint,
        "groups": [
            {
                "id": g.gid,
                "producers": list(g.producers),
                "coupling_ops": list(g.coupling_ops),
                "consumers": [
                    {"op": c.op, "slot": c.slot,
                     "slice": [c.offset, c.offset + g.channels]}
                    for c in g.consumers
                ],
                "channels": g.channels,
                "tile_blocks": g.tile_blocks,
                "prunable": g.prunable,
            }
            for g in scheme.groups
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def scheme_from_json(text: str, graph: ComputationGraph) -> PruningScheme:
    """Load a serialized scheme, verifying it matches the graph.

    The internal channel-flow annotations are recomputed from the graph;
    the loaded document must agree with them.
    """
    doc = json.loads(text)
    rebuilt = build_coupling_groups(graph)
    if doc.get("fingerprint") != rebuilt.graph_fingerprint:
        raise CombingError("scheme fingerprint does not match the graph")
    if scheme_to_json(rebuilt) != scheme_to_json(PruningScheme(
            groups=rebuilt.groups, graph_fingerprint=doc["fingerprint"])):
        raise CombingError("scheme document does not match the graph's groups")
    got = {(g["id"], tuple(g["producers"])) for g in doc["groups"]}
    want = {(g.gid, g.producers) for g in rebuilt.groups}
    if got != want:
        raise CombingError("scheme document does not match the graph's groups")
    return rebuilt
