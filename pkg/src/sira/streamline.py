from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Set, Tuple

import numpy as np

from .analysis import RangeMap, analyze
from .errors import StreamlineError
from .graph import (ELEMENTWISE_BINARY, MAC_OPS, Graph, NodeSpec, TensorInfo, lower, prune_unused,
                    topo_order, validate_graph)
from .interpreter import _execute_node, is_batchable, run_samples, sample_inputs
from .interval import ScaledIntRange, broadcast_shapes, compact, is_integral
from .log import get_logger

logger = get_logger(__name__)

POLICIES = ("activation-feeding", "latest", "earliest")
ACTIVATIONS = ("Relu", "Quant", "MultiThreshold")
SOURCES = ("Quant", "MultiThreshold")
LINEAR = ELEMENTWISE_BINARY + MAC_OPS


@dataclass(frozen=True)
class TargetSelection:
    """Target tensor and the linear region whose scales and biases it collects"""
    target_tensor: str
    region_nodes: FrozenSet[int]
    contributors: FrozenSet[str] = frozenset()
    scale: Optional[np.ndarray] = field(default=None, compare=False)
    bias: Optional[np.ndarray] = field(default=None, compare=False)


def _single_dynamic(g: Graph, node: NodeSpec) -> Optional[str]:
    dynamic = [n for n in node.inputs if not g.is_constant(n)]
    return dynamic[0] if len(dynamic) == 1 else None


def _param(g: Graph, node: NodeSpec) -> Optional[str]:
    constants = [n for n in node.inputs if g.is_constant(n)]
    return constants[0] if len(constants) == 1 else None


def make_quant_scaling_explicit(g: Graph) -> Graph:
    """Quant(x; s, z) -> Div(x, s) [-> Add(z)] -> Quant(1, 0) [-> Add(-z)] -> Mul(s)"""
    out = g.clone()
    nodes: List[NodeSpec] = []
    rewritten = 0
    for node in g.nodes:
        if node.op != "Quant":
            nodes.append(node)
            continue
        x, s, z = node.inputs
        if not (g.is_constant(s) and g.is_constant(z)):
            nodes.append(node)
            continue
        s_val, z_val = g.constant(s), g.constant(z)
        if np.all(s_val == 1.0) and np.all(z_val == 0.0):
            nodes.append(node)
            continue

        y = node.output
        shape = g.shape(y)
        cur = out.add_tensor(f"{y}_div", shape)
        nodes.append(NodeSpec("Div", (x, out.add_constant(f"{s}_in", s_val)), (cur,)))
        shifted = np.any(z_val != 0.0)
        if shifted:
            nxt = out.add_tensor(f"{y}_shift", shape)
            nodes.append(NodeSpec("Add", (cur, out.add_constant(f"{z}_in", z_val)), (nxt,)))
            cur = nxt
        q = out.add_tensor(f"{y}_int", shape)
        unit = out.add_constant(f"{y}_unit_scale", np.ones(1))
        zero = out.add_constant(f"{y}_zero_point", np.zeros(1))
        nodes.append(NodeSpec("Quant", (cur, unit, zero), (q,), node.attrs))
        cur = q
        if shifted:
            nxt = out.add_tensor(f"{y}_centered", shape)
            nodes.append(NodeSpec("Add", (cur, out.add_constant(f"{z}_out", -z_val)), (nxt,)))
            cur = nxt
        nodes.append(NodeSpec("Mul", (cur, out.add_constant(f"{s}_out", s_val)), (y,)))
        rewritten += 1

    out.nodes = nodes
    if rewritten:
        prune_unused(out)
        logger.info("made scaling explicit around %d quantizer(s)", rewritten)
    return out


def _duplicate_forks(out: Graph) -> int:
    """Clone Add/Sub/Mul/Div-by-constant nodes per consumer of their output."""
    cloned = 0
    changed = True
    while changed:
        changed = False
        consumers = out.consumer_map()
        for i, node in enumerate(out.nodes):
            if node.op not in ELEMENTWISE_BINARY or _single_dynamic(out, node) is None:
                continue
            y = node.output
            users = consumers.get(y, [])
            is_output = y in out.outputs
            if len(users) + int(is_output) < 2:
                continue
            clones = []
            for j in (users if is_output else users[1:]):
                y2 = out.add_tensor(f"{y}_dup", out.shape(y))
                clones.append(NodeSpec(node.op, node.inputs, (y2,), node.attrs))
                user = out.nodes[j]
                out.replace_node(j, inputs=tuple(y2 if n == y else n for n in user.inputs))
            out.nodes[i + 1:i + 1] = clones
            cloned += len(clones)
            changed = True
            break
    return cloned


def duplicate_shared_params(g: Graph) -> Graph:
    """Give every constant parameter exactly one consumer.

    Elementwise nodes whose output branches are cloned per branch first, then
    each further consumer of a shared constant gets its own copy.
    """
    out = g.clone()
    cloned = _duplicate_forks(out)

    copies = 0
    for name, users in out.consumer_map().items():
        if not out.is_constant(name) or len(users) < 2:
            continue
        data = out.constant(name)
        for j in users[1:]:
            copy = out.add_constant(f"{name}_dup", data)
            user = out.nodes[j]
            out.replace_node(j, inputs=tuple(copy if n == name else n for n in user.inputs))
            copies += 1

    if cloned or copies:
        logger.info("duplicated %d branch node(s) and %d shared parameter(s)", cloned, copies)
    return out


def _identity_value(g: Graph, name: str, consumers: Mapping[str, List[int]]) -> Optional[float]:
    users = consumers.get(name, [])
    if len(users) != 1:
        return None
    node = g.nodes[users[0]]
    if node.op in ("Mul", "Div"):
        return 1.0 if node.op == "Mul" or node.inputs[1] == name else None
    if node.op in ("Add", "Sub"):
        return 0.0
    if node.op == "Quant":
        if node.inputs[1] == name:
            return 1.0
        if node.inputs[2] == name:
            return 0.0
    return None


def _is_identity(g: Graph, name: str, consumers) -> bool:
    value = _identity_value(g, name, consumers)
    return value is not None and bool(np.all(g.constant(name) == value))


class ScaleBiasAggregator:
    """Moves the scales and biases of each linear region into one Mul and one
    Add in front of a target tensor, leaving integer MatMul/Conv kernels.
    """

    def __init__(self, policy: str = "activation-feeding"):
        if policy not in POLICIES:
            raise StreamlineError(f"unknown target policy '{policy}', expected one of {list(POLICIES)}")
        self.policy = policy
        self.aggregated: List[TargetSelection] = []
        self.skipped: Dict[str, str] = {}

    def _is_candidate(self, g: Graph, name: str, node: NodeSpec, users: List[NodeSpec]) -> bool:
        if self.policy == "earliest":
            return node.op in MAC_OPS
        feeds_activation = any(u.op in ACTIVATIONS and u.inputs[0] == name for u in users)
        if self.policy == "activation-feeding":
            return feeds_activation
        feeds_join = any(
            u.op in ("Add", "Sub") and _single_dynamic(g, u) is None for u in users
        )
        return feeds_activation or feeds_join or name in g.outputs or not users

    def candidates(self, g: Graph, ranges: RangeMap) -> List[str]:
        consumers = g.consumer_map()
        found = []
        for i in topo_order(g):
            node = g.nodes[i]
            name = node.output
            if node.op not in LINEAR:
                continue
            r = ranges.get(name)
            if r is None or not r.is_scaled_int:
                continue
            users = [g.nodes[j] for j in consumers.get(name, [])]
            if self._is_candidate(g, name, node, users):
                found.append(name)
        return found

    def region(self, g: Graph, ranges: RangeMap, target: str) -> Tuple[Optional[TargetSelection], str]:
        """Walk back from ``target`` through linear nodes; returns (selection, reason)."""
        producers = g.producers()
        consumers = g.consumer_map()
        nodes: Set[int] = set()
        sources: Set[int] = set()
        stack, seen = [target], set()
        while stack:
            t = stack.pop()
            if t in seen or g.is_constant(t):
                continue
            seen.add(t)
            p = producers.get(t)
            if p is None:
                continue
            node = g.nodes[p]
            if node.op in SOURCES:
                nodes.add(p)
                sources.add(p)
                continue
            if node.op not in LINEAR:
                continue
            dynamic = [n for n in node.inputs if not g.is_constant(n)]
            if len(dynamic) == 2 and node.op in ("Add", "Sub"):
                ra, rb = ranges[dynamic[0]], ranges[dynamic[1]]
                if not (ra.is_scaled_int and rb.is_scaled_int):
                    return None, "region joins an input without scale"
                sa, sb = np.broadcast_arrays(np.abs(ra.scale), np.abs(rb.scale))
                if not np.allclose(sa, sb, rtol=1e-12, atol=0.0):
                    return None, "region joins branches with different scales"
            elif len(dynamic) == 2 and node.op in ("Mul", "Div"):
                return None, "region contains a product of two dynamic tensors"
            nodes.add(p)
            stack.extend(dynamic)

        if not sources:
            return None, "region has no quantizer feeding it"
        r = ranges[target]
        params = {n for i in nodes for n in g.nodes[i].inputs if g.is_constant(n)}
        outside = set(r.contributors) - params
        if outside:
            return None, f"contributors outside the region: {sorted(outside)}"
        for c in r.contributors:
            if _identity_value(g, c, consumers) is None:
                return None, f"contributor '{c}' has no unique identity role"
        for i in sources:
            for c in g.nodes[i].inputs[1:]:
                if g.nodes[i].op == "Quant" and not _is_identity(g, c, consumers):
                    return None, "quantizer scaling is not explicit"
        return TargetSelection(target, frozenset(nodes), frozenset(r.contributors),
                               compact(r.scale), compact(r.bias)), ""

    @staticmethod
    def already_aggregated(g: Graph, sel: TargetSelection) -> bool:
        """True when only the final Mul -> Add in front of the target carries non-identity values."""
        consumers = g.consumer_map()
        producers = g.producers()
        active = {c for c in sel.contributors if not _is_identity(g, c, consumers)}
        allowed: Set[str] = set()
        node = g.nodes[producers[sel.target_tensor]]
        if node.op == "Add" and _param(g, node) and _single_dynamic(g, node):
            allowed.add(_param(g, node))
            p = producers.get(_single_dynamic(g, node))
            node = g.nodes[p] if p is not None else None
        if node is not None and node.op == "Mul" and _param(g, node) and _single_dynamic(g, node):
            allowed.add(_param(g, node))
        return active <= allowed

    def _groups(self, selections: List[TargetSelection]) -> List[List[TargetSelection]]:
        groups: List[List[TargetSelection]] = []
        for sel in selections:
            merged = [grp for grp in groups if any(sel.region_nodes & other.region_nodes - self._sources
                                                   for other in grp)]
            group = [sel] + [s for grp in merged for s in grp]
            groups = [grp for grp in groups if grp not in merged] + [group]
        return groups

    def _group_problem(self, g: Graph, group: List[TargetSelection]) -> str:
        consumers = g.consumer_map()
        region = set().union(*(sel.region_nodes for sel in group)) - self._sources
        targets = {sel.target_tensor for sel in group}
        internal = {g.nodes[i].output for i in region} - targets
        for name in internal:
            if name in g.outputs:
                return f"region tensor '{name}' is a graph output"
            if any(j not in region for j in consumers.get(name, [])):
                return f"region tensor '{name}' is also consumed outside the region"
        for sel in group:
            inner = {g.nodes[i].output for i in sel.region_nodes - self._sources} - {sel.target_tensor}
            if inner & targets:
                return "targets nest inside each other's regions"
        return ""

    def run(self, g: Graph, ranges: RangeMap) -> Graph:
        self.aggregated, self.skipped = [], {}
        names = self.candidates(g, ranges)
        if not names:
            if any(node.op in MAC_OPS for node in g.nodes):
                raise StreamlineError("no target tensor found: no scaled linear region feeds an activation")
            logger.info("no linear regions to aggregate")
            return g.clone()

        self._sources = {i for i, node in enumerate(g.nodes) if node.op in SOURCES}
        selections = []
        for name in reversed(names):
            sel, reason = self.region(g, ranges, name)
            if sel is None:
                self.skipped[name] = reason
                logger.debug("target '%s' skipped: %s", name, reason)
                continue
            if not sel.contributors and not (np.all(sel.scale == 1.0) and np.all(sel.bias == 0.0)):
                raise StreamlineError(f"target '{name}' has scale/bias but an empty contributor set")
            selections.append(sel)

        out = g.clone()
        consumers = g.consumer_map()
        producers = g.producers()
        inserts: Dict[int, List[NodeSpec]] = {}
        for group in self._groups(selections):
            problem = self._group_problem(g, group)
            if problem:
                for sel in group:
                    self.skipped[sel.target_tensor] = problem
                    logger.debug("target '%s' skipped: %s", sel.target_tensor, problem)
                continue
            if all(self.already_aggregated(g, sel) for sel in group):
                for sel in group:
                    self.skipped[sel.target_tensor] = "already aggregated"
                continue
            for sel in group:
                t = sel.target_tensor
                p = producers[t]
                shape = g.shape(t)
                t_int = out.add_tensor(f"{t}_int", shape)
                out.replace_node(p, outputs=(t_int,))
                t_scaled = out.add_tensor(f"{t}_scaled", shape)
                scale = out.add_constant("aggr_scale", sel.scale)
                bias = out.add_constant("aggr_bias", sel.bias)
                inserts[p] = [
                    NodeSpec("Mul", (t_int, scale), (t_scaled,)),
                    NodeSpec("Add", (t_scaled, bias), (t,)),
                ]
                for c in sel.contributors:
                    out.set_constant(c, _identity_value(g, c, consumers))
                self.aggregated.append(sel)

        nodes: List[NodeSpec] = []
        for i, node in enumerate(out.nodes):
            nodes.append(node)
            nodes.extend(inserts.get(i, []))
        out.nodes = nodes

        out = remove_identity_ops(out)
        out = fold_constants(out)
        prune_unused(out)
        validate_graph(out)
        logger.info("aggregated %d target(s), skipped %d", len(self.aggregated), len(self.skipped))
        return out

    def report(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "aggregated": [
                {
                    "target": sel.target_tensor,
                    "scale": sel.scale.tolist(),
                    "bias": sel.bias.tolist(),
                    "region_size": len(sel.region_nodes),
                }
                for sel in self.aggregated
            ],
            "skipped": dict(self.skipped),
        }


def aggregate_scale_bias(g: Graph, ranges: RangeMap, policy: str = "activation-feeding") -> Graph:
    """Insert Mul(s_t) -> Add(b_t) before each target and erase its contributors."""
    return ScaleBiasAggregator(policy).run(g, ranges)


def remove_identity_ops(g: Graph) -> Graph:
    """Drop Mul/Div by one and Add/Sub of zero when they leave the shape alone"""
    out = g.clone()
    removed = 0
    changed = True
    while changed:
        changed = False
        producers = out.producers()
        consumers = out.consumer_map()
        for i, node in enumerate(out.nodes):
            if node.op not in ELEMENTWISE_BINARY:
                continue
            x, c = node.inputs
            if node.op in ("Add", "Mul") and out.is_constant(x) and not out.is_constant(c):
                x, c = c, x
            if out.is_constant(x) or not out.is_constant(c):
                continue
            identity = 1.0 if node.op in ("Mul", "Div") else 0.0
            if not np.all(out.constant(c) == identity):
                continue
            y = node.output
            if broadcast_shapes([out.shape(x), out.shape(c)]) != out.shape(x) or out.shape(x) != out.shape(y):
                continue
            if y in out.outputs:
                p = producers.get(x)
                if p is None or x in out.outputs or len(consumers.get(x, [])) != 1:
                    continue
                out.replace_node(p, outputs=(y,))
            else:
                for j in consumers.get(y, []):
                    user = out.nodes[j]
                    out.replace_node(j, inputs=tuple(x if n == y else n for n in user.inputs))
            del out.nodes[i]
            removed += 1
            changed = True
            break
    if removed:
        prune_unused(out)
        logger.debug("removed %d identity node(s)", removed)
    return out


def fold_constants(g: Graph) -> Graph:
    """Replace input-independent nodes whose value is integral by initializers.

    Non-integral constant intermediates are left in place so that scale
    information stays visible; nodes left without consumers are dropped.
    """
    out = g.clone()
    known = {name: info.data for name, info in out.tensors.items() if info.is_constant}
    folded: Dict[int, np.ndarray] = {}
    for i in topo_order(out):
        node = out.nodes[i]
        if not node.inputs or not all(n in known for n in node.inputs):
            continue
        with np.errstate(all="ignore"):
            value = np.asarray(_execute_node(out, node, [known[n] for n in node.inputs]), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            continue
        known[node.output] = value
        if is_integral(value) and node.output not in out.outputs:
            folded[i] = value

    if not folded:
        return out
    for i, value in folded.items():
        name = out.nodes[i].output
        out.tensors[name] = TensorInfo(name, out.shape(name), True, np.round(value))
    out.nodes = [node for i, node in enumerate(out.nodes) if i not in folded]

    changed = True
    while changed:
        consumers = out.consumer_map()
        live = [n for n in out.nodes if n.output in out.outputs or consumers.get(n.output)]
        changed = len(live) != len(out.nodes)
        out.nodes = live
    prune_unused(out)
    logger.debug("folded %d constant node(s)", len(folded))
    return out


def max_relative_deviation(reference: Graph, candidate: Graph, input_ranges: Mapping[str, ScaledIntRange],
                           n_samples: int = 256, seed: int = 0) -> float:
    """Largest relative output difference over random inputs drawn from the input ranges"""
    if not reference.dynamic_inputs() or n_samples < 1:
        return 0.0
    inputs = sample_inputs(reference, input_ranges, n_samples, np.random.default_rng(seed))
    ref = run_samples(reference, inputs)
    lead = 1 if is_batchable(candidate) else 0
    got = run_samples(candidate, {
        name: v.reshape((n_samples,) + candidate.shape(name)[lead:]) for name, v in inputs.items()
    })
    worst = 0.0
    for name in reference.outputs:
        a = np.asarray(ref[name])
        b = np.asarray(got[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-9)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def streamline(g: Graph, input_ranges: Mapping[str, ScaledIntRange], policy: str = "activation-feeding",
               check_samples: int = 256, seed: int = 0) -> Tuple[Graph, Dict[str, Any]]:
    """Lower, expose quantizer scaling, duplicate shared parameters, analyze and aggregate.

    Returns:
        The streamlined graph and a report with the aggregated and skipped
        targets plus the measured maximum relative output deviation.
    """
    prepared = duplicate_shared_params(make_quant_scaling_explicit(lower(g)))
    ranges = analyze(prepared, input_ranges)
    aggregator = ScaleBiasAggregator(policy)
    out = aggregator.run(prepared, ranges)
    report = aggregator.report()
    report["max_rel_deviation"] = max_relative_deviation(g, out, input_ranges, check_samples, seed)
    if report["max_rel_deviation"] > 1e-6:
        logger.warning("streamlining changed outputs by up to %.3g (relative)", report["max_rel_deviation"])
    return out, report
