from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .analysis import RangeMap
from .errors import ThresholdError
from .graph import ELEMENTWISE_BINARY, Graph, NodeSpec, channel_axis, prune_unused, topo_order, validate_graph
from .interpreter import _execute_node
from .interval import Interval, ScaledIntRange, is_integral
from .log import get_logger

logger = get_logger(__name__)

DOMAIN_CAP = 2 ** 24


def sign_bias(n: int, signed: bool, narrow: bool = False) -> int:
    """Output offset that makes a threshold unit produce the quantizer's lowest code"""
    if n < 1:
        raise ThresholdError(f"output bit width must be >= 1, got {n}")
    if narrow and not signed:
        raise ThresholdError("narrow range requires a signed output")
    if not signed:
        return 0
    return -(2 ** (n - 1)) + int(narrow)


@dataclass
class ThresholdTable:
    """Per-channel sorted thresholds of a compiled layer tail.

    ``values`` has one row per channel or a single row shared by all of
    them. The first ``left_pad[c]`` entries of a row sit at the domain's
    lower end and the last ``right_pad[c]`` one past its upper end; both
    stand in for infinities.
    """
    values: np.ndarray
    bias: np.ndarray
    out_bits: int
    input_domain: Interval
    left_pad: np.ndarray
    right_pad: np.ndarray
    channels: int = 0
    max_step: int = 1

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        self.left_pad = np.atleast_1d(np.asarray(self.left_pad, dtype=np.int64))
        self.right_pad = np.atleast_1d(np.asarray(self.right_pad, dtype=np.int64))
        if self.values.shape[1] != self.n_thresholds:
            raise ThresholdError(
                f"{self.out_bits}-bit table needs {self.n_thresholds} thresholds per row, "
                f"got {self.values.shape[1]}"
            )
        if not self.channels:
            self.channels = self.values.shape[0]
        if self.values.shape[0] not in (1, self.channels):
            raise ThresholdError(f"{self.values.shape[0]} threshold rows for {self.channels} channels")

    @property
    def n_thresholds(self) -> int:
        return 2 ** self.out_bits - 1

    @property
    def unit_steps(self) -> bool:
        return self.max_step <= 1

    def row(self, c: int) -> int:
        if not 0 <= c < self.channels:
            raise ThresholdError(f"channel {c} out of range for a {self.channels}-channel table")
        return 0 if self.values.shape[0] == 1 else c

    def _at(self, arr: np.ndarray, c: int):
        return arr[0] if arr.shape[0] == 1 else arr[c]

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=1) >= 0))

    def compacted(self) -> "ThresholdTable":
        """Collapse to a single row when every channel has the same thresholds and bias"""
        rows = self.values
        if rows.shape[0] == 1 or not np.all(rows == rows[:1]) or not np.all(self.bias == self.bias[0]):
            return self
        lo, hi = np.atleast_1d(self.input_domain.lo), np.atleast_1d(self.input_domain.hi)
        return ThresholdTable(
            rows[:1], self.bias[:1], self.out_bits, Interval(lo.min(keepdims=True), hi.max(keepdims=True)),
            self.left_pad[:1], self.right_pad[:1], self.channels, self.max_step,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "channels": self.channels,
            "rows": int(self.values.shape[0]),
            "out_bits": self.out_bits,
            "n_thresholds": self.n_thresholds,
            "bias": self.bias.tolist(),
            "input_domain": self.input_domain.to_dict(),
            "max_step": self.max_step,
            "unit_steps": self.unit_steps,
        }


def staircase_to_table(codes: np.ndarray, grid: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                       out_bits: int, bias: int) -> ThresholdTable:
    """Edge detection over evaluated output codes.

    Args:
        codes: (L, C) integer output codes at every grid point
        grid: the L consecutive integers the codes were evaluated at
        lo, hi: per-channel integer domain, a sub-range of ``grid``
    """
    n_thresholds = 2 ** out_bits - 1
    start = int(grid[0])
    rows, lefts, rights = [], [], []
    max_step = 0
    for c in range(codes.shape[1]):
        a, b = int(lo[c]) - start, int(hi[c]) - start
        f = codes[a:b + 1, c]
        xs = grid[a:b + 1]
        steps = np.diff(f).astype(np.int64)
        if np.any(steps < 0):
            at = int(xs[1:][np.argmax(steps < 0)])
            raise ThresholdError(f"channel {c}: tail output decreases at x={at}, it is not monotonic")
        left = int(f[0]) - bias
        if left < 0:
            raise ThresholdError(f"channel {c}: output code {int(f[0])} is below the bias {bias}")
        edges = np.repeat(xs[1:], steps)
        used = left + edges.size
        if used > n_thresholds:
            raise ThresholdError(f"channel {c}: {used} thresholds needed, {out_bits} bits allow {n_thresholds}")
        rows.append(np.concatenate([np.full(left, xs[0]), edges, np.full(n_thresholds - used, xs[-1] + 1)]))
        lefts.append(left)
        rights.append(n_thresholds - used)
        if steps.size:
            max_step = max(max_step, int(steps.max()))
    return ThresholdTable(
        np.stack(rows), np.full(len(rows), float(bias)), out_bits,
        Interval(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)),
        np.asarray(lefts), np.asarray(rights), max_step=max(max_step, 1) if rows else 1,
    )


def eval_parallel(t: ThresholdTable, x: int, c: int) -> int:
    """bias + number of thresholds x meets or exceeds"""
    r = t.row(c)
    return int(t._at(t.bias, c) + np.count_nonzero(x >= t.values[r]))


def _search(t: ThresholdTable, x: int, c: int) -> Tuple[List[int], int]:
    r = t.row(c)
    row = t.values[r]
    if np.any(np.diff(row) < 0):
        raise ThresholdError(f"threshold row {r} is not sorted")
    left = int(t._at(t.left_pad, c))
    right = t.n_thresholds - int(t._at(t.right_pad, c))
    path = []
    pos, step = 0, 2 ** (t.out_bits - 1)
    while step:
        idx = pos + step - 1
        path.append(idx)
        if idx < left or (idx < right and x >= row[idx]):
            pos += step
        step //= 2
    return path, pos


def search_path(t: ThresholdTable, x: int, c: int) -> List[int]:
    """Threshold indices compared while descending the complete search tree"""
    return _search(t, x, c)[0]


def eval_binary_search(t: ThresholdTable, x: int, c: int) -> int:
    """Same result as eval_parallel using out_bits comparisons.

    Padding entries compare as -inf (left) and +inf (right).
    """
    return int(t._at(t.bias, c) + _search(t, x, c)[1])


@dataclass(frozen=True)
class LayerTail:
    """Elementwise chain from an integer tensor up to and including a Quant node"""
    input: str
    nodes: Tuple[int, ...]
    quant: int
    output: str


def _pure_integer(r: Optional[ScaledIntRange]) -> bool:
    return (
        r is not None and r.is_scaled_int
        and bool(np.all(r.scale == 1.0)) and bool(np.all(r.bias == 0.0))
    )


def _channel_shape(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    rank = len(shape)
    axis = channel_axis(rank)
    return tuple(d if i == axis else 1 for i, d in enumerate(shape))


def _per_channel(g: Graph, name: str, shape: Tuple[int, ...]) -> bool:
    target = _channel_shape(shape)
    try:
        return np.broadcast_shapes(g.shape(name), target) == target
    except ValueError:
        return False


def find_tail(g: Graph, ranges: Mapping[str, ScaledIntRange], quant_index: int,
              consumers: Optional[Dict[str, List[int]]] = None) -> Tuple[Optional[LayerTail], str]:
    """Longest eligible tail ending in the given Quant, or (None, reason)."""
    consumers = consumers if consumers is not None else g.consumer_map()
    producers = g.producers()
    q = g.nodes[quant_index]
    x, s, z = q.inputs
    if not (g.is_constant(s) and g.is_constant(z)):
        return None, "quantizer parameters are not constant"
    if g.is_constant(x):
        return None, "quantizer input is constant"

    chain = [quant_index]
    tensors = [x]
    cur = x
    while cur not in g.outputs and len(consumers.get(cur, [])) == 1:
        p = producers.get(cur)
        if p is None:
            break
        node = g.nodes[p]
        if node.op == "Relu":
            nxt = node.inputs[0]
        elif node.op in ELEMENTWISE_BINARY:
            dynamic = [n for n in node.inputs if not g.is_constant(n)]
            if len(dynamic) != 1 or (node.op == "Div" and node.inputs[0] != dynamic[0]):
                break
            nxt = dynamic[0]
        else:
            break
        chain.insert(0, p)
        tensors.append(nxt)
        cur = nxt

    depth = None
    for d, t in enumerate(tensors):
        if _pure_integer(ranges.get(t)):
            depth = d
    if depth is None:
        return None, "no pure integer tensor feeds the tail"

    start = tensors[depth]
    nodes = tuple(chain[len(chain) - 1 - depth:])
    shape = g.shape(start)
    if len(shape) == 0:
        return None, "scalar tail input"
    if g.shape(q.output) != shape:
        return None, "tail changes the tensor shape"
    for i in nodes:
        for n in g.nodes[i].inputs:
            if g.is_constant(n) and not _per_channel(g, n, shape):
                return None, f"parameter '{n}' is finer than per-channel"
    return LayerTail(start, nodes, quant_index, q.output), ""


def find_tails(g: Graph, ranges: Mapping[str, ScaledIntRange]) -> List[LayerTail]:
    """Eligible tails, starting at the end of the graph and working upwards"""
    consumers = g.consumer_map()
    tails = []
    claimed = set()
    for i in reversed(topo_order(g)):
        if g.nodes[i].op != "Quant" or i in claimed:
            continue
        tail, reason = find_tail(g, ranges, i, consumers)
        if tail is None:
            logger.debug("quantizer producing '%s' not converted: %s", g.nodes[i].output, reason)
            continue
        claimed.update(tail.nodes)
        tails.append(tail)
    return tails


def _per_channel_domain(lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    axis = channel_axis(lo.ndim)
    lo = np.moveaxis(lo, axis, 0).reshape(lo.shape[axis], -1)
    hi = np.moveaxis(hi, axis, 0).reshape(hi.shape[axis], -1)
    return lo.min(axis=1), hi.max(axis=1)


def tail_codes(g: Graph, tail: LayerTail, grid: np.ndarray) -> np.ndarray:
    """Evaluate the tail at every grid point; returns (L, C) output codes"""
    shape = g.shape(tail.input)
    rank = len(shape)
    channels = shape[channel_axis(rank)]
    n = grid.size
    values = {tail.input: grid.reshape((n,) + (1,) * max(rank - 1, 1))}
    with np.errstate(all="ignore"):
        for i in tail.nodes:
            node = g.nodes[i]
            args = [values[a] if a in values else g.constant(a) for a in node.inputs]
            values[node.output] = _execute_node(g, node, args)
        q = g.nodes[tail.quant]
        codes = values[q.output] / g.constant(q.inputs[1]) + g.constant(q.inputs[2])
    target = (n,) + _channel_shape(shape)[1:] if rank >= 2 else (n, channels)
    codes = np.broadcast_to(codes, target).reshape(n, channels)
    if not np.all(np.isfinite(codes)) or not is_integral(codes):
        raise ThresholdError(f"output of the tail ending in '{q.output}' is not an integer multiple of its scale")
    return np.rint(codes)


def extract_thresholds(g: Graph, tail: LayerTail, in_range: ScaledIntRange,
                       domain_cap: int = DOMAIN_CAP) -> ThresholdTable:
    """Compile the tail into thresholds by evaluating it over its whole integer input domain."""
    if not _pure_integer(in_range):
        raise ThresholdError(f"tail input '{tail.input}' is not an integer with unit scale and zero bias")
    shape = g.shape(tail.input)
    lo = np.broadcast_to(in_range.int_range.lo, shape)
    hi = np.broadcast_to(in_range.int_range.hi, shape)
    if not (is_integral(lo) and is_integral(hi)):
        raise ThresholdError(f"input domain of '{tail.input}' is not integer")
    lo_c, hi_c = _per_channel_domain(np.rint(lo), np.rint(hi))
    start, stop = int(lo_c.min()), int(hi_c.max())
    size = stop - start + 1
    if size > domain_cap:
        raise ThresholdError(
            f"input domain [{start}, {stop}] of '{tail.input}' has {size} points, above the cap of {domain_cap}"
        )
    grid = np.arange(start, stop + 1, dtype=np.float64)
    codes = tail_codes(g, tail, grid)
    spec = g.nodes[tail.quant].quant_spec
    return staircase_to_table(codes, grid, lo_c, hi_c, spec.bitwidth,
                              sign_bias(spec.bitwidth, spec.signed, spec.narrow))


class ThresholdConverter:
    """Replaces each eligible layer tail by a MultiThreshold node"""

    def __init__(self, domain_cap: int = DOMAIN_CAP):
        self.domain_cap = domain_cap
        self.converted: List[Dict[str, Any]] = []
        self.tables: Dict[str, ThresholdTable] = {}

    def run(self, g: Graph, ranges: RangeMap) -> Graph:
        self.converted, self.tables = [], {}
        out = g.clone()
        removed = set()
        inserts: Dict[int, List[NodeSpec]] = {}
        for tail in find_tails(g, ranges):
            table = extract_thresholds(g, tail, ranges[tail.input], self.domain_cap).compacted()
            q = g.nodes[tail.quant]
            s, z = g.constant(q.inputs[1]), g.constant(q.inputs[2])
            y = tail.output

            thresholds = out.add_constant(f"{y}_thresholds", table.values)
            attrs = {"bias": table.bias.tolist(), "out_bits": table.out_bits}
            rescale, shift = bool(np.any(s != 1.0)), bool(np.any(z != 0.0))
            cur = out.add_tensor(f"{y}_codes", g.shape(y)) if rescale or shift else y
            nodes = [NodeSpec("MultiThreshold", (tail.input, thresholds), (cur,), attrs)]
            if shift:
                nxt = out.add_tensor(f"{y}_centered", g.shape(y)) if rescale else y
                nodes.append(NodeSpec("Add", (cur, out.add_constant(f"{y}_zero_point", -z)), (nxt,)))
                cur = nxt
            if rescale:
                nodes.append(NodeSpec("Mul", (cur, out.add_constant(f"{y}_scale", s)), (y,)))

            removed.update(tail.nodes)
            inserts[tail.quant] = nodes
            self.tables[y] = table
            entry = {"output": y, "input": tail.input, "ops": [g.nodes[i].op for i in tail.nodes]}
            entry.update(table.to_dict())
            self.converted.append(entry)
            if not table.unit_steps:
                logger.debug("tail '%s' has steps of height %d; kernels limited to unit steps need "
                             "repeated thresholds", y, table.max_step)

        if not self.converted:
            logger.info("no layer tails converted")
            return out
        nodes = []
        for i, node in enumerate(g.nodes):
            if i in inserts:
                nodes.extend(inserts[i])
            elif i not in removed:
                nodes.append(node)
        out.nodes = nodes
        prune_unused(out)
        validate_graph(out)
        logger.info("converted %d layer tail(s) to thresholds", len(self.converted))
        return out

    def report(self) -> Dict[str, Any]:
        return {"tails": list(self.converted)}


def convert_tails(g: Graph, ranges: RangeMap, domain_cap: int = DOMAIN_CAP) -> Graph:
    return ThresholdConverter(domain_cap).run(g, ranges)
