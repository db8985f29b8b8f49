import json
from typing import Callable, Dict, Iterable, Mapping, Optional, Union

import numpy as np

from .errors import AnalysisError, IntervalError
from .graph import ConvParams, Graph, NodeSpec, QuantSpec, conv_params, node_label, topo_order
from .interpreter import conv2d, multithreshold
from .interval import (RATIO_RTOL, Interval, ScaledIntRange, broadcast_shapes, compact,
                       dynamic_matmul, interval_matmul, is_integral, monotonic_propagate, negate)
from .log import get_logger

logger = get_logger(__name__)

Operand = Union[ScaledIntRange, np.ndarray]


class RangeMap(dict):
    """Analysis result: tensor name -> ScaledIntRange"""

    def to_dict(self) -> Dict[str, Dict]:
        return {name: r.to_dict() for name, r in self.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Dict], g: Optional[Graph] = None) -> "RangeMap":
        result = cls()
        for name, entry in doc.items():
            shape = g.shape(name) if g is not None and name in g.tensors else None
            result[name] = ScaledIntRange.from_dict(entry, shape)
        return result


def constant_range(value) -> ScaledIntRange:
    """Point range of a constant; integer-valued data is also a scaled integer (scale 1)."""
    value = np.asarray(value, dtype=np.float64)
    point = Interval.point(value)
    if is_integral(value):
        return ScaledIntRange.from_int(point, np.ones(1), np.zeros(1))
    return ScaledIntRange(point)


def _uniform(values: np.ndarray, axes: Iterable[int]) -> bool:
    for axis in axes:
        if values.shape[axis] > 1 and not np.allclose(values, np.take(values, [0], axis=axis), rtol=1e-12, atol=0.0):
            return False
    return True


def _integer_ratio(num: np.ndarray, den: np.ndarray) -> Optional[np.ndarray]:
    if np.any(den == 0):
        return None
    ratio = num / den
    k = np.round(ratio)
    if np.any(k == 0) or np.any(np.abs(ratio - k) > RATIO_RTOL * np.maximum(np.abs(k), 1.0)):
        return None
    return k


def handle_quant(x: ScaledIntRange, spec: QuantSpec, s, z, contributors: Iterable[str] = ()) -> ScaledIntRange:
    """Quantizer output: integer endpoints are clip(round(x / s + z)) with scale s and bias -s * z."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(s <= 0):
        raise AnalysisError("Quant scale must be positive")
    shape = broadcast_shapes([x.shape, s.shape, z.shape])
    lo = np.clip(np.round(x.range.lo / s + z), spec.qmin, spec.qmax)
    hi = np.clip(np.round(x.range.hi / s + z), spec.qmin, spec.qmax)
    return ScaledIntRange.from_int(Interval(lo, hi), s, -s * z, contributors, shape)


def _combine(a: ScaledIntRange, b: ScaledIntRange, k: np.ndarray) -> ScaledIntRange:
    lo_b = np.minimum(k * b.int_range.lo, k * b.int_range.hi)
    hi_b = np.maximum(k * b.int_range.lo, k * b.int_range.hi)
    shape = broadcast_shapes([a.shape, b.shape])
    int_range = Interval(a.int_range.lo + lo_b, a.int_range.hi + hi_b)
    return ScaledIntRange.from_int(int_range, a.scale, a.bias + b.bias, a.contributors | b.contributors, shape)


def handle_add(a: ScaledIntRange, b: Operand, b_name: Optional[str] = None) -> ScaledIntRange:
    """Sum of a scaled integer with a constant or with another scaled integer.

    A constant moves the bias. Two scaled integers whose scales are related by
    an integer factor k keep the smaller scale and add k times the other
    integer range. Anything else is plain interval addition.
    """
    if isinstance(b, np.ndarray):
        if a.is_scaled_int:
            shape = broadcast_shapes([a.shape, b.shape])
            added = {b_name} if b_name else set()
            return ScaledIntRange.from_int(a.int_range, a.scale, a.bias + b, a.contributors | added, shape)
        return ScaledIntRange(monotonic_propagate("add", [a.range, Interval.point(b)]))

    if a.is_scaled_int and b.is_scaled_int:
        k = _integer_ratio(b.scale, a.scale)
        if k is not None:
            return _combine(a, b, k)
        k = _integer_ratio(a.scale, b.scale)
        if k is not None:
            return _combine(b, a, k)
    return ScaledIntRange(monotonic_propagate("add", [a.range, b.range]))


def handle_sub(a: ScaledIntRange, b: Operand, b_name: Optional[str] = None) -> ScaledIntRange:
    if isinstance(b, np.ndarray):
        return handle_add(a, -b, b_name)
    return handle_add(a, negate(b))


def handle_mul(a: ScaledIntRange, c: Operand, c_name: Optional[str] = None) -> ScaledIntRange:
    """Scaling by a constant multiplies both scale and bias; int range is kept."""
    if isinstance(c, np.ndarray):
        if a.is_scaled_int and not np.any(c == 0):
            shape = broadcast_shapes([a.shape, c.shape])
            added = {c_name} if c_name else set()
            return ScaledIntRange.from_int(a.int_range, a.scale * c, a.bias * c, a.contributors | added, shape)
        return ScaledIntRange(monotonic_propagate("mul", [a.range, Interval.point(c)]))
    return ScaledIntRange(monotonic_propagate("mul", [a.range, c.range]))


def handle_div(a: ScaledIntRange, c: Operand, c_name: Optional[str] = None) -> ScaledIntRange:
    if isinstance(c, np.ndarray):
        if np.any(c == 0):
            raise AnalysisError(f"division by zero constant '{c_name}'")
        if a.is_scaled_int:
            shape = broadcast_shapes([a.shape, c.shape])
            added = {c_name} if c_name else set()
            return ScaledIntRange.from_int(a.int_range, a.scale / c, a.bias / c, a.contributors | added, shape)
        return ScaledIntRange(monotonic_propagate("div", [a.range, Interval.point(c)]))
    return ScaledIntRange(monotonic_propagate("div", [a.range, c.range]))


def handle_monotonic_activation(x: ScaledIntRange, f: str) -> ScaledIntRange:
    """Non-linear ops keep only the interval; scale and bias are dropped."""
    return ScaledIntRange(monotonic_propagate(f, [x.range]))


def handle_multithreshold(x: ScaledIntRange, thresholds, bias) -> ScaledIntRange:
    lo = multithreshold(x.range.lo, thresholds, bias)
    hi = multithreshold(x.range.hi, thresholds, bias)
    return ScaledIntRange.from_int(Interval(lo, hi), np.ones(1), np.zeros(1))


def _transpose(r: ScaledIntRange) -> ScaledIntRange:
    rng = Interval(np.swapaxes(r.range.lo, -1, -2), np.swapaxes(r.range.hi, -1, -2))
    if r.int_range is None:
        return ScaledIntRange(rng)
    int_range = Interval(np.swapaxes(r.int_range.lo, -1, -2), np.swapaxes(r.int_range.hi, -1, -2))
    return ScaledIntRange(rng, int_range, compact(np.swapaxes(r.full_scale(), -1, -2)),
                          compact(np.swapaxes(r.full_bias(), -1, -2)), r.contributors)


def _is_weight(W: ScaledIntRange) -> bool:
    return W.is_scaled_int and W.range.is_point and not np.any(W.bias != 0)


def handle_matmul(W: ScaledIntRange, x: ScaledIntRange, weight_first: bool = False) -> ScaledIntRange:
    """Range of x @ W (or W @ x) for constant integer weights.

    Requires W scaled per output column at most with zero bias and x scaled
    uniformly along the reduction axis, so no dot product mixes scales.
    Otherwise the full-precision ranges are propagated without scale.
    """
    if weight_first:
        if W.range.lo.ndim != 2 or x.range.lo.ndim != 2:
            return ScaledIntRange(_matmul_fallback(x, W, weight_first=True))
        return _transpose(handle_matmul(_transpose(W), _transpose(x)))

    if W.range.lo.ndim != 2 or x.range.lo.ndim < 1 or x.shape[-1] != W.shape[0]:
        return ScaledIntRange(_matmul_fallback(x, W))
    if _is_weight(W) and x.is_scaled_int:
        s_w = np.broadcast_to(W.scale, W.shape)
        s_x = x.full_scale()
        if _uniform(s_w, [0]) and _uniform(s_x, [s_x.ndim - 1]):
            z = interval_matmul(x.int_range, W.int_range.lo)
            scale = s_x[..., :1] * s_w[:1, :]
            bias = x.full_bias() @ W.range.lo
            return ScaledIntRange.from_int(z, scale, bias, x.contributors | W.contributors, z.shape)
        logger.debug("MatMul scales mix within a dot product, propagating plain interval")
    return ScaledIntRange(_matmul_fallback(x, W))


def _matmul_fallback(x: ScaledIntRange, W: ScaledIntRange, weight_first: bool = False) -> Interval:
    if weight_first:
        if x.range.is_point:
            return interval_matmul(W.range, x.range.lo)
        return dynamic_matmul(W.range, x.range)
    if W.range.is_point and W.range.lo.ndim == 2:
        return interval_matmul(x.range, W.range.lo)
    return dynamic_matmul(x.range, W.range)


def _conv_bounds(lo, hi, W, params: ConvParams):
    pos, neg = np.maximum(W, 0.0), np.minimum(W, 0.0)
    args = (params.stride, params.pad, params.group)
    out_lo = conv2d(lo, pos, *args) + conv2d(hi, neg, *args)
    out_hi = conv2d(hi, pos, *args) + conv2d(lo, neg, *args)
    return Interval(out_lo, out_hi)


def handle_conv(x: ScaledIntRange, W: ScaledIntRange, params: ConvParams) -> ScaledIntRange:
    """Convolution as a dot product per output pixel, sharing the MatMul rules.

    Within a group every input channel meets every output channel, so x may
    be scaled per channel only when groups hold a single channel (depthwise).
    """
    if not W.range.is_point:
        raise AnalysisError("Conv with input-dependent weights is not supported")
    w_full = W.range.lo
    out_channels, per_group = w_full.shape[:2]
    if _is_weight(W) and x.is_scaled_int and x.range.lo.ndim == 4:
        s_w = np.broadcast_to(W.scale, w_full.shape)
        s_x = x.full_scale()
        b_x = x.full_bias()
        ok = _uniform(s_w, [1, 2, 3]) and _uniform(s_x, [0, 2, 3])
        groups = [s_x[:, g * per_group:(g + 1) * per_group] for g in range(params.group)]
        ok = ok and all(_uniform(s, [1]) for s in groups)
        if ok and max(params.pad) > 0 and np.any(b_x != 0):
            logger.debug("Conv pads an input with nonzero bias, propagating plain interval")
            ok = False
        if ok:
            z = _conv_bounds(x.int_range.lo, x.int_range.hi, W.int_range.lo, params)
            out_per_group = out_channels // params.group
            s_group = np.repeat(np.array([s[0, 0, 0, 0] for s in groups]), out_per_group)
            scale = (s_w[:, 0, 0, 0] * s_group).reshape(1, out_channels, 1, 1)
            bias = conv2d(np.ascontiguousarray(b_x), w_full, params.stride, params.pad, params.group)
            return ScaledIntRange.from_int(z, scale, bias, x.contributors | W.contributors, z.shape)
    lo = np.ascontiguousarray(x.range.lo)
    hi = np.ascontiguousarray(x.range.hi)
    return ScaledIntRange(_conv_bounds(lo, hi, w_full, params))


class RangeAnalyzer:
    """Node-by-node scaled-integer range propagation over a lowered graph"""

    def __init__(self, g: Graph, check_invariants: bool = True):
        self.g = g
        self.check_invariants = check_invariants
        self.handlers: Dict[str, Callable[[NodeSpec, RangeMap], ScaledIntRange]] = {
            "Quant": self._quant,
            "Add": self._add,
            "Sub": self._sub,
            "Mul": self._mul,
            "Div": self._div,
            "MatMul": self._matmul,
            "Conv": self._conv,
            "Relu": self._relu,
            "MultiThreshold": self._multithreshold,
        }

    def analyze(self, input_ranges: Mapping[str, ScaledIntRange]) -> RangeMap:
        g = self.g
        ranges = RangeMap()
        for name, info in g.tensors.items():
            if info.is_constant:
                ranges[name] = constant_range(info.data)
        for name in g.dynamic_inputs():
            if name not in input_ranges:
                raise AnalysisError(f"missing range for graph input '{name}'")
            ranges[name] = self._fit(input_ranges[name], g.shape(name), f"input '{name}'")

        for i in topo_order(g):
            node = g.nodes[i]
            label = node_label(i, node)
            handler = self.handlers.get(node.op)
            if handler is None:
                raise AnalysisError(f"unsupported op in {label}; lower the graph first")
            try:
                result = handler(node, ranges)
                result = self._fit(result, g.shape(node.output), label)
                if self.check_invariants:
                    result.check_affine()
            except IntervalError as e:
                raise AnalysisError(f"{label}: {e}") from None
            if not result.is_scaled_int:
                logger.debug("%s -> '%s' has no scale/bias", label, node.output)
            ranges[node.output] = result
        return ranges

    @staticmethod
    def _fit(r: ScaledIntRange, shape, where: str) -> ScaledIntRange:
        if r.shape == tuple(shape):
            return r
        try:
            rng = r.range.broadcast_to(shape)
            if rng.shape != tuple(shape):
                raise IntervalError(f"range shape {list(r.shape)} does not fit {list(shape)}")
            if r.int_range is None:
                return ScaledIntRange(rng)
            return ScaledIntRange(rng, r.int_range.broadcast_to(shape), r.scale, r.bias, r.contributors)
        except IntervalError as e:
            raise AnalysisError(f"{where}: {e}") from None

    def _operand(self, name: str, ranges: RangeMap) -> Operand:
        return self.g.constant(name) if self.g.is_constant(name) else ranges[name]

    def _quant(self, node: NodeSpec, ranges: RangeMap) -> ScaledIntRange:
        x, s, z = node.inputs
        for name in (s, z):
            if not self.g.is_constant(name):
                raise AnalysisError(f"Quant has non-constant scale or zero-point '{name}'")
        return handle_quant(ranges[x], node.quant_spec, self.g.constant(s), self.g.constant(z), {s, z})

    def _binary(self, node: NodeSpec, ranges: RangeMap, handler, commutative: bool) -> ScaledIntRange:
        a, b = node.inputs
        if self.g.is_constant(b):
            return handler(ranges[a], self.g.constant(b), b)
        if commutative and self.g.is_constant(a):
            return handler(ranges[b], self.g.constant(a), a)
        return handler(ranges[a], ranges[b])

    def _add(self, node, ranges):
        return self._binary(node, ranges, handle_add, True)

    def _mul(self, node, ranges):
        return self._binary(node, ranges, handle_mul, True)

    def _div(self, node, ranges):
        return self._binary(node, ranges, handle_div, False)

    def _sub(self, node, ranges):
        a, b = node.inputs
        if self.g.is_constant(a) and not self.g.is_constant(b):
            return handle_add(negate(ranges[b]), self.g.constant(a), a)
        return self._binary(node, ranges, handle_sub, False)

    def _matmul(self, node, ranges):
        a, b = ranges[node.inputs[0]], ranges[node.inputs[1]]
        if not _is_weight(b) and _is_weight(a) and a.range.lo.ndim == 2:
            return handle_matmul(a, b, weight_first=True)
        return handle_matmul(b, a)

    def _conv(self, node, ranges):
        x, w = node.inputs[:2]
        return handle_conv(ranges[x], ranges[w], conv_params(node, self.g.shape(w)))

    def _relu(self, node, ranges):
        return handle_monotonic_activation(ranges[node.inputs[0]], "relu")

    def _multithreshold(self, node, ranges):
        x, t = node.inputs
        return handle_multithreshold(ranges[x], self.g.constant(t), node.attrs["bias"])


def analyze(g: Graph, input_ranges: Mapping[str, ScaledIntRange], check_invariants: bool = True) -> RangeMap:
    """Scaled-integer range analysis of every tensor of a lowered graph."""
    ranges = RangeAnalyzer(g, check_invariants).analyze(input_ranges)
    scaled = sum(1 for name in ranges if ranges[name].is_scaled_int and not g.is_constant(name))
    logger.info("analyzed %d node(s), %d dynamic tensor(s) carry scale/bias", len(g.nodes), scaled)
    return ranges
