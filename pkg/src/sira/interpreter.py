from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set

import numpy as np

from .errors import ExecutionError, GraphError, VerificationError
from .graph import Graph, NodeSpec, QuantSpec, channel_axis, conv_params, node_label, topo_order
from .interval import Interval, ScaledIntRange
from .log import get_logger

logger = get_logger(__name__)

CORNER_PROB = 0.25
EPS = 1e-9


def quantize(x, scale, zero_point, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize: s * (clip(round_half_even(x / s + z), qmin, qmax) - z)"""
    scale = np.asarray(scale, dtype=np.float64)
    zero_point = np.asarray(zero_point, dtype=np.float64)
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) / scale + zero_point), spec.qmin, spec.qmax)
    return scale * (q - zero_point)


def conv2d(x, W, stride=(1, 1), pad=(0, 0), group: int = 1) -> np.ndarray:
    """Grouped 2-D convolution (NCHW, weights OIHW) by direct sliding windows"""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.ndim != 4 or W.ndim != 4:
        raise ExecutionError(f"Conv expects 4-D input and weights, got {list(x.shape)} and {list(W.shape)}")
    batch, channels, height, width = x.shape
    out_channels, per_group, kh, kw = W.shape
    if channels != per_group * group or out_channels % group:
        raise ExecutionError(
            f"Conv channel mismatch: input {channels}, weights {list(W.shape)}, group {group}"
        )
    sh, sw = stride
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = (height + 2 * ph - kh) // sh + 1
    out_w = (width + 2 * pw - kw) // sw + 1
    if out_h < 1 or out_w < 1:
        raise ExecutionError("Conv kernel larger than padded input")

    out = np.zeros((batch, out_channels, out_h, out_w))
    out_per_group = out_channels // group
    for g in range(group):
        xs = xp[:, g * per_group:(g + 1) * per_group]
        ws = W[g * out_per_group:(g + 1) * out_per_group]
        target = out[:, g * out_per_group:(g + 1) * out_per_group]
        for i in range(kh):
            for j in range(kw):
                window = xs[:, :, i:i + sh * (out_h - 1) + 1:sh, j:j + sw * (out_w - 1) + 1:sw]
                target += np.einsum("bchw,oc->bohw", window, ws[:, :, i, j])
    return out


def _channel_view(values, rank: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    shape = [1] * rank
    shape[channel_axis(rank)] = values.size
    return values.reshape(shape)


def multithreshold(x, thresholds, bias) -> np.ndarray:
    """bias[c] + number of thresholds of channel c that x meets or exceeds"""
    x = np.asarray(x, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 2:
        raise ExecutionError(f"thresholds must be C x N, got shape {list(thresholds.shape)}")
    rank = max(x.ndim, 1)
    axis = channel_axis(rank)
    channels = x.shape[axis] if x.ndim else 1
    if thresholds.shape[0] not in (1, channels):
        raise ExecutionError(f"{thresholds.shape[0]} threshold rows for {channels} channels")
    shape = [1] * rank
    shape[axis] = thresholds.shape[0]
    table = thresholds.reshape(shape + [thresholds.shape[1]])
    count = (x[..., None] >= table).sum(axis=-1)
    return _channel_view(bias, rank) + count


def _batch_norm(x, gamma, beta, mean, var, eps):
    rank = x.ndim
    return ((x - _channel_view(mean, rank)) / np.sqrt(_channel_view(var, rank) + eps)
            * _channel_view(gamma, rank) + _channel_view(beta, rank))


def _execute_node(g: Graph, node: NodeSpec, args: List[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "Quant":
        return quantize(args[0], args[1], args[2], node.quant_spec)
    if op == "MatMul":
        return np.matmul(args[0], args[1])
    if op == "Conv":
        params = conv_params(node, args[1].shape)
        out = conv2d(args[0], args[1], params.stride, params.pad, params.group)
        if len(args) == 3:
            out = out + _channel_view(args[2], 4)
        return out
    if op == "Add":
        return args[0] + args[1]
    if op == "Sub":
        return args[0] - args[1]
    if op == "Mul":
        return args[0] * args[1]
    if op == "Div":
        return args[0] / args[1]
    if op == "Relu":
        return np.maximum(args[0], 0.0)
    if op == "Gemm":
        out = np.matmul(args[0], args[1])
        return out + args[2] if len(args) == 3 else out
    if op == "BatchNormalization":
        return _batch_norm(*args, float(node.attrs.get("epsilon", 1e-5)))
    if op == "MultiThreshold":
        return multithreshold(args[0], args[1], node.attrs["bias"])
    raise ExecutionError(f"no executor for op '{op}'")


def _execute(g: Graph, inputs: Mapping[str, Any], batched: bool) -> Dict[str, np.ndarray]:
    values: Dict[str, np.ndarray] = {
        name: info.data for name, info in g.tensors.items() if info.is_constant
    }
    for name in g.dynamic_inputs():
        if name not in inputs:
            raise ExecutionError(f"missing value for graph input '{name}'")
        arr = np.asarray(inputs[name], dtype=np.float64)
        declared = g.shape(name)
        ok = arr.shape[1:] == declared[1:] and arr.ndim == len(declared) if batched else arr.shape == declared
        if not ok:
            raise ExecutionError(
                f"input '{name}' has shape {list(arr.shape)}, graph declares {list(declared)}"
            )
        values[name] = arr

    for i in topo_order(g):
        node = g.nodes[i]
        try:
            out = _execute_node(g, node, [values[n] for n in node.inputs])
        except (ValueError, GraphError) as e:
            raise ExecutionError(f"{node_label(i, node)} failed: {e}") from None
        if not np.all(np.isfinite(out)):
            raise ExecutionError(f"{node_label(i, node)} produced NaN or infinite values")
        values[node.output] = np.asarray(out, dtype=np.float64)
    return values


def run(g: Graph, inputs: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    """Evaluate every node in topological order; returns all tensor values"""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _execute(g, inputs, batched=False)


def is_batchable(g: Graph) -> bool:
    """True when every input-dependent tensor has a leading batch dimension of 1."""
    return all(len(g.shape(n)) >= 2 and g.shape(n)[0] == 1 for n in dynamic_tensors(g))


def run_samples(g: Graph, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Evaluate several samples stacked along a new leading axis.

    Every non-constant tensor in the result has shape (n,) + declared shape.
    Graphs with a unit batch axis are evaluated in one pass, others one
    sample at a time.
    """
    n = len(next(iter(inputs.values()))) if inputs else 1
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if is_batchable(g):
            values = _execute(g, inputs, batched=True)
            live = dynamic_tensors(g)
            result = {}
            for name, arr in values.items():
                if g.is_constant(name):
                    result[name] = arr
                elif name in live:
                    result[name] = arr.reshape((n,) + g.shape(name))
                else:
                    result[name] = np.broadcast_to(arr, (n,) + arr.shape)
            return result
        runs = [_execute(g, {k: v[s] for k, v in inputs.items()}, batched=False) for s in range(n)]
    return {
        name: runs[0][name] if g.is_constant(name) else np.stack([r[name] for r in runs])
        for name in runs[0]
    }


def sample_inputs(g: Graph, ranges: Mapping[str, ScaledIntRange], n: int, rng: np.random.Generator,
                  corner_prob: float = CORNER_PROB) -> Dict[str, np.ndarray]:
    """Draw ``n`` samples per dynamic input, stacked on a new leading axis.

    Values are uniform inside the declared interval, with probability
    ``corner_prob`` of an element being pinned to one of its endpoints.
    Inputs declared with an integer component are drawn on that lattice.
    """
    samples: Dict[str, np.ndarray] = {}
    for name in g.dynamic_inputs():
        if name not in ranges:
            raise ExecutionError(f"no declared range for graph input '{name}'")
        r = ranges[name]
        shape = g.shape(name)
        size = (n,) + shape[1:] if is_batchable(g) else (n,) + shape
        batch_axis_shape = shape[1:] if is_batchable(g) else shape

        if r.int_range is not None:
            lo = np.rint(np.broadcast_to(r.int_range.lo, shape)).reshape(batch_axis_shape).astype(np.int64)
            hi = np.rint(np.broadcast_to(r.int_range.hi, shape)).reshape(batch_axis_shape).astype(np.int64)
            draw = rng.integers(lo, hi, size=size, endpoint=True).astype(np.float64)
        else:
            lo = np.broadcast_to(r.range.lo, shape).reshape(batch_axis_shape)
            hi = np.broadcast_to(r.range.hi, shape).reshape(batch_axis_shape)
            draw = rng.uniform(lo, hi, size=size)
        pinned = rng.random(size) < corner_prob
        pick_lo = rng.random(size) < 0.5
        draw = np.where(pinned, np.where(pick_lo, lo, hi), draw)

        if r.int_range is not None:
            scale = np.broadcast_to(r.scale, shape).reshape(batch_axis_shape)
            bias = np.broadcast_to(r.bias, shape).reshape(batch_axis_shape)
            draw = scale * draw + bias
        samples[name] = draw
    return samples


@dataclass
class ExecutionTrace:
    """Running per-tensor minimum and maximum over evaluated samples"""
    observed_ranges: Dict[str, Interval] = field(default_factory=dict)
    tensor_values: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    n_samples: int = 0
    keep_values: bool = False

    def record(self, values: Mapping[str, np.ndarray], names: Sequence[str], batch: int) -> None:
        """Merge a batch whose arrays carry the samples on axis 0"""
        for name in names:
            arr = values[name]
            seen = Interval(arr.min(axis=0), arr.max(axis=0))
            old = self.observed_ranges.get(name)
            self.observed_ranges[name] = seen if old is None else old.hull(seen)
            if self.keep_values:
                self.tensor_values.setdefault(name, []).append(arr)
        self.n_samples += batch


@dataclass
class Violation:
    tensor: str
    sample: int
    value: float
    lo: float
    hi: float

    def __str__(self):
        return (f"tensor '{self.tensor}' sample {self.sample}: value {self.value!r} "
                f"outside [{self.lo!r}, {self.hi!r}]")


@dataclass
class VerificationReport:
    n_samples: int
    seed: int
    violations: List[Violation]
    slack: Dict[str, Dict[str, float]]
    stuck_channels: Dict[str, List[int]]
    trace: ExecutionTrace

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.n_samples,
            "seed": self.seed,
            "ok": self.ok,
            "violations": [v.__dict__ for v in self.violations],
            "slack": self.slack,
            "stuck_channels": self.stuck_channels,
            "observed_ranges": {k: v.to_dict() for k, v in self.trace.observed_ranges.items()},
        }


def dynamic_tensors(g: Graph) -> Set[str]:
    """Tensors whose value depends on a graph input"""
    reached = set(g.dynamic_inputs())
    for i in topo_order(g):
        node = g.nodes[i]
        if any(n in reached for n in node.inputs):
            reached.update(node.outputs)
    return reached


def stuck_channels(g: Graph, ranges: Mapping[str, ScaledIntRange]) -> Dict[str, List[int]]:
    """Channels of input-dependent tensors whose analyzed range is a single point."""
    stuck: Dict[str, List[int]] = {}
    for name in sorted(dynamic_tensors(g)):
        if name not in ranges or name in g.inputs:
            continue
        rng = ranges[name].range
        if rng.lo.ndim == 0:
            continue
        axis = channel_axis(rng.lo.ndim)
        flat = np.moveaxis(rng.hi - rng.lo, axis, 0).reshape(rng.shape[axis], -1)
        channels = [int(c) for c in np.nonzero(np.all(flat == 0.0, axis=1))[0]]
        if channels:
            stuck[name] = channels
    return stuck


def _first_violation(name: str, arr: np.ndarray, rng: Interval, offset: int, eps: float) -> Optional[Violation]:
    lo = rng.lo - eps * (1.0 + np.abs(rng.lo))
    hi = rng.hi + eps * (1.0 + np.abs(rng.hi))
    bad = (arr < lo) | (arr > hi)
    if not bad.any():
        return None
    index = tuple(np.argwhere(bad)[0])
    lo_full = np.broadcast_to(rng.lo, arr.shape)
    hi_full = np.broadcast_to(rng.hi, arr.shape)
    return Violation(name, offset + int(index[0]), float(arr[index]), float(lo_full[index]), float(hi_full[index]))


def verify_ranges(g: Graph, ranges: Mapping[str, ScaledIntRange], n_samples: int = 10000, seed: int = 0,
                  eps: float = EPS, corner_prob: float = CORNER_PROB, chunk: int = 1000,
                  strict: bool = False, keep_values: bool = False) -> VerificationReport:
    """Check empirically that every observed tensor value lies in its analyzed range.

    Args:
        g: Graph the ranges were computed for.
        ranges: Analysis result, including entries for the graph inputs.
        n_samples: Number of random input samples.
        seed: Seed for the sampler; equal seeds give identical traces.
        eps: Containment tolerance.
        corner_prob: Probability of pinning an input element to an endpoint.
        chunk: Samples evaluated together.
        strict: Raise VerificationError on the first violation.

    Returns:
        VerificationReport with violations, slack and stuck channels.
    """
    if n_samples < 1:
        raise ExecutionError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    trace = ExecutionTrace(keep_values=keep_values)
    names = [n for n in g.tensors if not g.is_constant(n) and n in ranges]
    violations: Dict[str, Violation] = {}

    done = 0
    while done < n_samples:
        batch = min(chunk, n_samples - done)
        inputs = sample_inputs(g, ranges, batch, rng, corner_prob)
        values = run_samples(g, inputs)
        trace.record(values, names, batch)
        for name in names:
            if name in violations:
                continue
            found = _first_violation(name, values[name], ranges[name].range, done, eps)
            if found is not None:
                violations[name] = found
                logger.error("range violation: %s", found)
                if strict:
                    raise VerificationError(str(found))
        done += batch

    slack: Dict[str, Dict[str, float]] = {}
    for name in names:
        gap = ranges[name].range.width - trace.observed_ranges[name].width
        slack[name] = {"max": float(np.max(gap)), "mean": float(np.mean(gap))}

    report = VerificationReport(
        n_samples=n_samples,
        seed=seed,
        violations=list(violations.values()),
        slack=slack,
        stuck_channels=stuck_channels(g, ranges),
        trace=trace,
    )
    logger.info("verified %d samples: %d violation(s), %d tensor(s) with stuck channels",
                n_samples, len(report.violations), len(report.stuck_channels))
    return report
