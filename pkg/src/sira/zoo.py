"""Bundled example layers and random quantized networks"""
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .graph import Graph, NodeSpec, QuantSpec, TensorInfo, validate_graph
from .interval import Interval, ScaledIntRange

Ranges = Dict[str, ScaledIntRange]

# two-input, three-output fully connected layer followed by batchnorm and ReLU
X_BOUND = np.array([[5.1, 3.8]])
W = np.array([[-2.1, 5.0, -1.3], [3.1, 0.0, -3.2]])
B = np.array([-3.3, -5.2, -6.1])
M = np.array([0.6, 0.2, 0.4])
N = np.array([-0.2, -0.4, 1.1])
QS_X = np.array([0.7])
QS_W = np.array([0.2, 0.3, 0.1])
QS_Y = np.array([0.1])


class GraphBuilder:
    """Small helper for assembling graphs node by node"""

    def __init__(self):
        self.g = Graph({}, [], [], [])

    def input(self, name: str, shape: Sequence[int]) -> str:
        self.g.tensors[name] = TensorInfo(name, tuple(shape))
        self.g.inputs.append(name)
        return name

    def const(self, name: str, value, shape: Optional[Sequence[int]] = None) -> str:
        value = np.asarray(value, dtype=np.float64)
        if shape is not None:
            value = value.reshape(shape)
        self.g.tensors[name] = TensorInfo(name, value.shape, True, value)
        return name

    def node(self, op: str, inputs: Iterable[str], output: str, shape: Sequence[int], **attrs) -> str:
        self.g.tensors[output] = TensorInfo(output, tuple(shape))
        self.g.nodes.append(NodeSpec(op, tuple(inputs), (output,), attrs))
        return output

    def quant(self, x: str, output: str, shape: Sequence[int], scale, bits: int, signed: bool,
              zero_point=0.0, narrow: bool = False, suffix: Optional[str] = None) -> str:
        suffix = suffix or output
        s = self.const(f"qs_{suffix}", np.atleast_1d(scale))
        z = self.const(f"zp_{suffix}", np.atleast_1d(zero_point))
        return self.node("Quant", (x, s, z), output, shape, **QuantSpec(bits, signed, narrow).to_attrs())

    def build(self, outputs: Iterable[str]) -> Graph:
        self.g.outputs = list(outputs)
        validate_graph(self.g)
        return self.g


def fc_ranges() -> Ranges:
    return {"X": ScaledIntRange(Interval(-X_BOUND, X_BOUND))}


def fc_bn_graph() -> Graph:
    """Unlowered layer: Quant, Quant, Gemm, BatchNormalization, Relu, Quant"""
    b = GraphBuilder()
    b.input("X", (1, 2))
    b.const("W", W)
    b.quant("X", "qX", (1, 2), QS_X, 4, True, suffix="X")
    b.quant("W", "qW", (2, 3), QS_W, 4, True, suffix="W")
    b.const("B", B)
    b.node("Gemm", ("qX", "qW", "B"), "gemm", (1, 3))
    b.const("M", M)
    b.const("N", N)
    b.const("bn_mean", np.zeros(3))
    b.const("bn_var", np.ones(3))
    b.node("BatchNormalization", ("gemm", "M", "N", "bn_mean", "bn_var"), "bn", (1, 3), epsilon=0.0)
    b.node("Relu", ("bn",), "r", (1, 3))
    b.quant("r", "qy", (1, 3), QS_Y, 4, False, suffix="Y")
    return b.build(["qy"])


def fc_lowered_graph() -> Graph:
    """The same layer lowered to MatMul, Add, Mul, Add, Relu"""
    b = GraphBuilder()
    b.input("X", (1, 2))
    b.const("W", W)
    b.quant("W", "qW", (2, 3), QS_W, 4, True, suffix="W")
    b.quant("X", "qX", (1, 2), QS_X, 4, True, suffix="X")
    b.node("MatMul", ("qX", "qW"), "mm", (1, 3))
    b.const("B", B)
    b.node("Add", ("mm", "B"), "mm_b", (1, 3))
    b.const("M", M)
    b.node("Mul", ("mm_b", "M"), "bn_m", (1, 3))
    b.const("N", N)
    b.node("Add", ("bn_m", "N"), "bn_n", (1, 3))
    b.node("Relu", ("bn_n",), "r", (1, 3))
    b.quant("r", "qy", (1, 3), QS_Y, 4, False, suffix="Y")
    return b.build(["qy"])


def fc_streamlined_graph() -> Graph:
    """The layer after aggregation: an integer MatMul between explicit quantizer scalings"""
    b = GraphBuilder()
    b.input("X", (1, 2))
    b.const("qs_X_in", QS_X)
    b.node("Div", ("X", "qs_X_in"), "qX_div", (1, 2))
    b.const("qX_unit_scale", np.ones(1))
    b.const("qX_zero_point", np.zeros(1))
    b.node("Quant", ("qX_div", "qX_unit_scale", "qX_zero_point"), "qX_int", (1, 2),
           **QuantSpec(4, True).to_attrs())
    b.const("qW_int", [[-8, 7, -8], [7, 0, -8]])
    b.node("MatMul", ("qX_int", "qW_int"), "mm", (1, 3))
    b.const("aggr_scale", (QS_X * QS_W * M).reshape(1, 3))
    b.node("Mul", ("mm", "aggr_scale"), "bn_n_scaled", (1, 3))
    b.const("aggr_bias", (B * M + N).reshape(1, 3))
    b.node("Add", ("bn_n_scaled", "aggr_bias"), "bn_n", (1, 3))
    b.node("Relu", ("bn_n",), "r", (1, 3))
    b.const("qs_Y_in", QS_Y)
    b.node("Div", ("r", "qs_Y_in"), "qy_div", (1, 3))
    b.const("qy_unit_scale", np.ones(1))
    b.const("qy_zero_point", np.zeros(1))
    b.node("Quant", ("qy_div", "qy_unit_scale", "qy_zero_point"), "qy_int", (1, 3),
           **QuantSpec(4, False).to_attrs())
    b.const("qs_Y_out", QS_Y)
    b.node("Mul", ("qy_int", "qs_Y_out"), "qy", (1, 3))
    return b.build(["qy"])


def _weight_quant(b: GraphBuilder, rng: np.random.Generator, name: str, w: np.ndarray, bits: int,
                  axis_shape: Tuple[int, ...]) -> str:
    qmax = 2 ** (bits - 1) - 1
    peak = np.max(np.abs(w), axis=tuple(i for i in range(w.ndim) if axis_shape[i] == 1), keepdims=True)
    scale = np.maximum(peak, 1e-3) / qmax * rng.uniform(0.8, 1.2, size=peak.shape)
    b.const(f"{name}_float", w)
    s = b.const(f"qs_{name}", scale.reshape(axis_shape))
    z = b.const(f"zp_{name}", np.zeros(1))
    return b.node("Quant", (f"{name}_float", s, z), name, w.shape, **QuantSpec(bits, True).to_attrs())


def _batchnorm(b: GraphBuilder, rng: np.random.Generator, x: str, output: str, shape, channels: int) -> str:
    params = [
        b.const(f"{output}_gamma", rng.uniform(0.5, 1.5, channels)),
        b.const(f"{output}_beta", rng.normal(0.0, 0.5, channels)),
        b.const(f"{output}_mean", rng.normal(0.0, 0.5, channels)),
        b.const(f"{output}_var", rng.uniform(0.5, 2.0, channels)),
    ]
    return b.node("BatchNormalization", (x,) + tuple(params), output, shape)


def random_mlp(rng: np.random.Generator, in_features: int = 8, hidden: Sequence[int] = (16,),
               out_features: int = 4, bits: int = 4) -> Tuple[Graph, Ranges]:
    """Quantized MLP: per layer Gemm, BatchNormalization, Relu and an unsigned Quant"""
    b = GraphBuilder()
    b.input("X", (1, in_features))
    x = b.quant("X", "qX", (1, in_features), rng.uniform(0.05, 0.2), bits, True, suffix="X")
    width = in_features
    for i, out in enumerate(list(hidden) + [out_features]):
        w = _weight_quant(b, rng, f"w{i}", rng.normal(0.0, 1.0, (width, out)), bits, (1, out))
        bias = b.const(f"b{i}", rng.normal(0.0, 0.5, out))
        y = b.node("Gemm", (x, w, bias), f"fc{i}", (1, out))
        y = _batchnorm(b, rng, y, f"bn{i}", (1, out), out)
        y = b.node("Relu", (y,), f"relu{i}", (1, out))
        x = b.quant(y, f"act{i}", (1, out), rng.uniform(0.05, 0.5), bits, False)
        width = out
    bound = rng.uniform(0.5, 2.0, (1, in_features))
    return b.build([x]), {"X": ScaledIntRange(Interval(-bound, bound))}


def random_cnn(rng: np.random.Generator, in_channels: int = 3, channels: int = 4, size: int = 6,
               out_channels: int = 4, bits: int = 4) -> Tuple[Graph, Ranges]:
    """Conv, depthwise conv and a residual join of two equally scaled quantizers"""
    b = GraphBuilder()
    shape = (1, channels, size, size)
    b.input("X", (1, in_channels, size, size))
    x = b.quant("X", "qX", (1, in_channels, size, size), rng.uniform(0.05, 0.2), bits, True, suffix="X")

    w1 = _weight_quant(b, rng, "w_conv", rng.normal(0.0, 1.0, (channels, in_channels, 3, 3)), bits,
                       (channels, 1, 1, 1))
    y = b.node("Conv", (x, w1), "conv", shape, kernel=[3, 3], pad=[1, 1])
    y = _batchnorm(b, rng, y, "bn_conv", shape, channels)
    y = b.node("Relu", (y,), "relu_conv", shape)
    act_scale = rng.uniform(0.05, 0.3)
    a1 = b.quant(y, "a1", shape, act_scale, bits, False)

    w2 = _weight_quant(b, rng, "w_dw", rng.normal(0.0, 1.0, (channels, 1, 3, 3)), bits, (channels, 1, 1, 1))
    y = b.node("Conv", (a1, w2), "dwconv", shape, kernel=[3, 3], pad=[1, 1], group=channels)
    y = _batchnorm(b, rng, y, "bn_dw", shape, channels)
    y = b.node("Relu", (y,), "relu_dw", shape)
    b1 = b.quant(y, "b1", shape, act_scale, bits, False)

    y = b.node("Add", (a1, b1), "residual", shape)
    out_shape = (1, out_channels, size, size)
    w3 = _weight_quant(b, rng, "w_pw", rng.normal(0.0, 1.0, (out_channels, channels, 1, 1)), bits,
                       (out_channels, 1, 1, 1))
    bias = b.const("b_pw", rng.normal(0.0, 0.5, out_channels))
    y = b.node("Conv", (y, w3, bias), "pwconv", out_shape, kernel=[1, 1])
    y = b.node("Relu", (y,), "relu_pw", out_shape)
    out = b.quant(y, "qy", out_shape, rng.uniform(0.1, 0.5), bits, False)
    bound = np.full((1, in_channels, size, size), rng.uniform(0.5, 2.0))
    return b.build([out]), {"X": ScaledIntRange(Interval(-bound, bound))}


def random_tail(rng: np.random.Generator, channels: int = 4, domain: Tuple[int, int] = (-64, 64),
                out_bits: int = 3, signed: bool = False, per_channel: bool = True,
                relu: bool = True) -> Tuple[Graph, Ranges]:
    """Integer input -> Mul -> Add [-> Relu] -> Quant, monotone in every channel"""
    b = GraphBuilder()
    shape = (1, channels)
    b.input("x", shape)
    n = channels if per_channel else 1
    lo, hi = domain
    span = float(hi - lo)
    qmax = 2 ** (out_bits - (1 if signed else 0)) - 1
    mul = b.const("tail_mul", rng.uniform(0.5, 2.0, n) * qmax / span)
    add = b.const("tail_add", rng.uniform(-0.5, 0.5, n) * qmax)
    y = b.node("Mul", ("x", mul), "tail_scaled", shape)
    y = b.node("Add", (y, add), "tail_shifted", shape)
    if relu:
        y = b.node("Relu", (y,), "tail_relu", shape)
    out = b.quant(y, "y", shape, rng.uniform(0.5, 1.5), out_bits, signed)
    int_range = Interval(np.full(shape, float(lo)), np.full(shape, float(hi)))
    return b.build([out]), {"x": ScaledIntRange.from_int(int_range, np.ones(1), np.zeros(1))}


def random_layer(rng: np.random.Generator, K: int = 8, outputs: int = 4, in_bits: int = 3,
                 w_bits: int = 3, signed_input: bool = False) -> Tuple[Graph, Ranges]:
    """Integer input times integer weights: a single accumulator"""
    b = GraphBuilder()
    b.input("x", (1, K))
    w_lo, w_hi = -(2 ** (w_bits - 1)), 2 ** (w_bits - 1) - 1
    b.const("w", rng.integers(w_lo, w_hi, size=(K, outputs), endpoint=True))
    b.node("MatMul", ("x", "w"), "acc", (1, outputs))
    if signed_input:
        lo, hi = -(2 ** (in_bits - 1)), 2 ** (in_bits - 1) - 1
    else:
        lo, hi = 0, 2 ** in_bits - 1
    int_range = Interval(np.full((1, K), float(lo)), np.full((1, K), float(hi)))
    return b.build(["acc"]), {"x": ScaledIntRange.from_int(int_range, np.ones(1), np.zeros(1))}


MODELS = {
    "fc_bn": fc_bn_graph,
    "fc_lowered": fc_lowered_graph,
    "fc_streamlined": fc_streamlined_graph,
}
RANDOM_MODELS = {
    "mlp": random_mlp,
    "cnn": random_cnn,
    "tail": random_tail,
    "layer": random_layer,
}
