import numpy as np
import pytest

from sira.analysis import (RangeMap, analyze, constant_range, handle_add, handle_matmul,
                           handle_monotonic_activation, handle_mul, handle_quant)
from sira.errors import AnalysisError
from sira.graph import QuantSpec, lower
from sira.interval import Interval, ScaledIntRange
from sira.zoo import GraphBuilder, fc_bn_graph


def _int_bounds(r):
    return r.int_range.lo.tolist(), r.int_range.hi.tolist()


def test_input_quantizer(layer, layer_ranges):
    r = analyze(layer, layer_ranges)["qX"]
    assert _int_bounds(r) == ([[-7.0, -5.0]], [[7.0, 5.0]])
    np.testing.assert_allclose(r.scale, [0.7])
    np.testing.assert_allclose(r.range.hi, [[4.9, 3.5]])
    assert not np.any(r.bias)


def test_weight_quantizer_is_a_point(layer, layer_ranges):
    r = analyze(layer, layer_ranges)["qW"]
    assert r.range.is_point
    assert _int_bounds(r)[0] == [[-8.0, 7.0, -8.0], [7.0, 0.0, -8.0]]
    np.testing.assert_allclose(r.range.lo, [[-1.6, 2.1, -0.8], [1.4, 0.0, -0.8]])


def test_matmul_accumulator(layer, layer_ranges):
    r = analyze(layer, layer_ranges)["mm"]
    assert _int_bounds(r) == ([[-91.0, -49.0, -96.0]], [[91.0, 49.0, 96.0]])
    np.testing.assert_allclose(np.broadcast_to(r.scale, (1, 3)), [[0.14, 0.21, 0.07]])
    np.testing.assert_allclose(r.range.hi, [[12.74, 10.29, 6.72]])


def test_bias_and_batchnorm_move_scale_and_bias(layer, layer_ranges):
    ranges = analyze(layer, layer_ranges)
    mm_b = ranges["mm_b"]
    assert _int_bounds(mm_b) == _int_bounds(ranges["mm"])
    np.testing.assert_allclose(np.broadcast_to(mm_b.bias, (1, 3)), [[-3.3, -5.2, -6.1]])

    bn_m = ranges["bn_m"]
    np.testing.assert_allclose(np.broadcast_to(bn_m.scale, (1, 3)), [[0.084, 0.042, 0.028]])
    np.testing.assert_allclose(np.broadcast_to(bn_m.bias, (1, 3)), [[-1.98, -1.04, -2.44]])

    bn_n = ranges["bn_n"]
    np.testing.assert_allclose(np.broadcast_to(bn_n.bias, (1, 3)), [[-2.18, -1.44, -1.34]])
    np.testing.assert_allclose(bn_n.range.lo, [[-9.824, -3.498, -4.028]])
    np.testing.assert_allclose(bn_n.range.hi, [[5.464, 0.618, 1.348]])
    assert bn_n.contributors == {"qs_X", "zp_X", "qs_W", "zp_W", "B", "M", "N"}


def test_relu_drops_scale(layer, layer_ranges):
    r = analyze(layer, layer_ranges)["r"]
    assert not r.is_scaled_int
    np.testing.assert_allclose(r.range.lo, [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(r.range.hi, [[5.464, 0.618, 1.348]])


def test_output_quantizer(layer, layer_ranges):
    r = analyze(layer, layer_ranges)["qy"]
    assert _int_bounds(r) == ([[0.0, 0.0, 0.0]], [[15.0, 6.0, 13.0]])
    np.testing.assert_allclose(r.range.hi, [[1.5, 0.6, 1.3]])


def test_every_range_is_affine(layer, layer_ranges):
    for r in analyze(layer, layer_ranges).values():
        r.check_affine()


def test_unlowered_graph_is_rejected(layer_ranges):
    with pytest.raises(AnalysisError, match="lower the graph first"):
        analyze(fc_bn_graph(), layer_ranges)


def test_lowered_batchnorm_matches(layer, layer_ranges):
    lowered = analyze(lower(fc_bn_graph()), layer_ranges)
    expected = analyze(layer, layer_ranges)
    np.testing.assert_allclose(lowered["bn"].range.lo, expected["bn_n"].range.lo)
    np.testing.assert_allclose(lowered["bn"].range.hi, expected["bn_n"].range.hi)


def test_missing_input_range(layer):
    with pytest.raises(AnalysisError, match="missing range for graph input 'X'"):
        analyze(layer, {})


def test_range_map_round_trip(layer, layer_ranges):
    ranges = analyze(layer, layer_ranges)
    again = RangeMap.from_dict(ranges.to_dict(), layer)
    assert set(again) == set(ranges)
    assert _int_bounds(again["mm"]) == _int_bounds(ranges["mm"])
    assert again["bn_n"].contributors == ranges["bn_n"].contributors


def test_integer_constants_are_scaled_ints():
    r = constant_range(np.array([[-8.0, 7.0]]))
    assert r.is_scaled_int and not r.contributors
    assert not constant_range(np.array([0.5])).is_scaled_int


def test_quant_rounds_half_to_even():
    x = ScaledIntRange(Interval(np.array([0.5]), np.array([2.5])))
    r = handle_quant(x, QuantSpec(4, True), np.array([1.0]), np.array([0.0]))
    assert _int_bounds(r) == ([0.0], [2.0])


def test_quant_zero_point_becomes_bias():
    x = ScaledIntRange(Interval(np.array([0.0]), np.array([1.0])))
    r = handle_quant(x, QuantSpec(8, False), np.array([0.5]), np.array([3.0]))
    assert _int_bounds(r) == ([3.0], [5.0])
    np.testing.assert_allclose(r.bias, [-1.5])
    np.testing.assert_allclose(r.range.hi, [1.0])


def _scaled(lo, hi, scale):
    return ScaledIntRange.from_int(Interval(np.array([lo]), np.array([hi])), np.array([scale]))


def test_add_with_integer_scale_ratio():
    r = handle_add(_scaled(-3.0, 3.0, 0.5), _scaled(0.0, 2.0, 1.0))
    assert r.is_scaled_int
    np.testing.assert_allclose(r.scale, [0.5])
    assert _int_bounds(r) == ([-3.0], [7.0])


def test_add_with_unrelated_scales_keeps_interval():
    r = handle_add(_scaled(-3.0, 3.0, 0.5), _scaled(0.0, 2.0, 0.3))
    assert not r.is_scaled_int
    np.testing.assert_allclose([r.range.lo[0], r.range.hi[0]], [-1.5, 2.1])


def test_mul_by_zero_drops_scale():
    r = handle_mul(_scaled(-3.0, 3.0, 0.5), np.array([0.0]))
    assert not r.is_scaled_int
    assert r.range.is_point


def test_residual_join_of_equal_scales():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.quant("x", "a", (1, 2), 0.25, 4, True)
    b.node("Relu", ("x",), "rx", (1, 2))
    b.quant("rx", "c", (1, 2), 0.25, 4, False)
    b.node("Add", ("a", "c"), "y", (1, 2))
    g = b.build(["y"])
    ranges = analyze(g, {"x": ScaledIntRange(Interval(-np.ones((1, 2)), np.ones((1, 2))))})
    y = ranges["y"]
    assert y.is_scaled_int
    assert _int_bounds(y) == ([[-4.0, -4.0]], [[8.0, 8.0]])
    np.testing.assert_allclose(y.scale, [0.25])


def test_activation_keeps_only_the_interval():
    r = handle_monotonic_activation(_scaled(-3.0, 3.0, 0.5), "relu")
    assert not r.is_scaled_int
    assert [r.range.lo[0], r.range.hi[0]] == [0.0, 1.5]


def test_matmul_with_weights_first():
    W = constant_range(np.array([[1.0, 2.0], [3.0, -1.0]]))
    x = ScaledIntRange.from_int(Interval(np.zeros((2, 1)), np.array([[3.0], [2.0]])), np.array([0.5]))
    r = handle_matmul(W, x, weight_first=True)
    assert r.is_scaled_int
    assert _int_bounds(r) == ([[0.0], [-2.0]], [[7.0], [9.0]])
    np.testing.assert_allclose(np.broadcast_to(r.scale, (2, 1)), 0.5)
