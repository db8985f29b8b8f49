import numpy as np
import pytest

from sira.analysis import analyze
from sira.errors import ThresholdError
from sira.interpreter import run_samples, sample_inputs
from sira.interval import Interval, ScaledIntRange
from sira.threshold import (ThresholdConverter, ThresholdTable, convert_tails, eval_binary_search, eval_parallel,
                            extract_thresholds, find_tail, find_tails, search_path, sign_bias, staircase_to_table)
from sira.zoo import GraphBuilder, random_tail


def _int_input(lo, hi, shape):
    return ScaledIntRange.from_int(Interval(np.full(shape, float(lo)), np.full(shape, float(hi))),
                                   np.ones(1), np.zeros(1))


def _table(g, inputs):
    ranges = analyze(g, inputs)
    tails = find_tails(g, ranges)
    assert len(tails) == 1
    return extract_thresholds(g, tails[0], ranges[tails[0].input])


def test_sign_bias():
    assert sign_bias(4, False) == 0
    assert sign_bias(4, True) == -8
    assert sign_bias(4, True, narrow=True) == -7
    with pytest.raises(ThresholdError):
        sign_bias(0, True)
    with pytest.raises(ThresholdError, match="narrow"):
        sign_bias(4, False, narrow=True)


def test_bare_quantizer_gives_unit_thresholds():
    b = GraphBuilder()
    b.input("x", (1, 1))
    b.quant("x", "y", (1, 1), 1.0, 2, False)
    table = _table(b.build(["y"]), {"x": _int_input(-1, 4, (1, 1))})
    assert table.values.tolist() == [[1.0, 2.0, 3.0]]
    assert table.bias.tolist() == [0.0]
    assert table.unit_steps


def test_stuck_channel_is_padded():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.const("m", [1.0, 0.0])
    b.const("a", [0.0, 1.0])
    b.node("Mul", ("x", "m"), "xm", (1, 2))
    b.node("Add", ("xm", "a"), "xa", (1, 2))
    b.quant("xa", "y", (1, 2), 1.0, 2, False)
    table = _table(b.build(["y"]), {"x": _int_input(0, 3, (1, 2))})
    assert table.values.tolist() == [[1.0, 2.0, 3.0], [0.0, 4.0, 4.0]]
    assert table.left_pad.tolist() == [0, 1]
    assert table.right_pad.tolist() == [0, 2]
    for x in range(4):
        assert eval_parallel(table, x, 1) == 1
        assert eval_binary_search(table, x, 1) == 1
        assert eval_binary_search(table, x, 0) == x


def test_staircase_with_multi_level_steps():
    codes = np.array([[0], [0], [1], [3], [3]], dtype=np.float64)
    grid = np.arange(5, dtype=np.float64)
    table = staircase_to_table(codes, grid, np.array([0]), np.array([4]), 2, 0)
    assert table.values.tolist() == [[2.0, 3.0, 3.0]]
    assert table.max_step == 2 and not table.unit_steps
    assert [eval_parallel(table, x, 0) for x in range(5)] == [0, 0, 1, 3, 3]


def test_non_monotonic_tail_is_rejected():
    b = GraphBuilder()
    b.input("x", (1, 1))
    b.const("neg", [-1.0])
    b.node("Mul", ("x", "neg"), "xn", (1, 1))
    b.quant("xn", "y", (1, 1), 1.0, 2, False)
    with pytest.raises(ThresholdError, match="not monotonic"):
        _table(b.build(["y"]), {"x": _int_input(-3, 0, (1, 1))})


def test_domain_cap():
    g, ranges = random_tail(np.random.default_rng(0))
    analyzed = analyze(g, ranges)
    tail = find_tails(g, analyzed)[0]
    with pytest.raises(ThresholdError, match="above the cap"):
        extract_thresholds(g, tail, analyzed[tail.input], domain_cap=100)


def test_finer_than_per_channel_parameter():
    b = GraphBuilder()
    b.input("x", (1, 2, 2))
    b.const("m", np.ones((1, 2, 2)))
    b.node("Mul", ("x", "m"), "xm", (1, 2, 2))
    b.quant("xm", "y", (1, 2, 2), 1.0, 2, False)
    g = b.build(["y"])
    ranges = analyze(g, {"x": _int_input(0, 3, (1, 2, 2))})
    tail, reason = find_tail(g, ranges, 1)
    assert tail is None
    assert "finer than per-channel" in reason


def test_tail_needs_an_integer_input(layer, layer_ranges):
    ranges = analyze(layer, layer_ranges)
    assert find_tails(layer, ranges) == []


@pytest.mark.parametrize("seed", range(60))
def test_random_tails_match_execution(seed):
    rng = np.random.default_rng(seed)
    out_bits = 2 + seed % 3
    g, ranges = random_tail(rng, channels=3, domain=(-40, 40), out_bits=out_bits, signed=seed % 2 == 1,
                            per_channel=seed % 5 != 0, relu=seed % 4 != 3)
    table = _table(g, ranges)
    assert table.is_sorted()

    xs = np.arange(-40, 41, dtype=np.float64)
    values = run_samples(g, {"x": np.repeat(xs[:, None], 3, axis=1)})
    codes = np.rint(values["y"].reshape(xs.size, 3) / g.constant("qs_y"))
    for i, x in enumerate(xs):
        for c in range(3):
            expected = int(codes[i, c])
            assert eval_parallel(table, x, c) == expected
            assert eval_binary_search(table, x, c) == expected
    assert len(search_path(table, 0, 0)) == out_bits


def test_converter_on_streamlined_layer(streamlined, layer_ranges):
    converter = ThresholdConverter()
    g = converter.run(streamlined, analyze(streamlined, layer_ranges))
    ops = [n.op for n in g.nodes]
    assert ops == ["Div", "Quant", "MatMul", "MultiThreshold", "Mul"]
    assert g.constant("qy_int_thresholds").shape == (3, 15)
    assert [t["output"] for t in converter.report()["tails"]] == ["qy_int"]

    inputs = sample_inputs(streamlined, layer_ranges, 2000, np.random.default_rng(7))
    np.testing.assert_allclose(run_samples(g, inputs)["qy"], run_samples(streamlined, inputs)["qy"],
                               atol=1e-12)


def test_converted_graph_is_analyzable(streamlined, layer_ranges):
    g = ThresholdConverter().run(streamlined, analyze(streamlined, layer_ranges))
    r = analyze(g, layer_ranges)["qy_int"]
    assert r.int_range.hi.tolist() == [[15.0, 6.0, 13.0]]


def test_shared_parameters_compact_to_one_row():
    g, ranges = random_tail(np.random.default_rng(5), channels=4, per_channel=False)
    converter = ThresholdConverter()
    out = converter.run(g, analyze(g, ranges))
    table = converter.tables["y"]
    assert table.values.shape[0] == 1 and table.channels == 4
    assert out.constant("y_thresholds").shape == (1, table.n_thresholds)


def test_eight_bit_layer_table_shape():
    g, ranges = random_tail(np.random.default_rng(11), channels=256, domain=(-512, 511), out_bits=8)
    converter = ThresholdConverter()
    out = converter.run(g, analyze(g, ranges))
    assert out.constant("y_thresholds").shape == (256, 255)
    mt = next(n for n in out.nodes if n.op == "MultiThreshold")
    assert mt.attrs["out_bits"] == 8
    assert len(mt.attrs["bias"]) == 256


def test_convert_tails(streamlined, layer_ranges):
    g = convert_tails(streamlined, analyze(streamlined, layer_ranges), domain_cap=1000)
    assert [n.op for n in g.nodes].count("MultiThreshold") == 1
    with pytest.raises(ThresholdError, match="above the cap"):
        convert_tails(streamlined, analyze(streamlined, layer_ranges), domain_cap=10)


@pytest.mark.parametrize("seed", range(4))
def test_evaluators_agree_on_large_padded_tables(seed):
    rng = np.random.default_rng(seed)
    channels, length = 3, 600
    grid = np.arange(length, dtype=np.float64) - 300
    # a step of 2 repeats its threshold
    steps = rng.choice([0, 0, 0, 1, 2], size=(length - 1, channels))
    start = rng.integers(0, 20, size=channels)
    codes = np.minimum(start + np.vstack([np.zeros((1, channels)), np.cumsum(steps, axis=0)]), 255)
    lo = -300 + rng.integers(0, 100, size=channels)
    hi = 299 - rng.integers(0, 100, size=channels)
    table = staircase_to_table(codes, grid, lo, hi, 8, 0)
    assert table.values.shape == (channels, 255)

    for c in range(channels):
        xs = np.concatenate([[lo[c], hi[c]], rng.integers(lo[c], hi[c], size=8400, endpoint=True)])
        for x in xs.tolist():
            expected = int(codes[x + 300, c])
            assert eval_parallel(table, x, c) == expected
            assert eval_binary_search(table, x, c) == expected


@pytest.mark.parametrize("seed", range(2))
def test_evaluators_agree_beyond_an_unpadded_table(seed):
    rng = np.random.default_rng(seed)
    channels = 4
    values = np.sort(rng.integers(-500, 500, size=(channels, 255)), axis=1)
    domain = Interval(np.full(channels, -600.0), np.full(channels, 600.0))
    table = ThresholdTable(values, np.full(channels, -128.0), 8, domain, np.zeros(channels), np.zeros(channels))
    assert len(np.unique(values[0])) < 255

    for c in range(channels):
        assert eval_binary_search(table, -600, c) == eval_parallel(table, -600, c) == -128
        assert eval_binary_search(table, 600, c) == eval_parallel(table, 600, c) == 127
        for x in rng.integers(-600, 600, size=2500, endpoint=True):
            assert eval_binary_search(table, int(x), c) == eval_parallel(table, int(x), c)
