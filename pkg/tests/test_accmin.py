import itertools

import numpy as np
import pytest

from sira.accmin import (annotate, apply_annotations, datatype_bound, report, signed_width, sira_bound,
                         summarize, unsigned_width)
from sira.analysis import analyze
from sira.errors import AccumulatorError
from sira.interpreter import run_samples
from sira.interval import Interval, ScaledIntRange
from sira.zoo import GraphBuilder, random_layer


def _interval(lo, hi):
    return Interval(np.array([float(lo)]), np.array([float(hi)]))


def test_datatype_bound():
    assert datatype_bound(2, 4, 4) == 10
    assert datatype_bound(3, 4, 4) == 10
    assert datatype_bound(1, 1, 1) == 3
    assert datatype_bound(512, 8, 8) == 26
    with pytest.raises(AccumulatorError):
        datatype_bound(0, 4, 4)


def test_sira_bound():
    assert sira_bound(_interval(-96, 96)) == 8
    assert sira_bound(_interval(-128, 127)) == 8
    assert sira_bound(_interval(-129, 0)) == 9
    assert sira_bound(_interval(0, 128)) == 9
    assert sira_bound(_interval(0, 0)) == 1


def test_sira_bound_errors():
    with pytest.raises(AccumulatorError, match="streamline"):
        sira_bound(None)
    with pytest.raises(AccumulatorError, match="not integer"):
        sira_bound(_interval(-0.5, 3))


def test_widths():
    assert signed_width(-8, 7) == 4
    assert signed_width(0, 8) == 5
    assert signed_width(-9, 0) == 5
    assert unsigned_width(15) == 4
    assert unsigned_width(0) == 1


def test_streamlined_layer_accumulator(streamlined, layer_ranges):
    (a,) = annotate(streamlined, analyze(streamlined, layer_ranges))
    assert (a.op, a.output, a.K) == ("MatMul", "mm", 2)
    assert (a.input_bits, a.weight_bits) == (4, 4)
    assert a.datatype_bound_bits == 10
    assert a.sira_bits == 8
    assert a.output_int_range.hi.tolist() == [[91.0, 49.0, 96.0]]


def test_bound_does_not_need_streamlining(layer, layer_ranges):
    (a,) = annotate(layer, analyze(layer, layer_ranges))
    assert (a.input_bits, a.weight_bits) == (4, 4)
    assert (a.datatype_bound_bits, a.sira_bits) == (10, 8)


def test_float_input_has_no_bound():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.const("w", [[1.0], [-2.0]])
    b.node("MatMul", ("x", "w"), "acc", (1, 1))
    g = b.build(["acc"])
    (a,) = annotate(g, analyze(g, {"x": ScaledIntRange(Interval(np.zeros((1, 2)), np.ones((1, 2))))}))
    assert a.sira_bits is None and a.input_bits is None
    assert report([a])["summary"]["mean_sira"] is None


def test_exhaustive_inputs_fit_the_bound():
    g, ranges = random_layer(np.random.default_rng(3), K=4, outputs=4, in_bits=3, w_bits=3)
    analyzed = analyze(g, ranges)
    (a,) = annotate(g, analyzed)

    combos = np.array(list(itertools.product(range(8), repeat=4)), dtype=np.float64)
    acc = run_samples(g, {"x": combos})["acc"].reshape(len(combos), 4)
    limit = 2 ** (a.sira_bits - 1)
    assert acc.min() >= -limit and acc.max() <= limit - 1
    # a single layer over a box is exact: the extremes are reached
    np.testing.assert_array_equal(acc.min(axis=0), analyzed["acc"].int_range.lo[0])
    np.testing.assert_array_equal(acc.max(axis=0), analyzed["acc"].int_range.hi[0])
    # and one bit less overflows
    narrower = 2 ** (a.sira_bits - 2)
    assert acc.min() < -narrower or acc.max() > narrower - 1


@pytest.mark.parametrize("seed", range(100))
def test_range_bound_never_exceeds_datatype_bound(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 64))
    g, ranges = random_layer(rng, K=K, outputs=8, in_bits=int(rng.integers(1, 9)), w_bits=int(rng.integers(2, 9)))
    (a,) = annotate(g, analyze(g, ranges))
    assert a.sira_bits <= a.datatype_bound_bits


def test_summary_and_graph_annotation(streamlined, layer_ranges):
    annotations = annotate(streamlined, analyze(streamlined, layer_ranges))
    summary = summarize(annotations)
    assert summary["layers"] == 1
    assert summary["reduction_pct"] == pytest.approx(20.0)
    assert summary["reduction_vs_32_pct"] == pytest.approx(75.0)

    g = apply_annotations(streamlined, annotations)
    mm = next(n for n in g.nodes if n.op == "MatMul")
    assert mm.attrs["acc_bits"] == 8
    assert "acc_bits" not in next(n for n in streamlined.nodes if n.op == "MatMul").attrs
    g.validate()
