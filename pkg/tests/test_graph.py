import numpy as np
import pytest

from sira.errors import GraphError, LoweringError
from sira.graph import (Graph, NodeSpec, QuantSpec, TensorInfo, graph_from_dict, graph_to_dict, load_graph,
                        lower, parse_graph, serialize_graph, topo_order, topo_sort, validate_graph)
from sira.interpreter import run
from sira.zoo import GraphBuilder, fc_bn_graph, fc_lowered_graph, fc_streamlined_graph


def test_bundled_documents_match_builders(models_dir):
    assert load_graph(models_dir / "fc_bn.json") == fc_bn_graph()
    assert load_graph(models_dir / "fc_lowered.json") == fc_lowered_graph()


def test_bundled_streamlined_document(models_dir):
    loaded = load_graph(models_dir / "fc_streamlined.json")
    built = fc_streamlined_graph()
    assert loaded.nodes == built.nodes
    assert set(loaded.tensors) == set(built.tensors)
    for name in ("qW_int", "aggr_scale", "aggr_bias"):
        np.testing.assert_allclose(loaded.constant(name), built.constant(name), rtol=1e-12)


def test_serialize_and_parse(layer):
    again = parse_graph(serialize_graph(layer))
    assert again == layer
    assert again.constant("W").shape == (2, 3)


def test_quant_spec_bounds():
    assert (QuantSpec(4, True).qmin, QuantSpec(4, True).qmax) == (-8, 7)
    assert QuantSpec(4, True, True).qmin == -7
    assert (QuantSpec(4, False).qmin, QuantSpec(4, False).qmax) == (0, 15)
    with pytest.raises(GraphError):
        QuantSpec(0)
    with pytest.raises(GraphError):
        QuantSpec(4, signed=False, narrow=True)


def test_constant_without_data_is_rejected():
    doc = {
        "tensors": [{"name": "c", "shape": [2], "constant": True}],
        "nodes": [], "inputs": [], "outputs": [],
    }
    with pytest.raises(GraphError, match="no data"):
        graph_from_dict(doc)


def test_data_size_mismatch_is_rejected():
    with pytest.raises(GraphError, match="data values"):
        TensorInfo("c", (2, 2), True, [1.0, 2.0])


def test_invalid_json():
    with pytest.raises(GraphError, match="not valid JSON"):
        parse_graph("{nodes: ")


def test_dangling_reference(layer):
    doc = graph_to_dict(layer)
    doc["nodes"][2]["inputs"] = ["qX", "missing"]
    with pytest.raises(GraphError, match="dangling reference to tensor 'missing'"):
        graph_from_dict(doc)


def test_two_producers(layer):
    doc = graph_to_dict(layer)
    doc["nodes"][3]["outputs"] = ["mm"]
    with pytest.raises(GraphError, match="produced by both"):
        graph_from_dict(doc)


def test_unknown_op_and_attribute(layer):
    doc = graph_to_dict(layer)
    doc["nodes"][6]["op"] = "Softmax"
    with pytest.raises(GraphError, match="unknown op"):
        graph_from_dict(doc)
    doc = graph_to_dict(layer)
    doc["nodes"][0]["attrs"]["rounding"] = "floor"
    with pytest.raises(GraphError, match="unknown attribute"):
        graph_from_dict(doc)


def test_quant_requires_bitwidth(layer):
    doc = graph_to_dict(layer)
    del doc["nodes"][0]["attrs"]["bitwidth"]
    with pytest.raises(GraphError, match="missing attribute"):
        graph_from_dict(doc)


def test_cycle_is_detected():
    tensors = {n: TensorInfo(n, (1,)) for n in ("x", "a", "b")}
    nodes = [NodeSpec("Relu", ("b",), ("a",)), NodeSpec("Add", ("a", "x"), ("b",))]
    with pytest.raises(GraphError, match="cycle"):
        validate_graph(Graph(tensors, nodes, ["x"], ["b"]))


def test_topo_order_is_stable():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.node("Relu", ("x",), "a", (1, 2))
    b.node("Relu", ("x",), "c", (1, 2))
    b.node("Add", ("a", "c"), "y", (1, 2))
    g = b.build(["y"])
    g.nodes = [g.nodes[2], g.nodes[0], g.nodes[1]]
    assert topo_order(g) == [1, 2, 0]
    assert topo_sort(g) == [g.nodes[1], g.nodes[2], g.nodes[0]]


def _random_dag(rng, n_nodes):
    b = GraphBuilder()
    names = [b.input("x", (1, 2))]
    for k in range(n_nodes):
        if k and rng.random() < 0.6:
            inputs = tuple(str(n) for n in rng.choice(names, size=2))
            names.append(b.node("Add", inputs, f"t{k}", (1, 2)))
        else:
            names.append(b.node("Relu", (str(rng.choice(names)),), f"t{k}", (1, 2)))
    return b.build([names[-1]])


@pytest.mark.parametrize("seed", range(20))
def test_topo_order_on_shuffled_random_graphs(seed):
    rng = np.random.default_rng(seed)
    g = _random_dag(rng, 30)
    g.nodes = [g.nodes[i] for i in rng.permutation(len(g.nodes))]
    order = topo_order(g)
    assert sorted(order) == list(range(len(g.nodes)))

    producers = g.producers()
    position = {i: p for p, i in enumerate(order)}
    for i, node in enumerate(g.nodes):
        for name in node.inputs:
            if name in producers:
                assert position[producers[name]] < position[i]

    # among nodes ready at the same time the one listed first is taken
    placed = set()
    for i in order:
        ready = [j for j, node in enumerate(g.nodes) if j not in placed
                 and all(producers.get(n) in placed for n in node.inputs if n in producers)]
        assert i == min(ready)
        placed.add(i)

    g.nodes = topo_sort(g)
    assert topo_order(g) == list(range(len(g.nodes)))


def test_fresh_name(layer):
    assert layer.fresh_name("unused") == "unused"
    assert layer.fresh_name("mm") == "mm_1"


def test_lowering_gemm_and_batchnorm():
    g = lower(fc_bn_graph())
    assert [n.op for n in g.nodes] == ["Quant", "Quant", "MatMul", "Add", "Mul", "Add", "Relu", "Quant"]
    assert "bn_mean" not in g.tensors
    np.testing.assert_allclose(g.constant("bn_mul"), [0.6, 0.2, 0.4])
    np.testing.assert_allclose(g.constant("bn_add"), [-0.2, -0.4, 1.1])

    x = {"X": np.array([[5.0, -3.0]])}
    np.testing.assert_allclose(run(g, x)["qy"], run(fc_lowered_graph(), x)["qy"])


def test_unlowered_layer_shape():
    g = fc_bn_graph()
    assert [n.op for n in g.nodes] == ["Quant", "Quant", "Gemm", "BatchNormalization", "Relu", "Quant"]
    assert g.dynamic_inputs() == ["X"]


def test_lowering_preserves_outputs(rng):
    g = fc_bn_graph()
    lowered = lower(g)
    xs = rng.uniform([-5.1, -3.8], [5.1, 3.8], size=(300, 2))
    for x in xs:
        expected = run(g, {"X": x[None]})["qy"]
        np.testing.assert_allclose(run(lowered, {"X": x[None]})["qy"], expected, atol=1e-12)


def test_lowering_does_not_touch_its_input():
    g = fc_bn_graph()
    lower(g)
    assert [n.op for n in g.nodes][2:4] == ["Gemm", "BatchNormalization"]


def test_lowering_div_and_sub_by_constant():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.const("c", [2.0, 4.0])
    b.const("d", [1.0, -1.0])
    b.node("Div", ("x", "c"), "a", (1, 2))
    b.node("Sub", ("a", "d"), "y", (1, 2))
    g = lower(b.build(["y"]))
    assert [n.op for n in g.nodes] == ["Mul", "Add"]
    np.testing.assert_allclose(g.constant("c_reciprocal"), [0.5, 0.25])
    np.testing.assert_allclose(run(g, {"x": [[4.0, 8.0]]})["y"], [[1.0, 3.0]])


def test_div_feeding_a_quantizer_stays(streamlined):
    assert lower(streamlined).nodes == streamlined.nodes


def test_lowering_rejects_dynamic_statistics():
    b = GraphBuilder()
    b.input("x", (1, 2))
    b.input("var", (2,))
    for name in ("gamma", "beta", "mean"):
        b.const(name, np.ones(2))
    b.node("BatchNormalization", ("x", "gamma", "beta", "mean", "var"), "y", (1, 2))
    with pytest.raises(LoweringError, match="dynamic statistics"):
        lower(b.build(["y"]))
