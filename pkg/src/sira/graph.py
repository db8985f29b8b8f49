import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .errors import GraphError, LoweringError
from .log import get_logger

logger = get_logger(__name__)

# op -> (min inputs, max inputs, outputs)
ARITY: Dict[str, Tuple[int, int, int]] = {
    "Quant": (3, 3, 1),
    "MatMul": (2, 2, 1),
    "Conv": (2, 3, 1),
    "Add": (2, 2, 1),
    "Mul": (2, 2, 1),
    "Div": (2, 2, 1),
    "Sub": (2, 2, 1),
    "Relu": (1, 1, 1),
    "Gemm": (2, 3, 1),
    "BatchNormalization": (5, 5, 1),
    "MultiThreshold": (2, 2, 1),
}
OPS = tuple(ARITY)

ALLOWED_ATTRS: Dict[str, frozenset] = {
    "Quant": frozenset({"bitwidth", "signed", "narrow"}),
    "MatMul": frozenset({"acc_bits"}),
    "Conv": frozenset({"kernel", "stride", "pad", "group", "acc_bits"}),
    "BatchNormalization": frozenset({"epsilon"}),
    "MultiThreshold": frozenset({"bias", "out_bits"}),
}
REQUIRED_ATTRS: Dict[str, frozenset] = {
    "Quant": frozenset({"bitwidth", "signed"}),
    "MultiThreshold": frozenset({"bias", "out_bits"}),
}

ELEMENTWISE_BINARY = ("Add", "Mul", "Div", "Sub")
MAC_OPS = ("MatMul", "Conv")


@dataclass(frozen=True)
class QuantSpec:
    """Integer clipping bounds of a Quant node"""
    bitwidth: int
    signed: bool = True
    narrow: bool = False

    def __post_init__(self):
        if not isinstance(self.bitwidth, (int, np.integer)) or self.bitwidth < 1:
            raise GraphError(f"Quant bitwidth must be a positive integer, got {self.bitwidth!r}")
        if self.narrow and not self.signed:
            raise GraphError("Quant narrow range is only valid when signed is set")

    @property
    def qmin(self) -> int:
        if not self.signed:
            return 0
        low = -(2 ** (self.bitwidth - 1))
        return low + 1 if self.narrow else low

    @property
    def qmax(self) -> int:
        if not self.signed:
            return 2 ** self.bitwidth - 1
        return 2 ** (self.bitwidth - 1) - 1

    @classmethod
    def from_attrs(cls, attrs: Dict[str, Any]) -> "QuantSpec":
        return cls(
            bitwidth=int(attrs["bitwidth"]),
            signed=bool(attrs.get("signed", True)),
            narrow=bool(attrs.get("narrow", False)),
        )

    def to_attrs(self) -> Dict[str, Any]:
        return {"bitwidth": int(self.bitwidth), "signed": int(self.signed), "narrow": int(self.narrow)}


@dataclass(frozen=True, eq=False)
class TensorInfo:
    name: str
    shape: Tuple[int, ...]
    is_constant: bool = False
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d < 1 for d in shape):
            raise GraphError(f"tensor '{self.name}' has non-positive dimension in shape {list(shape)}")
        object.__setattr__(self, "shape", shape)
        if self.is_constant:
            if self.data is None:
                raise GraphError(f"constant tensor '{self.name}' has no data")
            data = np.asarray(self.data, dtype=np.float64)
            size = int(np.prod(shape)) if shape else 1
            if data.size != size:
                raise GraphError(
                    f"tensor '{self.name}' has {data.size} data values, shape {list(shape)} needs {size}"
                )
            object.__setattr__(self, "data", data.reshape(shape))
        elif self.data is not None:
            raise GraphError(f"dynamic tensor '{self.name}' must not carry data")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __eq__(self, other):
        if not isinstance(other, TensorInfo):
            return NotImplemented
        if (self.name, self.shape, self.is_constant) != (other.name, other.shape, other.is_constant):
            return False
        if self.data is None or other.data is None:
            return self.data is None and other.data is None
        return bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class NodeSpec:
    op: str
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "attrs", dict(self.attrs))

    @property
    def output(self) -> str:
        return self.outputs[0]

    @property
    def quant_spec(self) -> QuantSpec:
        return QuantSpec.from_attrs(self.attrs)


@dataclass(frozen=True)
class ConvParams:
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    pad: Tuple[int, int]
    group: int


def _pair(value, default: int) -> Tuple[int, int]:
    if value is None:
        return (default, default)
    if isinstance(value, (list, tuple)):
        if len(value) == 1:
            return (int(value[0]), int(value[0]))
        return (int(value[0]), int(value[1]))
    return (int(value), int(value))


def conv_params(node: NodeSpec, weight_shape: Optional[Tuple[int, ...]] = None) -> ConvParams:
    """Conv attributes with defaults applied (stride 1, pad 0, group 1)"""
    kernel = node.attrs.get("kernel")
    if kernel is None:
        if weight_shape is None:
            raise GraphError("Conv kernel attribute missing and weight shape unknown")
        kernel = list(weight_shape[2:4])
    return ConvParams(
        kernel=_pair(kernel, 1),
        stride=_pair(node.attrs.get("stride"), 1),
        pad=_pair(node.attrs.get("pad"), 0),
        group=int(node.attrs.get("group", 1)),
    )


def channel_axis(rank: int) -> int:
    return 1 if rank >= 2 else 0


def node_label(index: int, node: NodeSpec) -> str:
    return f"node #{index} ({node.op})"


@dataclass(eq=False)
class Graph:
    """Named-tensor dataflow graph.

    Passes never mutate a graph they were handed: they ``clone()`` it and
    edit the copy.
    """
    tensors: Dict[str, TensorInfo]
    nodes: List[NodeSpec]
    inputs: List[str]
    outputs: List[str]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.tensors == other.tensors
            and self.nodes == other.nodes
            and list(self.inputs) == list(other.inputs)
            and list(self.outputs) == list(other.outputs)
        )

    def clone(self) -> "Graph":
        return Graph(dict(self.tensors), list(self.nodes), list(self.inputs), list(self.outputs))

    def tensor(self, name: str) -> TensorInfo:
        try:
            return self.tensors[name]
        except KeyError:
            raise GraphError(f"unknown tensor '{name}'") from None

    def shape(self, name: str) -> Tuple[int, ...]:
        return self.tensor(name).shape

    def is_constant(self, name: str) -> bool:
        info = self.tensors.get(name)
        return info is not None and info.is_constant

    def constant(self, name: str) -> np.ndarray:
        info = self.tensor(name)
        if not info.is_constant:
            raise GraphError(f"tensor '{name}' is not constant")
        return info.data

    def producers(self) -> Dict[str, int]:
        return {out: i for i, node in enumerate(self.nodes) for out in node.outputs}

    def producer(self, name: str) -> Optional[int]:
        return self.producers().get(name)

    def consumer_map(self) -> Dict[str, List[int]]:
        result: Dict[str, List[int]] = {}
        for i, node in enumerate(self.nodes):
            for name in node.inputs:
                lst = result.setdefault(name, [])
                if i not in lst:
                    lst.append(i)
        return result

    def consumers(self, name: str) -> List[int]:
        return self.consumer_map().get(name, [])

    def dynamic_inputs(self) -> List[str]:
        return [name for name in self.inputs if not self.is_constant(name)]

    def fresh_name(self, base: str) -> str:
        if base not in self.tensors:
            return base
        i = 1
        while f"{base}_{i}" in self.tensors:
            i += 1
        return f"{base}_{i}"

    def add_constant(self, base: str, value) -> str:
        name = self.fresh_name(base)
        value = np.asarray(value, dtype=np.float64)
        self.tensors[name] = TensorInfo(name, value.shape, True, value)
        return name

    def add_tensor(self, base: str, shape: Iterable[int]) -> str:
        name = self.fresh_name(base)
        self.tensors[name] = TensorInfo(name, tuple(shape))
        return name

    def set_constant(self, name: str, value) -> None:
        old = self.tensor(name)
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), old.shape)
        self.tensors[name] = TensorInfo(name, old.shape, True, value.copy())

    def replace_node(self, index: int, **changes) -> None:
        self.nodes[index] = replace(self.nodes[index], **changes)

    def validate(self) -> None:
        validate_graph(self)

    def to_json(self) -> str:
        return serialize_graph(self)


def validate_graph(g: Graph) -> None:
    """Check every structural invariant, raising GraphError on the first violation"""
    for name, info in g.tensors.items():
        if name != info.name:
            raise GraphError(f"tensor key '{name}' does not match its name '{info.name}'")

    produced: Dict[str, int] = {}
    for i, node in enumerate(g.nodes):
        label = node_label(i, node)
        if node.op not in ARITY:
            raise GraphError(f"unknown op '{node.op}' in {label}")
        lo, hi, n_out = ARITY[node.op]
        if not lo <= len(node.inputs) <= hi:
            raise GraphError(f"{label} takes {lo}..{hi} inputs, got {len(node.inputs)}")
        if len(node.outputs) != n_out:
            raise GraphError(f"{label} produces {n_out} output(s), got {len(node.outputs)}")
        allowed = ALLOWED_ATTRS.get(node.op, frozenset())
        unknown = set(node.attrs) - allowed
        if unknown:
            raise GraphError(f"{label} has unknown attribute(s) {sorted(unknown)}")
        missing = REQUIRED_ATTRS.get(node.op, frozenset()) - set(node.attrs)
        if missing:
            raise GraphError(f"{label} is missing attribute(s) {sorted(missing)}")
        if node.op == "Quant":
            try:
                node.quant_spec
            except GraphError as e:
                raise GraphError(f"{label}: {e}") from None
        if node.op == "Conv":
            params = conv_params(node, g.tensors[node.inputs[1]].shape if node.inputs[1] in g.tensors else None)
            if params.group < 1 or min(params.stride) < 1 or min(params.pad) < 0:
                raise GraphError(f"{label} has invalid stride/pad/group")
        for name in node.inputs:
            if name not in g.tensors:
                raise GraphError(f"dangling reference to tensor '{name}' in {label}")
        for name in node.outputs:
            if name not in g.tensors:
                raise GraphError(f"dangling reference to tensor '{name}' in {label}")
            if g.tensors[name].is_constant:
                raise GraphError(f"{label} writes constant tensor '{name}'")
            if name in g.inputs:
                raise GraphError(f"{label} writes graph input '{name}'")
            if name in produced:
                j = produced[name]
                raise GraphError(
                    f"tensor '{name}' produced by both {node_label(j, g.nodes[j])} and {label}"
                )
            produced[name] = i

    for name in g.inputs:
        if name not in g.tensors:
            raise GraphError(f"graph input '{name}' is not a declared tensor")
    for name in g.outputs:
        if name not in g.tensors:
            raise GraphError(f"graph output '{name}' is not a declared tensor")

    referenced = {n for node in g.nodes for n in node.inputs} | set(g.outputs)
    for name in referenced:
        info = g.tensors[name]
        if not info.is_constant and name not in g.inputs and name not in produced:
            raise GraphError(f"tensor '{name}' is neither constant, a graph input nor produced by a node")

    topo_order(g)


def topo_order(g: Graph) -> List[int]:
    """Stable Kahn ordering: among ready nodes the one listed first goes first"""
    producers = g.producers()
    pending: List[int] = []
    dependants: Dict[int, List[int]] = {}
    for i, node in enumerate(g.nodes):
        deps = {producers[n] for n in node.inputs if n in producers}
        pending.append(len(deps))
        for d in deps:
            dependants.setdefault(d, []).append(i)

    ready = [i for i, count in enumerate(pending) if count == 0]
    heapq.heapify(ready)
    order: List[int] = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in dependants.get(i, []):
            pending[j] -= 1
            if pending[j] == 0:
                heapq.heappush(ready, j)

    if len(order) != len(g.nodes):
        stuck = [node_label(i, g.nodes[i]) for i in range(len(g.nodes)) if i not in set(order)]
        raise GraphError(f"cycle detected among {', '.join(stuck)}")
    return order


def topo_sort(g: Graph) -> List[NodeSpec]:
    return [g.nodes[i] for i in topo_order(g)]


def _require(doc: Dict[str, Any], key: str, kind, where: str):
    if key not in doc:
        raise GraphError(f"{where} is missing '{key}'")
    value = doc[key]
    if not isinstance(value, kind):
        raise GraphError(f"{where} field '{key}' has the wrong type")
    return value


def graph_from_dict(doc: Dict[str, Any]) -> Graph:
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a JSON object")
    tensors: Dict[str, TensorInfo] = {}
    for entry in _require(doc, "tensors", list, "graph document"):
        if not isinstance(entry, dict):
            raise GraphError("tensor entries must be objects")
        name = _require(entry, "name", str, "tensor entry")
        where = f"tensor '{name}'"
        shape = _require(entry, "shape", list, where)
        constant = bool(entry.get("constant", False))
        data = entry.get("data")
        if constant and data is None:
            raise GraphError(f"{where} is constant but has no data")
        if name in tensors:
            raise GraphError(f"duplicate tensor name '{name}'")
        tensors[name] = TensorInfo(name, tuple(shape), constant, data)

    nodes: List[NodeSpec] = []
    for i, entry in enumerate(_require(doc, "nodes", list, "graph document")):
        if not isinstance(entry, dict):
            raise GraphError(f"node #{i} must be an object")
        where = f"node #{i}"
        nodes.append(NodeSpec(
            op=_require(entry, "op", str, where),
            inputs=tuple(_require(entry, "inputs", list, where)),
            outputs=tuple(_require(entry, "outputs", list, where)),
            attrs=dict(entry.get("attrs") or {}),
        ))

    g = Graph(
        tensors=tensors,
        nodes=nodes,
        inputs=list(_require(doc, "inputs", list, "graph document")),
        outputs=list(_require(doc, "outputs", list, "graph document")),
    )
    validate_graph(g)
    return g


def parse_graph(text: str) -> Graph:
    """Parse and validate a JSON graph document"""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"graph document is not valid JSON: {e}") from None
    return graph_from_dict(doc)


def _json_attr(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_json_attr(v) for v in value]
    return value


def graph_to_dict(g: Graph) -> Dict[str, Any]:
    tensors = []
    for info in g.tensors.values():
        entry: Dict[str, Any] = {"name": info.name, "shape": list(info.shape), "constant": info.is_constant}
        if info.is_constant:
            entry["data"] = info.data.ravel().tolist()
        tensors.append(entry)
    nodes = [
        {
            "op": node.op,
            "inputs": list(node.inputs),
            "outputs": list(node.outputs),
            "attrs": {k: _json_attr(v) for k, v in node.attrs.items()},
        }
        for node in g.nodes
    ]
    return {"tensors": tensors, "nodes": nodes, "inputs": list(g.inputs), "outputs": list(g.outputs)}


def serialize_graph(g: Graph) -> str:
    return json.dumps(graph_to_dict(g), indent=2)


def load_graph(path: Union[str, Path]) -> Graph:
    return parse_graph(Path(path).read_text())


def save_graph(g: Graph, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_graph(g) + "\n")


def _feeds_quant_input(g: Graph, name: str, consumers: Dict[str, List[int]]) -> bool:
    idx = consumers.get(name, [])
    return bool(idx) and all(g.nodes[i].op == "Quant" and g.nodes[i].inputs[0] == name for i in idx)


def _channel_shape(rank: int, channels: int) -> Tuple[int, ...]:
    if rank <= 2:
        return (channels,)
    return (channels,) + (1,) * (rank - 2)


def lower(g: Graph) -> Graph:
    """Rewrite compound operators into MatMul/Conv/Mul/Add form.

    Gemm becomes MatMul (+ Add), BatchNormalization becomes Mul then Add with
    M = gamma / sqrt(var + eps) and N = beta - M * mean, Div and Sub by a
    constant become Mul by the reciprocal and Add of the negation. A Div that
    only feeds a Quant input is explicit quantizer scaling and stays.
    """
    out = g.clone()
    consumers = g.consumer_map()
    nodes: List[NodeSpec] = []
    rewritten = 0

    for i, node in enumerate(g.nodes):
        label = node_label(i, node)
        y = node.output

        if node.op == "Gemm":
            if len(node.inputs) == 3:
                mm = out.add_tensor(f"{y}_matmul", out.shape(y))
                nodes.append(NodeSpec("MatMul", node.inputs[:2], (mm,)))
                nodes.append(NodeSpec("Add", (mm, node.inputs[2]), (y,)))
            else:
                nodes.append(NodeSpec("MatMul", node.inputs, (y,)))
            rewritten += 1

        elif node.op == "BatchNormalization":
            x, gamma, beta, mean, var = node.inputs
            for name in (gamma, beta, mean, var):
                if not out.is_constant(name):
                    raise LoweringError(f"{label} has dynamic statistics tensor '{name}'")
            eps = float(node.attrs.get("epsilon", 1e-5))
            m = out.constant(gamma) / np.sqrt(out.constant(var) + eps)
            n = out.constant(beta) - m * out.constant(mean)
            shape = _channel_shape(len(out.shape(x)), m.size)
            m_name = out.add_constant(f"{y}_mul", m.reshape(shape))
            n_name = out.add_constant(f"{y}_add", n.reshape(shape))
            scaled = out.add_tensor(f"{y}_scaled", out.shape(y))
            nodes.append(NodeSpec("Mul", (x, m_name), (scaled,)))
            nodes.append(NodeSpec("Add", (scaled, n_name), (y,)))
            rewritten += 1

        elif node.op == "Div":
            x, c = node.inputs
            if not out.is_constant(c):
                raise LoweringError(f"{label} has dynamic divisor '{c}'")
            if _feeds_quant_input(g, y, consumers):
                nodes.append(node)
                continue
            value = out.constant(c)
            if np.any(value == 0):
                raise LoweringError(f"{label} divides by zero in '{c}'")
            r = out.add_constant(f"{c}_reciprocal", 1.0 / value)
            nodes.append(NodeSpec("Mul", (x, r), (y,)))
            rewritten += 1

        elif node.op == "Sub" and out.is_constant(node.inputs[1]):
            x, c = node.inputs
            neg = out.add_constant(f"{c}_neg", -out.constant(c))
            nodes.append(NodeSpec("Add", (x, neg), (y,)))
            rewritten += 1

        elif node.op == "Conv" and len(node.inputs) == 3:
            x, w, b = node.inputs
            conv = out.add_tensor(f"{y}_conv", out.shape(y))
            attrs = dict(node.attrs)
            nodes.append(NodeSpec("Conv", (x, w), (conv,), attrs))
            if out.is_constant(b):
                bias = out.constant(b)
                b = out.add_constant(f"{b}_channel", bias.reshape(_channel_shape(len(out.shape(y)), bias.size)))
            nodes.append(NodeSpec("Add", (conv, b), (y,)))
            rewritten += 1

        else:
            nodes.append(node)

    out.nodes = nodes
    if rewritten:
        prune_unused(out)
        logger.info("lowered %d compound node(s)", rewritten)
    validate_graph(out)
    return out


def prune_unused(g: Graph) -> None:
    """Drop tensors no node or graph interface refers to (in place on a clone)"""
    used = set(g.inputs) | set(g.outputs)
    for node in g.nodes:
        used.update(node.inputs)
        used.update(node.outputs)
    for name in list(g.tensors):
        if name not in used:
            del g.tensors[name]
