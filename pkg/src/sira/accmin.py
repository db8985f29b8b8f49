import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from .errors import AccumulatorError
from .graph import MAC_OPS, Graph, NodeSpec, conv_params
from .interval import Interval, ScaledIntRange, is_integral
from .log import get_logger

logger = get_logger(__name__)

BASELINE_BITS = 32


@dataclass
class AccumulatorAnnotation:
    node_id: int
    op: str
    output: str
    K: int
    input_bits: Optional[int] = None
    weight_bits: Optional[int] = None
    datatype_bound_bits: Optional[int] = None
    sira_bits: Optional[int] = None
    output_int_range: Optional[Interval] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node": self.node_id,
            "op": self.op,
            "output": self.output,
            "K": self.K,
            "N": self.input_bits,
            "M": self.weight_bits,
            "P_D": self.datatype_bound_bits,
            "P_S": self.sira_bits,
            "int_range": self.output_int_range.to_dict() if self.output_int_range is not None else None,
        }


def datatype_bound(K: int, N: int, M: int) -> int:
    """Accumulator bits for K products of N-bit unsigned inputs and M-bit signed weights"""
    if K < 1 or N < 1 or M < 1:
        raise AccumulatorError(f"datatype bound needs K, N, M >= 1, got K={K}, N={N}, M={M}")
    alpha = math.log2(K) + N + M - 1
    if float(alpha).is_integer():
        # log2(1 + 2^-alpha) lies in (0, 1]
        return int(alpha) + 2
    return int(math.ceil(alpha + math.log2(1.0 + 2.0 ** -alpha) + 1))


def sira_bound(z_range: Optional[Interval]) -> int:
    """Signed accumulator bits that hold every value of an integer range"""
    if z_range is None:
        raise AccumulatorError("accumulator range has no integer component; streamline the layer first")
    if not (is_integral(z_range.lo) and is_integral(z_range.hi)):
        raise AccumulatorError("accumulator range is not integer valued")
    m = max(int(np.max(np.abs(np.rint(z_range.lo)))), int(np.max(np.abs(np.rint(z_range.hi)))) + 1)
    return (m - 1).bit_length() + 1


def signed_width(lo: int, hi: int) -> int:
    """Minimal two's-complement width holding [lo, hi]"""
    def bits(v: int) -> int:
        return (v.bit_length() if v >= 0 else (-v - 1).bit_length()) + 1
    return max(bits(int(lo)), bits(int(hi)))


def unsigned_width(hi: int) -> int:
    return max(int(hi), 1).bit_length()


def _dot_length(g: Graph, node: NodeSpec) -> int:
    if node.op == "Conv":
        w = g.shape(node.inputs[1])
        p = conv_params(node, w)
        return w[1] * p.kernel[0] * p.kernel[1]
    return g.shape(node.inputs[0])[-1]


def _input_bits(g: Graph, name: str, r: Optional[ScaledIntRange]) -> Optional[int]:
    p = g.producer(name)
    if p is not None and g.nodes[p].op == "Quant":
        return g.nodes[p].quant_spec.bitwidth
    if r is None or r.int_range is None:
        return None
    lo, hi = float(np.min(r.int_range.lo)), float(np.max(r.int_range.hi))
    return unsigned_width(int(hi)) if lo >= 0 else signed_width(int(lo), int(hi))


def _weight_bits(g: Graph, name: str) -> Optional[int]:
    if g.is_constant(name):
        w = g.constant(name)
        if is_integral(w):
            w = np.rint(w)
            return signed_width(int(w.min()), int(w.max()))
    p = g.producer(name)
    if p is not None and g.nodes[p].op == "Quant":
        return g.nodes[p].quant_spec.bitwidth
    return None


def annotate(g: Graph, ranges: Mapping[str, ScaledIntRange]) -> List[AccumulatorAnnotation]:
    """One accumulator annotation per MatMul/Conv node"""
    annotations = []
    for i, node in enumerate(g.nodes):
        if node.op not in MAC_OPS:
            continue
        if node.op == "MatMul" and g.is_constant(node.inputs[0]) and not g.is_constant(node.inputs[1]):
            x, w = node.inputs[1], node.inputs[0]
        else:
            x, w = node.inputs[0], node.inputs[1]
        ann = AccumulatorAnnotation(i, node.op, node.output, _dot_length(g, node))
        ann.input_bits = _input_bits(g, x, ranges.get(x))
        ann.weight_bits = _weight_bits(g, w)
        if ann.input_bits and ann.weight_bits:
            ann.datatype_bound_bits = datatype_bound(ann.K, ann.input_bits, ann.weight_bits)

        r = ranges.get(node.output)
        if r is not None and r.int_range is not None and is_integral(r.int_range.lo) and is_integral(r.int_range.hi):
            ann.output_int_range = r.int_range
            ann.sira_bits = sira_bound(r.int_range)
        else:
            logger.debug("node #%d (%s) has no integer accumulator range", i, node.op)

        if ann.sira_bits and ann.datatype_bound_bits and ann.sira_bits > ann.datatype_bound_bits:
            logger.warning("node #%d (%s): range bound %d exceeds datatype bound %d", i, node.op,
                           ann.sira_bits, ann.datatype_bound_bits)
        annotations.append(ann)
    logger.info("annotated %d accumulator(s)", len(annotations))
    return annotations


def summarize(annotations: List[AccumulatorAnnotation]) -> Dict[str, Any]:
    """Mean widths over layers where both bounds are known"""
    both = [a for a in annotations if a.sira_bits and a.datatype_bound_bits]
    if not both:
        return {"layers": len(annotations), "mean_sira": None, "mean_dtb": None,
                "reduction_pct": None, "reduction_vs_32_pct": None}
    mean_sira = float(np.mean([a.sira_bits for a in both]))
    mean_dtb = float(np.mean([a.datatype_bound_bits for a in both]))
    return {
        "layers": len(annotations),
        "mean_sira": mean_sira,
        "mean_dtb": mean_dtb,
        "reduction_pct": 100.0 * (1.0 - mean_sira / mean_dtb),
        "reduction_vs_32_pct": 100.0 * (1.0 - mean_sira / BASELINE_BITS),
    }


def report(annotations: List[AccumulatorAnnotation]) -> Dict[str, Any]:
    return {"layers": [a.to_dict() for a in annotations], "summary": summarize(annotations)}


def apply_annotations(g: Graph, annotations: List[AccumulatorAnnotation]) -> Graph:
    """Copy of ``g`` with an ``acc_bits`` attribute on every annotated MAC node"""
    out = g.clone()
    for a in annotations:
        if a.sira_bits is None:
            continue
        node = out.nodes[a.node_id]
        out.replace_node(a.node_id, attrs={**node.attrs, "acc_bits": a.sira_bits})
    return out
