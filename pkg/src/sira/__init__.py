"""Scaled-integer range analysis and optimization passes for quantized graphs"""
from .accmin import AccumulatorAnnotation, annotate, apply_annotations, datatype_bound, sira_bound, summarize
from .analysis import RangeAnalyzer, RangeMap, analyze
from .costmodel import (CostEstimate, TailConfig, composite_tail_cost, eltwise_cost, fit_fixed_point,
                        recommend_tail, sweep, threshold_cost)
from .errors import SiraError
from .graph import (Graph, NodeSpec, QuantSpec, TensorInfo, load_graph, lower, parse_graph, save_graph,
                    serialize_graph, topo_sort)
from .interpreter import ExecutionTrace, run, verify_ranges
from .interval import Interval, ScaledIntRange, dotprod_propagate, monotonic_propagate
from .streamline import (TargetSelection, aggregate_scale_bias, duplicate_shared_params, make_quant_scaling_explicit,
                         streamline)
from .threshold import (ThresholdTable, convert_tails, eval_binary_search, eval_parallel, extract_thresholds,
                        sign_bias)

__version__ = "0.1.0"

__all__ = [
    "AccumulatorAnnotation", "CostEstimate", "ExecutionTrace", "Graph", "Interval", "NodeSpec", "QuantSpec",
    "RangeAnalyzer", "RangeMap", "ScaledIntRange", "SiraError", "TailConfig", "TargetSelection",
    "TensorInfo", "ThresholdTable", "aggregate_scale_bias", "analyze", "annotate", "apply_annotations",
    "composite_tail_cost", "convert_tails", "datatype_bound", "dotprod_propagate", "duplicate_shared_params",
    "eltwise_cost", "eval_binary_search", "eval_parallel", "extract_thresholds", "fit_fixed_point",
    "load_graph", "lower", "make_quant_scaling_explicit", "monotonic_propagate", "parse_graph",
    "recommend_tail", "run", "save_graph", "serialize_graph", "sign_bias", "sira_bound", "streamline",
    "summarize", "sweep", "threshold_cost", "topo_sort", "verify_ranges",
]
