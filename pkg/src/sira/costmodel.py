import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, TextIO

import numpy as np

from .errors import CostModelError


# op -> (alpha, beta) of the LUT model alpha * width * PE + beta
ELTWISE_COEFFS: Dict[str, tuple] = {
    "Mul": (1.18, 124.0),
    "Add": (2.0, 24.0),
    "ToInt": (4.2, 13.0),
    "Max": (4.0, 21.0),
}
MODEL_MRE = {"eltwise": 0.04, "thresholding": 0.15}
LUT_BITS = 64
MAX_FRACTION_BITS = 32
GRANULARITIES = ("per_tensor", "per_channel")


@dataclass(frozen=True)
class TailConfig:
    n_i: int = 16
    n_p: int = 16
    n_o: int = 4
    C: int = 64
    PE: int = 1
    granularity: str = "per_channel"

    def __post_init__(self):
        for key in ("n_i", "n_p", "n_o", "C", "PE"):
            value = getattr(self, key)
            if int(value) != value or value < 1:
                raise CostModelError(f"{key} must be a positive integer, got {value}")
        if self.PE > self.C:
            raise CostModelError(f"PE={self.PE} exceeds C={self.C}")
        if self.granularity not in GRANULARITIES:
            raise CostModelError(f"unknown granularity '{self.granularity}'")

    @property
    def param_channels(self) -> int:
        return self.C if self.granularity == "per_channel" else 1


@dataclass
class CostEstimate:
    lut_compute: float
    lut_memory: float = 0.0
    breakdown: Dict[str, float] = field(default_factory=dict)

    @property
    def lut_total(self) -> float:
        return self.lut_compute + self.lut_memory

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lut_compute": self.lut_compute,
            "lut_memory": self.lut_memory,
            "lut_total": self.lut_total,
            "breakdown": dict(self.breakdown),
        }


def _eltwise(op: str, width: float, PE: int) -> float:
    try:
        alpha, beta = ELTWISE_COEFFS[op]
    except KeyError:
        raise CostModelError(f"no cost model for elementwise op '{op}'") from None
    return alpha * width * PE + beta


def eltwise_cost(op: str, cfg: TailConfig) -> CostEstimate:
    """LUT estimate of a single elementwise kernel"""
    if op == "Mul":
        width = cfg.n_i * cfg.n_p
    elif op == "Add":
        width = cfg.n_i + cfg.n_p
    else:
        width = cfg.n_i
    value = _eltwise(op, width, cfg.PE)
    return CostEstimate(value, 0.0, {op: value})


def composite_tail_cost(cfg: TailConfig) -> CostEstimate:
    """Mul -> Add -> Max -> Mul -> ToInt chain with lossless bit growth"""
    n_i, n_p, PE = cfg.n_i, cfg.n_p, cfg.PE
    product = n_i + n_p
    wide = product + 1
    breakdown = {
        "Mul": _eltwise("Mul", n_i * n_p, PE),
        "Add": _eltwise("Add", product + n_p, PE),
        "Max": _eltwise("Max", wide, PE),
        "Mul_out": _eltwise("Mul", wide * n_p, PE),
        "ToInt": _eltwise("ToInt", wide, PE),
    }
    memory = 2 * cfg.param_channels * n_p / LUT_BITS
    return CostEstimate(sum(breakdown.values()), memory, breakdown)


def threshold_cost(cfg: TailConfig) -> CostEstimate:
    mem_bits = (2 ** cfg.n_o - 1) * cfg.param_channels * cfg.n_i
    compute = cfg.n_o * cfg.PE * cfg.n_i
    return CostEstimate(float(compute), mem_bits / LUT_BITS, {"comparators": float(compute)})


@dataclass
class TailRecommendation:
    choice: str
    threshold: CostEstimate
    composite: CostEstimate

    def to_dict(self) -> Dict[str, Any]:
        return {
            "choice": self.choice,
            "threshold": self.threshold.to_dict(),
            "composite": self.composite.to_dict(),
            "model_mre": dict(MODEL_MRE),
        }


def recommend_tail(cfg: TailConfig) -> TailRecommendation:
    """Cheaper of the two implementations; ties go to thresholding"""
    thr = threshold_cost(cfg)
    comp = composite_tail_cost(cfg)
    choice = "thresholding" if thr.lut_total <= comp.lut_total else "composite"
    return TailRecommendation(choice, thr, comp)


@dataclass(frozen=True)
class FixedPointFormat:
    W: int
    I: int
    F: int
    max_rel_error: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def fit_fixed_point(values, max_rel_err: float) -> FixedPointFormat:
    """Smallest signed fixed-point format meeting a relative error bound.

    The integer part is always lossless; fraction bits are added until
    every nonzero value rounds within ``max_rel_err`` of itself.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise CostModelError("fixed-point fitting needs finite values")
    if max_rel_err < 0:
        raise CostModelError(f"max_rel_err must be non-negative, got {max_rel_err}")
    int_bits = int(math.floor(np.max(np.abs(values)))).bit_length() + 1
    nonzero = values[values != 0]
    for frac in range(MAX_FRACTION_BITS + 1):
        step = 2.0 ** frac
        if nonzero.size:
            err = float(np.max(np.abs(np.round(nonzero * step) / step - nonzero) / np.abs(nonzero)))
        else:
            err = 0.0
        if err <= max_rel_err:
            return FixedPointFormat(int_bits + frac, int_bits, frac, err)
    raise CostModelError(
        f"relative error {max_rel_err} not reachable with {MAX_FRACTION_BITS} fraction bits"
    )


def pot_flags(values) -> List[bool]:
    """Whether each value is a signed power of two"""
    flags = []
    for v in np.asarray(values, dtype=np.float64).reshape(-1):
        if v == 0:
            flags.append(False)
            continue
        mantissa, _ = math.frexp(abs(float(v)))
        flags.append(mantissa == 0.5)
    return flags


def sweep(base: TailConfig, param: str, values: Iterable[int]) -> List[Dict[str, Any]]:
    """One row per value of ``param``; ``crossover`` marks a change of winner"""
    rows = []
    previous: Optional[str] = None
    for value in values:
        try:
            cfg = replace(base, **{param: value})
        except TypeError:
            raise CostModelError(f"unknown sweep parameter '{param}'") from None
        rec = recommend_tail(cfg)
        row = asdict(cfg)
        row.update({
            "threshold_total": rec.threshold.lut_total,
            "composite_total": rec.composite.lut_total,
            "winner": rec.choice,
            "crossover": previous is not None and rec.choice != previous,
        })
        previous = rec.choice
        rows.append(row)
    return rows


def write_csv(rows: List[Dict[str, Any]], stream: TextIO) -> None:
    if not rows:
        return
    writer = csv.DictWriter(stream, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
