import itertools
from dataclasses import dataclass
from typing import Any, Callable, Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import IntervalError

INT_TOL = 1e-9
RATIO_RTOL = 1e-6
AFFINE_RTOL = 1e-9
MAX_CORNER_INPUTS = 3


def broadcast_shapes(shapes: Iterable[Sequence[int]]) -> Tuple[int, ...]:
    """Multidirectional (numpy/ONNX) broadcast of several shapes"""
    shapes = [tuple(int(d) for d in s) for s in shapes]
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise IntervalError(f"incompatible shapes {[list(s) for s in shapes]}") from None


def compact(values) -> np.ndarray:
    """Collapse every axis along which the array is constant to size 1."""
    arr = np.asarray(values, dtype=np.float64)
    for axis in range(arr.ndim):
        if arr.shape[axis] > 1:
            first = np.take(arr, [0], axis=axis)
            if np.allclose(arr, first, rtol=1e-12, atol=0.0):
                arr = first
    return arr


def is_integral(values, tol: float = INT_TOL) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.abs(values - np.round(values)) < tol))


def _nested(values) -> Any:
    return np.asarray(values, dtype=np.float64).tolist()


@dataclass(frozen=True, eq=False)
class Interval:
    """Elementwise closed interval [lo, hi]"""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        shape = broadcast_shapes([lo.shape, hi.shape])
        lo = np.broadcast_to(lo, shape).copy()
        hi = np.broadcast_to(hi, shape).copy()
        if np.isnan(lo).any() or np.isnan(hi).any():
            raise IntervalError("interval bound is NaN")
        if np.any(lo > hi):
            raise IntervalError("interval lower bound exceeds upper bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, value) -> "Interval":
        value = np.asarray(value, dtype=np.float64)
        return cls(value, value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.lo.shape

    @property
    def is_point(self) -> bool:
        return bool(np.array_equal(self.lo, self.hi))

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def broadcast_to(self, shape: Sequence[int]) -> "Interval":
        shape = broadcast_shapes([self.shape, shape])
        return Interval(np.broadcast_to(self.lo, shape), np.broadcast_to(self.hi, shape))

    def contains(self, values, eps: float = INT_TOL) -> bool:
        values = np.asarray(values, dtype=np.float64)
        return bool(np.all(values >= self.lo - eps) and np.all(values <= self.hi + eps))

    def hull(self, other: "Interval") -> "Interval":
        return Interval(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def to_dict(self) -> Dict[str, Any]:
        return {"lo": _nested(self.lo), "hi": _nested(self.hi)}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Interval":
        if isinstance(doc, (list, tuple)) and len(doc) == 2:
            return cls(doc[0], doc[1])
        try:
            return cls(doc["lo"], doc["hi"])
        except (KeyError, TypeError):
            raise IntervalError("interval must be {\"lo\": ..., \"hi\": ...}") from None

    def __repr__(self):
        return f"Interval(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _checked_div(a, b):
    return a / b


# tag -> (arity, function)
FUNCTIONS: Dict[str, Tuple[int, Callable]] = {
    "identity": (1, lambda x: x),
    "relu": (1, lambda x: np.maximum(x, 0.0)),
    "sigmoid": (1, _sigmoid),
    "add": (2, np.add),
    "sub": (2, np.subtract),
    "mul": (2, np.multiply),
    "div": (2, _checked_div),
    "max": (2, np.maximum),
    "min": (2, np.minimum),
}


def monotonic_propagate(f: str, ins: Sequence[Interval]) -> Interval:
    """Propagate intervals through an elementwise function by corner evaluation.

    The output bounds are the elementwise min/max of ``f`` over all 2**k
    combinations of input endpoints, which is exact for functions monotonic
    in each argument (and for the bilinear product).
    """
    if f not in FUNCTIONS:
        raise IntervalError(f"unknown elementwise function '{f}'")
    arity, fn = FUNCTIONS[f]
    if len(ins) != arity:
        raise IntervalError(f"'{f}' takes {arity} input(s), got {len(ins)}")
    if len(ins) > MAX_CORNER_INPUTS:
        raise IntervalError(f"corner enumeration supports at most {MAX_CORNER_INPUTS} inputs")
    shape = broadcast_shapes([i.shape for i in ins])
    if f == "div":
        d = ins[1]
        if np.any((d.lo <= 0.0) & (d.hi >= 0.0)):
            raise IntervalError("division by an interval containing zero")

    corners = [fn(*choice) for choice in itertools.product(*[(i.lo, i.hi) for i in ins])]
    lo = np.broadcast_to(np.minimum.reduce(corners), shape)
    hi = np.broadcast_to(np.maximum.reduce(corners), shape)
    return Interval(lo, hi)


def _split(W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(W, 0.0), np.minimum(W, 0.0)


def dotprod_propagate(W, x_range: Interval) -> Interval:
    """Exact range of W @ x for constant W (M x K) and x in a box (K or K x N)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise IntervalError(f"weight matrix must be 2-D, got shape {list(W.shape)}")
    if x_range.lo.ndim == 0 or x_range.shape[0] != W.shape[1]:
        raise IntervalError(
            f"shape mismatch: weights {list(W.shape)} against input range {list(x_range.shape)}"
        )
    pos, neg = _split(W)
    hi = pos @ x_range.hi + neg @ x_range.lo
    lo = pos @ x_range.lo + neg @ x_range.hi
    return Interval(lo, hi)


def interval_matmul(x_range: Interval, W) -> Interval:
    """Exact range of x @ W for constant W (K x M) and x in a box (... x K)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or x_range.shape[-1:] != W.shape[:1]:
        raise IntervalError(
            f"shape mismatch: input range {list(x_range.shape)} against weights {list(W.shape)}"
        )
    pos, neg = _split(W)
    hi = x_range.hi @ pos + x_range.lo @ neg
    lo = x_range.lo @ pos + x_range.hi @ neg
    return Interval(lo, hi)


def dynamic_matmul(a: Interval, b: Interval) -> Interval:
    """Sound (corner-per-product) range of a @ b when both operands vary."""
    if a.shape[-1] != b.shape[-2]:
        raise IntervalError(f"shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    al, ah = a.lo[..., :, :, None], a.hi[..., :, :, None]
    bl, bh = b.lo[..., None, :, :], b.hi[..., None, :, :]
    corners = [al * bl, al * bh, ah * bl, ah * bh]
    lo = np.minimum.reduce(corners).sum(axis=-2)
    hi = np.maximum.reduce(corners).sum(axis=-2)
    return Interval(lo, hi)


def affine_bounds(int_range: Interval, scale, bias) -> Interval:
    """Full-precision bounds of scale * z + bias for z in ``int_range``."""
    scale = np.asarray(scale, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    a = scale * int_range.lo + bias
    b = scale * int_range.hi + bias
    return Interval(np.minimum(a, b), np.maximum(a, b))


@dataclass(frozen=True, eq=False)
class ScaledIntRange:
    """Range record of one tensor: full-precision interval plus, when known,
    an integer interval with constant scale and bias such that
    ``range == scale * int_range + bias``.
    """
    range: Interval
    int_range: Optional[Interval] = None
    scale: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    contributors: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "contributors", frozenset(self.contributors))
        if self.int_range is None:
            if self.scale is not None or self.bias is not None:
                raise IntervalError("scale/bias given without an integer range")
            return
        if not is_integral(self.int_range.lo) or not is_integral(self.int_range.hi):
            raise IntervalError("integer range has non-integer endpoints")
        if self.scale is None:
            raise IntervalError("integer range given without a scale")
        scale = np.asarray(self.scale, dtype=np.float64)
        bias = np.zeros((1,) * scale.ndim) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        broadcast_shapes([self.range.shape, scale.shape, bias.shape, self.int_range.shape])
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def from_int(cls, int_range: Interval, scale, bias=None, contributors: Iterable[str] = (),
                 shape: Optional[Sequence[int]] = None) -> "ScaledIntRange":
        scale = compact(scale)
        bias = compact(np.zeros(1) if bias is None else bias)
        rng = affine_bounds(int_range, scale, bias)
        if shape is not None:
            rng = rng.broadcast_to(shape)
            int_range = int_range.broadcast_to(shape)
        return cls(rng, int_range, scale, bias, frozenset(contributors))

    @classmethod
    def interval_only(cls, rng: Interval) -> "ScaledIntRange":
        return cls(rng)

    @property
    def is_scaled_int(self) -> bool:
        return self.int_range is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.range.shape

    def full_scale(self) -> np.ndarray:
        return np.broadcast_to(self.scale, self.shape)

    def full_bias(self) -> np.ndarray:
        return np.broadcast_to(self.bias, self.shape)

    def check_affine(self, rtol: float = AFFINE_RTOL) -> None:
        """Raise IntervalError unless range == scale * int_range + bias."""
        if self.int_range is None:
            return
        expected = affine_bounds(self.int_range, self.scale, self.bias).broadcast_to(self.shape)
        ok_lo = np.allclose(self.range.lo, expected.lo, rtol=rtol, atol=rtol)
        ok_hi = np.allclose(self.range.hi, expected.hi, rtol=rtol, atol=rtol)
        if not (ok_lo and ok_hi):
            raise IntervalError("range does not equal scale * int_range + bias")

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"range": self.range.to_dict()}
        if self.int_range is not None:
            doc["int_range"] = self.int_range.to_dict()
            doc["scale"] = _nested(self.scale)
            doc["bias"] = _nested(self.bias)
        if self.contributors:
            doc["contributors"] = sorted(self.contributors)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], shape: Optional[Sequence[int]] = None) -> "ScaledIntRange":
        if "int_range" in doc:
            if "scale" not in doc:
                raise IntervalError("range entry with int_range needs a scale")
            result = cls.from_int(
                Interval.from_dict(doc["int_range"]), doc["scale"], doc.get("bias"),
                doc.get("contributors", ()), shape,
            )
            if "range" in doc:
                given = Interval.from_dict(doc["range"])
                if not (np.allclose(given.lo, result.range.lo, rtol=1e-6, atol=1e-9)
                        and np.allclose(given.hi, result.range.hi, rtol=1e-6, atol=1e-9)):
                    raise IntervalError("range entry is inconsistent with scale * int_range + bias")
            return result
        if "range" not in doc:
            raise IntervalError("range entry needs 'range' or 'int_range'")
        rng = Interval.from_dict(doc["range"])
        if shape is not None:
            rng = rng.broadcast_to(shape)
        return cls(rng)


def negate(r: ScaledIntRange) -> ScaledIntRange:
    """Range of -x; keeps the integer part and flips scale and bias."""
    rng = Interval(-r.range.hi, -r.range.lo)
    if r.int_range is None:
        return ScaledIntRange(rng)
    return ScaledIntRange(rng, r.int_range, -r.scale, -r.bias, r.contributors)
