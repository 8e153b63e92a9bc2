"""Dense tensor type and the numeric primitives the rest of the toolkit builds on.

Conventions fixed here and relied on everywhere else:

* tensors are row-major numpy arrays, float32 or float16;
* 2-D weight matrices are [out_channels, in_features] and quantization
  groups run along the last (input-feature) axis, ``group_size`` columns
  per group, with a ragged final group when the row length is not a
  multiple of the group size;
* ``matmul`` accumulates over the inner dimension in increasing index
  order, one rank-1 update at a time, so that independently written
  scalar-loop oracles (and the fused quantized kernels) can demand exact
  float32 equality rather than an approximate tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, InvariantError

SUPPORTED_DTYPES = {"float32": np.float32, "float16": np.float16}


def _dtype_name(dtype) -> str:
    name = np.dtype(dtype).name
    if name not in SUPPORTED_DTYPES:
        raise InvariantError(f"unsupported tensor dtype {name!r}")
    return name


@dataclass(frozen=True)
class Tensor:
    """Named dense array with validated shape, dtype and finiteness.

    ``data`` always has shape ``dims``; construction rejects NaN/Inf,
    zero-sized dims and dtypes other than float32/float16. Instances are
    treated as immutable: the buffer is flagged read-only so accidental
    in-place mutation downstream raises instead of corrupting shared state.
    """

    name: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data))
        _dtype_name(arr.dtype)
        if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
            raise InvariantError(f"tensor {self.name!r}: dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvariantError(f"tensor {self.name!r}: non-finite elements")
        if arr.flags.writeable:
            # copy rather than freezing the caller's buffer in place
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, name: str, dims, dtype: str, buffer: np.ndarray | bytes) -> "Tensor":
        """Build a tensor from a flat row-major buffer, checking the length."""
        if dtype not in SUPPORTED_DTYPES:
            raise InvariantError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        flat = np.frombuffer(buffer, dtype=SUPPORTED_DTYPES[dtype]) if isinstance(buffer, bytes) \
            else np.asarray(buffer, dtype=SUPPORTED_DTYPES[dtype]).ravel()
        expected = math.prod(dims)
        if flat.size != expected:
            raise InvariantError(
                f"tensor {name!r}: buffer holds {flat.size} elements, dims {tuple(dims)} need {expected}"
            )
        return cls(name, flat.reshape(tuple(dims)).copy())

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _dtype_name(self.data.dtype)

    @property
    def numel(self) -> int:
        return self.data.size


@dataclass(frozen=True)
class GroupView:
    """One quantization group: a contiguous span of a single channel (row).

    The (channel, group_size) partition of a 2-D tensor is exhaustive and
    disjoint; the final group of each channel may be shorter than
    ``group_size``.
    """

    parent: Tensor
    channel: int
    group_index: int
    start: int
    stop: int

    def __post_init__(self):
        rows, cols = _require_2d(self.parent.data, "GroupView parent")
        if not (0 <= self.channel < rows):
            raise DimensionError(f"channel {self.channel} out of range for {rows} rows")
        if not (0 <= self.start < self.stop <= cols):
            raise DimensionError(f"span [{self.start},{self.stop}) invalid for {cols} columns")

    @property
    def values(self) -> np.ndarray:
        return self.parent.data[self.channel, self.start : self.stop]


def _require_2d(arr: np.ndarray, what: str) -> tuple[int, int]:
    if arr.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {arr.shape}")
    return arr.shape


def as_array(values) -> np.ndarray:
    """Unwrap a Tensor to its ndarray; pass ndarrays through."""
    return values.data if isinstance(values, Tensor) else np.asarray(values)


def group_spans(n_cols: int, group_size: int) -> list[tuple[int, int]]:
    """Column spans of the group partition for one channel."""
    if group_size < 1:
        raise DomainError(f"group_size must be >= 1, got {group_size}")
    return [(s, min(s + group_size, n_cols)) for s in range(0, n_cols, group_size)]


def iter_groups(tensor: Tensor, group_size: int):
    """Yield every GroupView of a 2-D tensor in (channel, group) order."""
    rows, cols = _require_2d(tensor.data, f"tensor {tensor.name!r}")
    spans = group_spans(cols, group_size)
    for channel in range(rows):
        for g, (start, stop) in enumerate(spans):
            yield GroupView(tensor, channel, g, start, stop)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with a fixed inner-dimension accumulation order.

    Accumulates one rank-1 update per inner index, in increasing order.
    Per output element this performs exactly the rounding sequence of the
    scalar loop ``acc = fl(acc + fl(a[i,k]*b[k,j]))`` for k = 0..K-1, which
    is the contract the quantized kernels and their oracle share.
    """
    a = as_array(a)
    b = as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.dtype != np.float32 or b.dtype != np.float32:
        raise DimensionError("matmul operands must be float32")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims differ: {a.shape} x {b.shape}")
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        acc += a[:, k : k + 1] * b[k : k + 1, :]
    return acc


def select_top_fraction(values: np.ndarray, top_fraction: float) -> np.ndarray:
    """Boolean mask of the ceil(top_fraction * N) largest |values|.

    Ties are broken by flat index: when several elements share the
    threshold magnitude, lower flat indices win the contested slots, so
    the selected count is exact for every input including all-ties.
    """
    values = as_array(values)
    if values.size == 0:
        raise DomainError("cannot select from an empty tensor")
    if not (0.0 < top_fraction <= 1.0):
        raise DomainError(f"top_fraction must be in (0, 1], got {top_fraction}")
    k = math.ceil(top_fraction * values.size)
    magnitude = np.abs(values.ravel())
    # stable sort on -|v|: descending magnitude, flat-index order within ties
    order = np.argsort(-magnitude, kind="stable")
    mask = np.zeros(values.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(values.shape)


def abs_quantile(values: np.ndarray, top_fraction: float) -> float:
    """Magnitude threshold of the top-fraction selection rule.

    Returns the ceil(top_fraction * N)-th largest |value|: the smallest
    magnitude inside the selected set under the flat-index tie-break.
    """
    values = as_array(values)
    if values.size == 0:
        raise DomainError("abs_quantile of an empty tensor")
    if not (0.0 < top_fraction <= 1.0):
        raise DomainError(f"top_fraction must be in (0, 1], got {top_fraction}")
    k = math.ceil(top_fraction * values.size)
    magnitude = np.abs(values.ravel())
    return float(np.partition(magnitude, values.size - k)[values.size - k])


def group_min_max(view: GroupView) -> tuple[float, float]:
    """Elementwise min and max over one group's span."""
    vals = view.values
    if vals.size == 0:
        raise DomainError("empty group span")
    return float(vals.min()), float(vals.max())
