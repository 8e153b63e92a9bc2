"""Per-channel, per-group asymmetric round-to-nearest quantization with a
sparse FP16 outlier store.

Scheme, per group of ``group_size`` consecutive input features within one
output channel:

    scale      = (max - min) / 2^(bits-1)        over non-outlier members
    zero_point = -min / scale                    (kept fractional)
    code       = clamp(round(w / scale + zero_point), 0, 2^bits - 1)
    value      = scale * (code - zero_point)

``round`` is half-away-from-zero. The 2^(bits-1) divisor is the scheme's
native convention (codes occupy [0, 2^(bits-1)], leaving headroom below
the clamp ceiling); ``full_range=True`` switches to the conventional
2^bits - 1 divisor for comparisons.

Scales and zero points are stored as float16. Codes are computed against
the float16-rounded values, so the reconstruction bound
|w - dequant(quant(w))| <= scale/2 (plus float rounding slack) holds for
exactly the representation that is serialized. A degenerate group
(max == min, or a range that underflows float16) stores scale = 1 and
zero_point = -min so every member dequantizes to the stored min; a group
that is entirely outliers stores scale = 1, zero_point = 0 and inert
codes.

Masked (outlier) positions are excluded from group statistics, carry a
placeholder code of 0 in the dense code stream, and are stored separately
as float16 values addressed by strictly increasing flat indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .container import ModelBundle
from .errors import DimensionError, DomainError, EncodingError, InvariantError, UsageError
from .sensitivity import OutlierMask
from .tensor import Tensor, as_array, group_spans

SUPPORTED_BITS = (2, 3, 4, 8)
FLOAT16_MAX = 65504.0


def default_quantize_set(name: str, dims: tuple[int, ...]) -> bool:
    """2-D attention/MLP projections and the output head; embeddings,
    positional tables and norm gains pass through."""
    if len(dims) != 2:
        return False
    return ".attn." in name or ".mlp." in name or name == "lm_head"


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 16
    outlier_fraction: float = 0.01
    scope: str = "per_layer"
    outlier_dtype: str = "float16"
    quantize_set: Callable[[str, tuple[int, ...]], bool] = default_quantize_set
    # ablation switches, not serialized
    stats_include_outliers: bool = False
    full_range: bool = False

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise UsageError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise UsageError(f"group_size must be >= 1, got {self.group_size}")
        if not (0.0 < self.outlier_fraction <= 1.0):
            raise UsageError(f"outlier_fraction must be in (0, 1], got {self.outlier_fraction}")
        if self.scope not in ("per_layer", "global"):
            raise UsageError(f"scope must be per_layer or global, got {self.scope!r}")
        if self.outlier_dtype != "float16":
            raise UsageError("outliers are stored as float16")
        # pin to the serialized float32 value so files round-trip exactly
        object.__setattr__(self, "outlier_fraction", float(np.float32(self.outlier_fraction)))


@dataclass
class QuantizedTensor:
    """Grouped codes plus sparse outliers for one 2-D weight matrix."""

    name: str
    dims: tuple[int, int]
    bits: int
    group_size: int
    scales: np.ndarray        # float16 [rows, groups_per_row]
    zeros: np.ndarray         # float16 [rows, groups_per_row]
    codes: np.ndarray         # uint8   [rows, cols]; outlier slots hold 0
    outlier_indices: np.ndarray  # uint32, strictly increasing flat indices
    outlier_values: np.ndarray   # float16, parallel to outlier_indices
    clamp_count: int = 0      # quantization-time diagnostic, not serialized

    def __post_init__(self):
        rows, cols = self.dims
        n_groups = len(group_spans(cols, self.group_size))
        if self.scales.shape != (rows, n_groups) or self.zeros.shape != (rows, n_groups):
            raise InvariantError(f"{self.name!r}: group stats shape mismatch")
        if self.codes.shape != (rows, cols) or self.codes.dtype != np.uint8:
            raise InvariantError(f"{self.name!r}: codes must be uint8 [rows, cols]")
        if self.codes.max(initial=0) > (1 << self.bits) - 1:
            raise InvariantError(f"{self.name!r}: code out of range for {self.bits} bits")
        idx = self.outlier_indices
        if idx.size != self.outlier_values.size:
            raise InvariantError(f"{self.name!r}: outlier index/value length mismatch")
        if idx.size and (idx[-1] >= rows * cols or (np.diff(idx.astype(np.int64)) <= 0).any()):
            raise InvariantError(f"{self.name!r}: outlier indices not strictly increasing in range")
        if (self.scales.astype(np.float32) < 0).any():
            raise InvariantError(f"{self.name!r}: negative scale")

    @property
    def n_outliers(self) -> int:
        return int(self.outlier_indices.size)

    @property
    def numel(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def clamp_rate(self) -> float:
        eligible = self.numel - self.n_outliers
        return self.clamp_count / eligible if eligible else 0.0

    def background(self) -> np.ndarray:
        """Dense float32 group-dequantized values, outliers NOT yet applied."""
        rows, cols = self.dims
        rep = np.repeat(np.arange(self.scales.shape[1]), self.group_size)[:cols]
        s = self.scales.astype(np.float32)[:, rep]
        z = self.zeros.astype(np.float32)[:, rep]
        return s * (self.codes.astype(np.float32) - z)


@dataclass
class QuantizedModel:
    config: QuantConfig
    quantized: dict[str, QuantizedTensor] = field(default_factory=dict)
    passthrough: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.quantized) & set(self.passthrough)
        if overlap:
            raise InvariantError(f"tensors both quantized and passthrough: {sorted(overlap)}")

    def names(self) -> list[str]:
        return list(self.quantized) + list(self.passthrough)

    def to_bundle(self) -> ModelBundle:
        """Dense float32 weights: group dequant + exact outlier scatter."""
        bundle = ModelBundle(metadata=dict(self.metadata))
        for name, qt in self.quantized.items():
            bundle.add(dequantize_tensor(qt))
        for name, tensor in self.passthrough.items():
            bundle.add(Tensor(name, tensor.data.astype(np.float32)))
        return bundle


# ---------------------------------------------------------------------------
# group-level operations
# ---------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    """Deterministic half-away-from-zero rounding (numpy rounds half to even)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def compute_scale_zero(values, bits: int, *, full_range: bool = False) -> tuple[float, float]:
    """Float32 scale and zero point of one group.

    Degenerate groups (max == min) return scale 1 and zero point -min so
    code 0 dequantizes to the constant value exactly.
    """
    vals = as_array(values).astype(np.float32, copy=False)
    if vals.size == 0:
        raise DomainError("empty group")
    lo = np.float32(vals.min())
    hi = np.float32(vals.max())
    if hi == lo:
        return 1.0, float(-lo)
    denom = np.float32((1 << bits) - 1) if full_range else np.float32(1 << (bits - 1))
    scale = np.float32((hi - lo) / denom)
    return float(scale), float(np.float32(-lo / scale))


def quantize_group(values, scale: float, zero_point: float, bits: int) -> np.ndarray:
    """Codes clamp(round(v/scale + zero_point), 0, 2^bits - 1) as uint8."""
    if scale <= 0:
        raise DomainError(f"scale must be positive, got {scale}")
    vals = as_array(values).astype(np.float32, copy=False)
    raw = round_half_away(vals / np.float32(scale) + np.float32(zero_point))
    return np.clip(raw, 0, (1 << bits) - 1).astype(np.uint8)


def dequantize_group(codes, scale: float, zero_point: float) -> np.ndarray:
    """Float32 values scale * (code - zero_point)."""
    codes = as_array(codes)
    return np.float32(scale) * (codes.astype(np.float32) - np.float32(zero_point))


# ---------------------------------------------------------------------------
# tensor-level quantization
# ---------------------------------------------------------------------------

def _group_stats(values: np.ndarray, outliers: np.ndarray, cfg: QuantConfig):
    """Vectorized per-group scale/zero stats honouring the outlier mask.

    Returns float16 (scales, zeros) of shape [rows, groups_per_row].
    """
    rows, cols = values.shape
    n_groups = len(group_spans(cols, cfg.group_size))
    padded = n_groups * cfg.group_size

    exclude = np.zeros_like(values, dtype=bool) if cfg.stats_include_outliers else outliers
    lo_src = np.where(exclude, np.inf, values.astype(np.float32))
    hi_src = np.where(exclude, -np.inf, values.astype(np.float32))
    pad = np.full((rows, padded - cols), np.inf, dtype=np.float32)
    lo = np.concatenate([lo_src, pad], axis=1).reshape(rows, n_groups, cfg.group_size).min(axis=2)
    hi = np.concatenate([hi_src, -pad], axis=1).reshape(rows, n_groups, cfg.group_size).max(axis=2)

    empty = ~np.isfinite(lo)  # group entirely outliers
    lo_safe = np.where(empty, 0.0, lo).astype(np.float32)
    hi_safe = np.where(empty, 0.0, hi).astype(np.float32)
    denom = np.float32((1 << cfg.bits) - 1 if cfg.full_range else 1 << (cfg.bits - 1))
    span = (hi_safe - lo_safe) / denom
    scales16 = span.astype(np.float16)
    degenerate = empty | (scales16.astype(np.float32) <= 0.0)

    scales16 = np.where(degenerate, np.float16(1.0), scales16)
    zeros32 = np.where(
        degenerate,
        np.where(empty, np.float32(0.0), -lo_safe),
        -lo_safe / np.where(degenerate, np.float32(1.0), span),
    )
    zeros16 = np.clip(zeros32, -FLOAT16_MAX, FLOAT16_MAX).astype(np.float16)
    return scales16, zeros16


def quantize_tensor(w, mask: np.ndarray, cfg: QuantConfig, name: str | None = None) -> QuantizedTensor:
    """Quantize one 2-D weight matrix, preserving masked positions at FP16.

    Group min/max statistics are computed over non-outlier members only
    (flip ``cfg.stats_include_outliers`` for the ablation); outlier slots
    carry a placeholder code of 0.
    """
    tensor_name = name or (w.name if isinstance(w, Tensor) else "tensor")
    values = as_array(w).astype(np.float32, copy=False)
    if values.ndim != 2:
        raise DimensionError(f"{tensor_name!r}: only 2-D tensors are quantizable, got {values.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise DimensionError(f"{tensor_name!r}: mask shape {mask.shape} != weight shape {values.shape}")

    rows, cols = values.shape
    scales16, zeros16 = _group_stats(values, mask, cfg)
    rep = np.repeat(np.arange(scales16.shape[1]), cfg.group_size)[:cols]
    s = scales16.astype(np.float32)[:, rep]
    z = zeros16.astype(np.float32)[:, rep]

    with np.errstate(over="ignore"):  # outlier slots may overflow v/s; their codes are discarded
        raw = round_half_away(values / s + z)
    codes = np.clip(raw, 0, (1 << cfg.bits) - 1).astype(np.uint8)
    clamp_count = int(np.sum((raw != codes) & ~mask))
    codes[mask] = 0

    flat_idx = np.flatnonzero(mask.ravel()).astype(np.uint32)
    outlier_values = values.ravel()[flat_idx].astype(np.float16)
    return QuantizedTensor(
        name=tensor_name,
        dims=(rows, cols),
        bits=cfg.bits,
        group_size=cfg.group_size,
        scales=scales16,
        zeros=zeros16,
        codes=codes,
        outlier_indices=flat_idx,
        outlier_values=outlier_values,
        clamp_count=clamp_count,
    )


def dequantize_tensor(qt: QuantizedTensor) -> Tensor:
    """Dense float32 reconstruction: group dequant, then exact outlier scatter."""
    dense = qt.background()
    flat = dense.ravel()
    flat[qt.outlier_indices] = qt.outlier_values.astype(np.float32)
    return Tensor(qt.name, flat.reshape(qt.dims))


def quantize_model(weights: ModelBundle, mask: OutlierMask, cfg: QuantConfig) -> QuantizedModel:
    """Split a model into quantized projections and FP16 passthrough tensors."""
    model = QuantizedModel(config=cfg, metadata=dict(weights.metadata))
    for name, tensor in weights.items():
        if cfg.quantize_set(name, tensor.dims):
            if name not in mask.masks:
                raise DomainError(f"no outlier mask for quantizable tensor {name!r}")
            model.quantized[name] = quantize_tensor(tensor, mask.masks[name], cfg, name)
        else:
            model.passthrough[name] = Tensor(name, tensor.data.astype(np.float16))
    return model


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_codes(codes, bits: int) -> bytes:
    """Pack codes low-bit-first into bytes, zero-padding the final byte."""
    codes = as_array(codes).ravel()
    if codes.size and int(codes.max()) > (1 << bits) - 1:
        raise EncodingError(f"code {int(codes.max())} out of range for {bits} bits")
    if codes.size and int(codes.min()) < 0:
        raise EncodingError("negative code")
    bit_planes = (codes.astype(np.uint8)[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bit_planes.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; validates length and zero padding."""
    need = (count * bits + 7) // 8
    if len(data) != need:
        raise EncodingError(f"packed stream holds {len(data)} bytes, {count} codes need {need}")
    all_bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if all_bits[count * bits :].any():
        raise EncodingError("nonzero padding bits in packed code stream")
    planes = all_bits[: count * bits].reshape(count, bits)
    return (planes * (1 << np.arange(bits, dtype=np.uint16))).sum(axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# payload accounting
# ---------------------------------------------------------------------------

def payload_bits_breakdown(model: QuantizedModel) -> dict[str, int]:
    """Exact serialized payload bits per component over the quantized tensors."""
    codes = scales = zeros = out_idx = out_val = elements = 0
    for qt in model.quantized.values():
        codes += 8 * ((qt.numel * qt.bits + 7) // 8)
        scales += 16 * qt.scales.size
        zeros += 16 * qt.zeros.size
        out_idx += 32 * qt.n_outliers
        out_val += 16 * qt.n_outliers
        elements += qt.numel
    return {
        "codes": codes,
        "scales": scales,
        "zeros": zeros,
        "outlier_indices": out_idx,
        "outlier_values": out_val,
        "elements": elements,
    }


def average_bits(model: QuantizedModel, *, include_group_stats: bool = True,
                 include_outliers: bool = True) -> float:
    """Stored payload bits per quantized element.

    Counts packed codes plus, unless excluded for diagnostics, the float16
    group statistics and the outlier index/value store. Passthrough tensors
    are not part of the average.
    """
    b = payload_bits_breakdown(model)
    if b["elements"] == 0:
        return 0.0
    total = b["codes"]
    if include_group_stats:
        total += b["scales"] + b["zeros"]
    if include_outliers:
        total += b["outlier_indices"] + b["outlier_values"]
    return total / b["elements"]


def inspect_lines(model: QuantizedModel) -> list[str]:
    """One descriptive line per tensor for the CLI inspect dump."""
    lines = []
    for name, qt in model.quantized.items():
        bits_contrib = (8 * ((qt.numel * qt.bits + 7) // 8) + 32 * qt.scales.size
                        + 48 * qt.n_outliers) / qt.numel
        lines.append(
            f"{name} dims={qt.dims[0]}x{qt.dims[1]} groups={qt.scales.size} "
            f"clamp_rate={qt.clamp_rate:.6f} outliers={qt.n_outliers} bits={bits_contrib:.4f}"
        )
    for name, tensor in model.passthrough.items():
        dims = "x".join(str(d) for d in tensor.dims)
        lines.append(f"{name} dims={dims} passthrough=float16 bits=16.0000")
    return lines
