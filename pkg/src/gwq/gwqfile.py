"""GWQ packed mixed-precision model format.

All integers little-endian. Layout:

    magic "GWQ1"
    u32 format version (currently 1)
    config block: u8 bits | u16 group_size | f32 outlier_fraction
                  | u8 per-layer-quantile flag
    u32 quantized tensor count
    per quantized tensor record:
        u16 name length + UTF-8 name
        u8 rank + u32 dims            (rank is 2)
        u32 group count               (rows * ceil(cols / group_size))
        f16 scales  x group count     (row-major [rows, groups])
        f16 zeros   x group count
        packed codes, low-bit-first within bytes, groups concatenated per
            channel and channels concatenated; final byte zero-padded
            (byte count implied by dims and bits)
        u32 outlier count
        u32 outlier flat indices      (strictly increasing)
        f16 outlier values
        u32 CRC32 of the record bytes above
    u32 passthrough tensor count      (tensors stored verbatim at FP16:
        per record: name, rank+dims, f16 data, u32 CRC32)
    u32 metadata entry count          (u16+UTF-8 key, u16+UTF-8 value each)

The quantized records carry everything the dequantizer needs; the
passthrough and metadata sections make a file self-sufficient for
evaluation (embeddings, norm gains, architecture description).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .container import atomic_write_bytes
from .errors import ParseError
from .quantizer import QuantConfig, QuantizedModel, QuantizedTensor, pack_codes, unpack_codes
from .tensor import Tensor, group_spans

MAGIC = b"GWQ1"
VERSION = 1


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ParseError(f"tensor name too long: {name[:32]!r}...")
    return struct.pack("<H", len(raw)) + raw


def _encode_dims(dims) -> bytes:
    return struct.pack("<B", len(dims)) + b"".join(struct.pack("<I", d) for d in dims)


def _f16_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f2").tobytes()


def _record_quantized(qt: QuantizedTensor) -> bytes:
    parts = [
        _encode_name(qt.name),
        _encode_dims(qt.dims),
        struct.pack("<I", qt.scales.size),
        _f16_bytes(qt.scales),
        _f16_bytes(qt.zeros),
        pack_codes(qt.codes, qt.bits),
        struct.pack("<I", qt.n_outliers),
        np.ascontiguousarray(qt.outlier_indices, dtype="<u4").tobytes(),
        _f16_bytes(qt.outlier_values),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _record_passthrough(tensor: Tensor) -> bytes:
    body = _encode_name(tensor.name) + _encode_dims(tensor.dims) + _f16_bytes(tensor.data)
    return body + struct.pack("<I", zlib.crc32(body))


def encode_gwq(model: QuantizedModel) -> bytes:
    cfg = model.config
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<BHfB", cfg.bits, cfg.group_size, cfg.outlier_fraction,
                    1 if cfg.scope == "per_layer" else 0),
        struct.pack("<I", len(model.quantized)),
    ]
    parts += [_record_quantized(qt) for qt in model.quantized.values()]
    parts.append(struct.pack("<I", len(model.passthrough)))
    parts += [_record_passthrough(t) for t in model.passthrough.values()]
    parts.append(struct.pack("<I", len(model.metadata)))
    for key, value in model.metadata.items():
        parts.append(_encode_name(str(key)) + _encode_name(str(value)))
    return b"".join(parts)


class _Cursor:
    """Bounds-checked reader; every access past the end is a ParseError."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ParseError(f"truncated file while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def name(self, what: str) -> str:
        n = self.u16(what + " name length")
        try:
            return self.take(n, what + " name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{what} name is not valid UTF-8") from exc

    def dims(self, what: str) -> tuple[int, ...]:
        rank = self.u8(what + " rank")
        dims = tuple(self.u32(f"{what} dim {i}") for i in range(rank))
        if any(d == 0 for d in dims):
            raise ParseError(f"{what}: zero-sized dimension")
        return dims

    def f16_array(self, count: int, shape, what: str) -> np.ndarray:
        raw = self.take(2 * count, what)
        return np.frombuffer(raw, dtype="<f2").astype(np.float16).reshape(shape)


def _read_quantized(cur: _Cursor, cfg: QuantConfig) -> QuantizedTensor:
    record_start = cur.pos
    name = cur.name("tensor")
    dims = cur.dims(f"tensor {name!r}")
    if len(dims) != 2:
        raise ParseError(f"tensor {name!r}: quantized records must be 2-D, got rank {len(dims)}")
    rows, cols = dims
    n_groups = len(group_spans(cols, cfg.group_size))
    group_count = cur.u32(f"tensor {name!r} group count")
    if group_count != rows * n_groups:
        raise ParseError(
            f"tensor {name!r}: group count {group_count} != expected {rows * n_groups}"
        )
    scales = cur.f16_array(group_count, (rows, n_groups), f"tensor {name!r} scales")
    zeros = cur.f16_array(group_count, (rows, n_groups), f"tensor {name!r} zeros")
    code_bytes = cur.take((rows * cols * cfg.bits + 7) // 8, f"tensor {name!r} codes")
    try:
        codes = unpack_codes(code_bytes, cfg.bits, rows * cols).reshape(rows, cols)
    except Exception as exc:
        raise ParseError(f"tensor {name!r}: {exc}") from exc
    n_out = cur.u32(f"tensor {name!r} outlier count")
    if n_out > rows * cols:
        raise ParseError(f"tensor {name!r}: outlier count {n_out} exceeds element count")
    idx = np.frombuffer(cur.take(4 * n_out, f"tensor {name!r} outlier indices"), dtype="<u4")
    values = cur.f16_array(n_out, (n_out,), f"tensor {name!r} outlier values")
    body = cur.data[record_start : cur.pos]
    crc = cur.u32(f"tensor {name!r} crc")
    if crc != zlib.crc32(body):
        raise ParseError(f"tensor {name!r}: CRC mismatch")
    try:
        return QuantizedTensor(
            name=name, dims=(rows, cols), bits=cfg.bits, group_size=cfg.group_size,
            scales=scales, zeros=zeros, codes=codes,
            outlier_indices=idx.astype(np.uint32), outlier_values=values,
        )
    except Exception as exc:
        raise ParseError(f"tensor {name!r}: {exc}") from exc


def _read_passthrough(cur: _Cursor) -> Tensor:
    record_start = cur.pos
    name = cur.name("passthrough tensor")
    dims = cur.dims(f"tensor {name!r}")
    numel = int(np.prod(dims))
    data = cur.f16_array(numel, dims, f"tensor {name!r} data")
    body = cur.data[record_start : cur.pos]
    crc = cur.u32(f"tensor {name!r} crc")
    if crc != zlib.crc32(body):
        raise ParseError(f"tensor {name!r}: CRC mismatch")
    try:
        return Tensor(name, data)
    except Exception as exc:
        raise ParseError(f"tensor {name!r}: {exc}") from exc


def decode_gwq(data: bytes) -> QuantizedModel:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise ParseError("magic mismatch: not a GWQ file")
    version = cur.u32("version")
    if version != VERSION:
        raise ParseError(f"unsupported format version {version}")
    bits = cur.u8("config bits")
    group_size = cur.u16("config group size")
    fraction = cur.f32("config outlier fraction")
    flag = cur.u8("config scope flag")
    try:
        cfg = QuantConfig(bits=bits, group_size=group_size, outlier_fraction=fraction,
                          scope="per_layer" if flag else "global")
    except Exception as exc:
        raise ParseError(f"invalid config block: {exc}") from exc

    model = QuantizedModel(config=cfg)
    for _ in range(cur.u32("tensor count")):
        qt = _read_quantized(cur, cfg)
        if qt.name in model.quantized:
            raise ParseError(f"duplicate tensor {qt.name!r}")
        model.quantized[qt.name] = qt
    for _ in range(cur.u32("passthrough count")):
        tensor = _read_passthrough(cur)
        if tensor.name in model.quantized or tensor.name in model.passthrough:
            raise ParseError(f"duplicate tensor {tensor.name!r}")
        model.passthrough[tensor.name] = tensor
    for _ in range(cur.u32("metadata count")):
        key = cur.name("metadata key")
        model.metadata[key] = cur.name("metadata value")
    if cur.pos != len(data):
        raise ParseError(f"{len(data) - cur.pos} trailing bytes after the metadata section")
    return model


def write_gwq(model: QuantizedModel, path) -> None:
    atomic_write_bytes(path, encode_gwq(model))


def read_gwq(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return decode_gwq(fh.read())
