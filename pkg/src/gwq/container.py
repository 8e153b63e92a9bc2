"""Tensor-container file format: reader, writer and the bundle types.

Layout (compatible with the de-facto standard checkpoint container, so
external trainers can export weights/gradients without custom glue):

    u64 little-endian header length N
    N bytes of UTF-8 JSON: { "__metadata__"?: {str: str},
                             <tensor name>: { "dtype": "F32"|"F16"|"U8",
                                              "shape": [int, ...],
                                              "data_offsets": [begin, end] } }
    concatenated raw little-endian tensor data (offsets relative to the
    end of the header)

Weights and gradients use F32/F16; U8 exists for exported boolean masks.
Gradients live in a separate file as "<weight>.grad" entries, one per
weight tensor of the companion weights file.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import AlignmentError, ParseError
from .tensor import Tensor

_DTYPE_TO_NUMPY = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2"), "U8": np.dtype("u1")}
_NUMPY_TO_DTYPE = {"float32": "F32", "float16": "F16", "uint8": "U8"}

GRAD_SUFFIX = ".grad"
MASK_SUFFIX = ".mask"


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write a file via temp-and-rename so interrupted runs never leave partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_raw(arrays: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> bytes:
    """Serialize named arrays (file order = dict order)."""
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = _NUMPY_TO_DTYPE.get(arr.dtype.name)
        if dtype is None:
            raise ParseError(f"tensor {name!r}: dtype {arr.dtype.name} not storable")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    return len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(blobs)


def decode_raw(payload: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse a container; returns arrays in physical file order plus metadata.

    Every declared range is validated before any data is touched, so a
    malformed header can never cause reads outside the buffer.
    """
    if len(payload) < 8:
        raise ParseError("truncated file: missing header length")
    header_len = int.from_bytes(payload[:8], "little")
    if 8 + header_len > len(payload):
        raise ParseError("truncated file: header extends past end of file")
    try:
        header = json.loads(payload[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object")

    metadata = header.pop("__metadata__", {}) or {}
    if not isinstance(metadata, dict):
        raise ParseError("__metadata__ must be a JSON object")
    metadata = {str(k): str(v) for k, v in metadata.items()}

    data = payload[8 + header_len :]
    entries = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise ParseError(f"tensor {name!r}: malformed header entry")
        dtype = info.get("dtype")
        if dtype not in _DTYPE_TO_NUMPY:
            raise ParseError(f"tensor {name!r}: unknown dtype {dtype!r}")
        shape = info.get("shape")
        if not isinstance(shape, list) or any(not isinstance(d, int) or d <= 0 for d in shape):
            raise ParseError(f"tensor {name!r}: invalid shape {shape!r}")
        offsets = info.get("data_offsets")
        if not isinstance(offsets, list) or len(offsets) != 2:
            raise ParseError(f"tensor {name!r}: invalid data_offsets")
        begin, end = offsets
        if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
            raise ParseError(f"tensor {name!r}: invalid data_offsets {offsets!r}")
        if end > len(data):
            raise ParseError(f"tensor {name!r}: data range [{begin},{end}) past end of file")
        np_dtype = _DTYPE_TO_NUMPY[dtype]
        expected = math.prod(shape) * np_dtype.itemsize
        if end - begin != expected:
            raise ParseError(
                f"tensor {name!r}: dims {shape} need {expected} bytes, range holds {end - begin}"
            )
        entries.append((begin, end, name, np_dtype, tuple(shape)))

    entries.sort(key=lambda e: (e[0], e[2]))
    prev_end = 0
    for begin, end, name, _, _ in entries:
        if begin < prev_end:
            raise ParseError(f"tensor {name!r}: data range overlaps a previous tensor")
        prev_end = end

    arrays: dict[str, np.ndarray] = {}
    for begin, end, name, np_dtype, shape in entries:
        arr = np.frombuffer(data[begin:end], dtype=np_dtype).reshape(shape)
        arrays[name] = arr.astype(np_dtype.newbyteorder("="), copy=False)
    return arrays, metadata


@dataclass
class ModelBundle:
    """Ordered collection of named weight tensors plus string metadata."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, tensor: Tensor) -> None:
        if tensor.name in self.tensors:
            raise AlignmentError(f"duplicate tensor name {tensor.name!r}")
        self.tensors[tensor.name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}


@dataclass
class GradientBundle:
    """Gradient tensors keyed "<weight>.grad", aligned 1:1 with a weights bundle."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def grad_for(self, weight_name: str) -> Tensor:
        return self.tensors[weight_name + GRAD_SUFFIX]

    def weight_names(self) -> list[str]:
        return [n[: -len(GRAD_SUFFIX)] for n in self.tensors]

    def items(self):
        return self.tensors.items()

    def __len__(self) -> int:
        return len(self.tensors)


def write_container(bundle: ModelBundle, path) -> None:
    atomic_write_bytes(path, encode_raw(bundle.arrays(), bundle.metadata))


def read_container(path) -> ModelBundle:
    with open(path, "rb") as fh:
        payload = fh.read()
    arrays, metadata = decode_raw(payload)
    bundle = ModelBundle(metadata=metadata)
    for name, arr in arrays.items():
        if arr.dtype == np.uint8:
            raise ParseError(f"tensor {name!r}: U8 is not a weight dtype")
        try:
            bundle.add(Tensor(name, arr))
        except Exception as exc:
            raise ParseError(f"tensor {name!r}: {exc}") from exc
    return bundle


def write_gradients(grads: GradientBundle, path) -> None:
    atomic_write_bytes(path, encode_raw({n: t.data for n, t in grads.items()}))


def read_gradients(path, weights: ModelBundle) -> GradientBundle:
    """Read a gradient container and validate 1:1 alignment with ``weights``."""
    with open(path, "rb") as fh:
        arrays, _ = decode_raw(fh.read())
    return align_gradients(arrays, weights)


def align_gradients(arrays: dict[str, np.ndarray], weights: ModelBundle) -> GradientBundle:
    grads = GradientBundle()
    for name, arr in arrays.items():
        if not name.endswith(GRAD_SUFFIX):
            raise AlignmentError(f"gradient tensor {name!r} lacks the {GRAD_SUFFIX!r} suffix")
        base = name[: -len(GRAD_SUFFIX)]
        if base not in weights:
            raise AlignmentError(f"gradient {name!r} has no weight tensor {base!r}")
        if tuple(arr.shape) != weights[base].dims:
            raise AlignmentError(
                f"gradient {name!r} shape {arr.shape} != weight {base!r} dims {weights[base].dims}"
            )
        grads.tensors[name] = Tensor(name, np.asarray(arr, dtype=np.float32))
    missing = [n for n in weights if n + GRAD_SUFFIX not in grads.tensors]
    if missing:
        raise AlignmentError(f"gradients missing for weights: {', '.join(sorted(missing))}")
    return grads
