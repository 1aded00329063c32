"""Reading and writing safetensors-compatible weight files.

Layout: ``[u64 little-endian header length N][N bytes UTF-8 JSON][data]``.
Offsets in the header are relative to the start of the data region.

All tensors are decoded to float32 on load. The writer always emits the
canonical layout (names sorted, data contiguous, header space-padded to a
multiple of 8 bytes) so re-serializing a canonical file is byte-identical.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "DType",
    "TensorMeta",
    "Tensor",
    "WeightMap",
    "TensorFileError",
    "parse_header",
    "load_weights",
    "store_weights",
    "serialize_weights",
    "deserialize_weights",
    "convert_scalar",
    "decode_scalar",
    "encode_array",
    "decode_array",
]

_METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8

F16_QNAN = 0x7E00
BF16_QNAN = 0x7FC0


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @classmethod
    def parse(cls, tag: str) -> "DType":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unsupported dtype {tag!r}") from None


class TensorFileError(ValueError):
    """Malformed or unsupported tensor file.

    ``tensor`` names the offending entry and ``position`` the byte offset
    in the file, when either is known.
    """

    def __init__(self, message: str, *, tensor: str | None = None, position: int | None = None):
        self.message = message
        self.tensor = tensor
        self.position = position
        where = []
        if tensor is not None:
            where.append(f"tensor {tensor!r}")
        if position is not None:
            where.append(f"byte {position}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize

    def to_json(self) -> dict:
        return {
            "dtype": self.dtype.value,
            "shape": list(self.shape),
            "data_offsets": list(self.data_offsets),
        }


@dataclass(frozen=True)
class Tensor:
    """A float32 array plus the dtype it was (or will be) stored as."""

    values: np.ndarray
    dtype: DType = DType.F32

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values is self.values:
            values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


class WeightMap(Mapping[str, Tensor]):
    """Immutable name -> Tensor mapping iterated in lexicographic order."""

    def __init__(
        self,
        tensors: Mapping[str, Union[Tensor, np.ndarray]],
        metadata: Mapping[str, str] | None = None,
        *,
        nan_tensors: Sequence[str] = (),
    ):
        items = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValueError(f"tensor names must be non-empty strings, got {name!r}")
            t = tensors[name]
            items[name] = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
        self._tensors = items
        self.metadata = dict(metadata) if metadata else None
        # names of tensors that contained NaN when loaded
        self.nan_tensors = tuple(nan_tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"WeightMap({len(self)} tensors)"

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values for name, t in self._tensors.items()}

    def equal(self, other: "WeightMap") -> bool:
        """Bitwise equality of names, shapes and float32 values."""
        if list(self) != list(other):
            return False
        for name in self:
            a, b = self[name].values, other[name].values
            if a.shape != b.shape or a.view(np.uint32).tobytes() != b.view(np.uint32).tobytes():
                return False
        return True


# -- scalar and array conversion ---------------------------------------------


def _f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    # round to nearest, ties to even, on the dropped low 16 bits
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    out[np.isnan(values)] = BF16_QNAN
    return out


def _f32_to_f16_bits(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    with np.errstate(over="ignore"):
        out = values.astype(np.float16).view(np.uint16)
    out = out.copy()
    out[np.isnan(values)] = F16_QNAN
    return out


def encode_array(values: np.ndarray, dtype: DType) -> bytes:
    """float32 values -> little-endian storage bytes (round to nearest even)."""
    values = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    if dtype is DType.F32:
        return values.astype("<f4", copy=False).tobytes()
    if dtype is DType.F16:
        return _f32_to_f16_bits(values).astype("<u2", copy=False).tobytes()
    return _f32_to_bf16_bits(values).astype("<u2", copy=False).tobytes()


def decode_array(raw: bytes, dtype: DType, shape: Sequence[int]) -> np.ndarray:
    """Storage bytes -> float32 array of ``shape``. Exact for all three dtypes."""
    if dtype is DType.F32:
        out = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype is DType.F16:
        out = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        out = bits.view(np.float32)
    return out.reshape(tuple(shape))


def convert_scalar(value: float, target: DType) -> int:
    """Encode one real as the bit pattern of ``target``."""
    arr = np.array([value], dtype=np.float32)
    if target is DType.F32:
        return int(arr.view(np.uint32)[0])
    if target is DType.F16:
        return int(_f32_to_f16_bits(arr)[0])
    return int(_f32_to_bf16_bits(arr)[0])


def decode_scalar(bits: int, dtype: DType) -> float:
    if dtype is DType.F32:
        raw = struct.pack("<I", bits)
    else:
        raw = struct.pack("<H", bits)
    return float(decode_array(raw, dtype, (1,))[0])


# -- header parsing ------------------------------------------------------------


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise TensorFileError("duplicate tensor name", tensor=key)
        seen[key] = value
    return seen


def _parse_entry(name: str, entry) -> TensorMeta:
    if not name:
        raise TensorFileError("empty tensor name", tensor=name)
    if not isinstance(entry, dict):
        raise TensorFileError("tensor entry is not an object", tensor=name)
    tag = entry.get("dtype")
    if not isinstance(tag, str):
        raise TensorFileError("missing dtype", tensor=name)
    try:
        dtype = DType.parse(tag)
    except ValueError as exc:
        raise TensorFileError(str(exc), tensor=name) from None
    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(
        type(d) is int and 0 <= d < 2**63 for d in shape
    ):
        raise TensorFileError(f"invalid shape {shape!r}", tensor=name)
    offsets = entry.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(type(o) is int and 0 <= o < 2**64 for o in offsets)
    ):
        raise TensorFileError(f"invalid data_offsets {offsets!r}", tensor=name)
    begin, end = offsets
    meta = TensorMeta(name, dtype, tuple(shape), (begin, end))
    if end < begin or end - begin != meta.nbytes:
        raise TensorFileError(
            f"data_offsets {offsets} span {end - begin} bytes, expected {meta.nbytes}",
            tensor=name,
        )
    return meta


def parse_header(data: bytes) -> tuple[int, list[TensorMeta], dict[str, str] | None]:
    """Parse and validate the header of an in-memory tensor file.

    Returns ``(header_length, tensors, metadata)``. Tensor entries come back in
    header order.
    """
    view = memoryview(data)
    if len(view) < 8:
        raise TensorFileError(f"truncated file: {len(view)} bytes, need 8 for header length", position=0)
    (n,) = struct.unpack_from("<Q", view, 0)
    if n > len(view) - 8:
        raise TensorFileError(
            f"header length {n} exceeds remaining {len(view) - 8} bytes", position=0
        )
    try:
        text = bytes(view[8 : 8 + n]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TensorFileError(f"header is not UTF-8: {exc.reason}", position=8 + exc.start) from None
    try:
        header = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"malformed header JSON: {exc.msg}", position=8 + exc.pos) from None
    except RecursionError:
        raise TensorFileError("header JSON nested too deeply", position=8) from None
    if not isinstance(header, dict):
        raise TensorFileError("header JSON is not an object", position=8)

    metadata = header.pop(_METADATA_KEY, None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(v, str) for v in metadata.values()
        ):
            raise TensorFileError("__metadata__ must map strings to strings", tensor=_METADATA_KEY)

    tensors = [_parse_entry(name, entry) for name, entry in header.items()]

    data_len = len(view) - 8 - n
    spans = sorted(tensors, key=lambda m: (m.data_offsets, m.name))
    prev = None
    for meta in spans:
        begin, end = meta.data_offsets
        if end > data_len:
            raise TensorFileError(
                f"data_offsets end {end} beyond data region of {data_len} bytes",
                tensor=meta.name,
                position=8 + n + begin,
            )
        # zero-length tensors occupy no bytes and cannot overlap
        if begin == end:
            continue
        if prev is not None and begin < prev.data_offsets[1]:
            raise TensorFileError(
                f"data_offsets overlap with {prev.name!r}", tensor=meta.name, position=8 + n + begin
            )
        prev = meta
    return n, tensors, metadata


# -- whole-file I/O -----------------------------------------------------------


def deserialize_weights(data: bytes, *, threads: int | None = 1) -> WeightMap:
    n, metas, metadata = parse_header(data)
    base = 8 + n
    view = memoryview(data)

    def decode(meta: TensorMeta) -> Tensor:
        begin, end = meta.data_offsets
        raw = view[base + begin : base + end]
        return Tensor(decode_array(raw, meta.dtype, meta.shape), meta.dtype)

    if threads == 1 or len(metas) < 2:
        decoded = [decode(m) for m in metas]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            decoded = list(pool.map(decode, metas))
    tensors = {m.name: t for m, t in zip(metas, decoded)}
    nan_tensors = [name for name, t in tensors.items() if np.isnan(t.values).any()]
    return WeightMap(tensors, metadata, nan_tensors=sorted(nan_tensors))


def load_weights(path: str | os.PathLike, *, threads: int | None = 1) -> WeightMap:
    """Load a tensor file. Tensors holding NaN are kept and listed in ``nan_tensors``."""
    data = Path(path).read_bytes()
    try:
        weights = deserialize_weights(data, threads=threads)
    except TensorFileError as exc:
        raise TensorFileError(f"{path}: {exc.message}", tensor=exc.tensor, position=exc.position) from None
    if weights.nan_tensors:
        warnings.warn(
            f"{path}: NaN values in {len(weights.nan_tensors)} tensor(s): "
            + ", ".join(weights.nan_tensors[:5]),
            RuntimeWarning,
            stacklevel=2,
        )
    return weights


DTypePolicy = Union[str, DType]


def _target_dtype(tensor: Tensor, policy: DTypePolicy) -> DType:
    if policy == "preserve":
        return tensor.dtype
    if isinstance(policy, DType):
        return policy
    return DType.parse(policy)


def serialize_weights(weights: WeightMap, dtype_policy: DTypePolicy = "preserve") -> bytes:
    """Canonical byte image of ``weights``; see :func:`store_weights`."""
    header: dict = {}
    if weights.metadata:
        header[_METADATA_KEY] = {k: weights.metadata[k] for k in sorted(weights.metadata)}
    chunks = []
    offset = 0
    for name in sorted(weights):
        tensor = weights[name]
        dtype = _target_dtype(tensor, dtype_policy)
        raw = encode_array(tensor.values, dtype)
        header[name] = TensorMeta(name, dtype, tensor.shape, (offset, offset + len(raw))).to_json()
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % _HEADER_ALIGN)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def store_weights(
    weights: WeightMap, path: str | os.PathLike, dtype_policy: DTypePolicy = "preserve"
) -> None:
    """Write ``weights`` in canonical layout.

    ``dtype_policy`` is ``"preserve"`` (each tensor keeps its recorded dtype)
    or a target :class:`DType` applied to every tensor. Narrowing rounds to
    nearest even; non-finite values are written as-is.
    """
    data = serialize_weights(weights, dtype_policy)
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def with_dtype(tensor: np.ndarray, dtype: DType) -> Tensor:
    """Tensor whose values are already rounded to ``dtype``."""
    raw = encode_array(tensor, dtype)
    return Tensor(decode_array(raw, dtype, np.shape(tensor)), dtype)
