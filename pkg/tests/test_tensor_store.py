import hashlib
import json
import math
import struct
from bisect import bisect_left

import numpy as np
import pytest

from mergeforge.tensor_store import (
    BF16_QNAN,
    F16_QNAN,
    DType,
    Tensor,
    TensorFileError,
    WeightMap,
    convert_scalar,
    decode_array,
    decode_scalar,
    deserialize_weights,
    encode_array,
    load_weights,
    parse_header,
    serialize_weights,
    store_weights,
)

from conftest import random_weights


# -- independent reference for the 16-bit formats -------------------------------
# Values are computed from the bit fields with math.ldexp, not with numpy casts.

FORMATS = {DType.F16: (5, 10), DType.BF16: (8, 7)}


def ref_decode(bits: int, dtype: DType) -> float:
    exp_bits, man_bits = FORMATS[dtype]
    sign = -1.0 if bits >> (exp_bits + man_bits) else 1.0
    exp = (bits >> man_bits) & ((1 << exp_bits) - 1)
    man = bits & ((1 << man_bits) - 1)
    bias = (1 << (exp_bits - 1)) - 1
    if exp == (1 << exp_bits) - 1:
        return sign * math.inf if man == 0 else math.nan
    if exp == 0:
        return sign * math.ldexp(man, 1 - bias - man_bits)
    return sign * math.ldexp((1 << man_bits) + man, exp - bias - man_bits)


def _positive_table(dtype):
    exp_bits, man_bits = FORMATS[dtype]
    inf_bits = ((1 << exp_bits) - 1) << man_bits
    vals = [(ref_decode(b, dtype), b) for b in range(inf_bits)]
    bias = (1 << (exp_bits - 1)) - 1
    # first value past the largest finite one; it rounds to infinity
    vals.append((math.ldexp(1.0, bias + 1), inf_bits))
    return [v for v, _ in vals], [b for _, b in vals]


TABLES = {d: _positive_table(d) for d in FORMATS}


def ref_encode(x: float, dtype: DType) -> int:
    """Nearest representable pattern, ties to even mantissa, by table search."""
    sign_bit = 1 << (sum(FORMATS[dtype]))
    if math.isnan(x):
        return F16_QNAN if dtype is DType.F16 else BF16_QNAN
    sign = sign_bit if math.copysign(1.0, x) < 0 else 0
    a = abs(x)
    values, bits = TABLES[dtype]
    if a >= values[-1]:
        return sign | bits[-1]
    i = bisect_left(values, a)
    if values[i] == a:
        return sign | bits[i]
    lo, hi = i - 1, i
    dlo, dhi = a - values[lo], values[hi] - a
    if dlo < dhi:
        pick = lo
    elif dhi < dlo:
        pick = hi
    else:
        pick = lo if bits[lo] % 2 == 0 else hi
    return sign | bits[pick]


def _interesting_f32(rng, n):
    raw = rng.integers(0, 2**32, n, dtype=np.uint64).astype(np.uint32)
    vals = raw.view(np.float32)
    extras = []
    for dtype in FORMATS:
        values, _ = TABLES[dtype]
        # exact midpoints between neighbours exercise the tie rule
        picks = rng.integers(0, len(values) - 1, 300)
        extras += [(values[i] + values[i + 1]) / 2 for i in picks]
        extras += [values[i] for i in picks]
    extras += [65504.0, 65519.0, 65520.0, 65536.0, 1.0009765625, 0.0, -0.0, math.inf, -math.inf]
    mid = np.array(extras, dtype=np.float64)
    mid = mid[np.abs(mid) < 3.4e38].astype(np.float32)
    return np.concatenate([vals, mid, -mid])


@pytest.mark.parametrize("dtype", [DType.F16, DType.BF16])
def test_decode_matches_bitfield_reference(dtype):
    bits = np.arange(2**16, dtype=np.uint16)
    got = decode_array(bits.astype("<u2").tobytes(), dtype, (2**16,))
    want = np.array([ref_decode(int(b), dtype) for b in bits])
    nan = np.isnan(want)
    assert np.array_equal(np.isnan(got), nan)
    assert np.array_equal(got[~nan].astype(np.float64), want[~nan])


@pytest.mark.parametrize("dtype", [DType.F16, DType.BF16])
def test_encode_matches_nearest_even_reference(dtype, rng):
    xs = _interesting_f32(rng, 4000)
    got = np.frombuffer(encode_array(xs, dtype), dtype="<u2")
    want = [ref_encode(float(x), dtype) for x in xs]
    mismatches = [(float(x), int(g), w) for x, g, w in zip(xs, got, want) if int(g) != w]
    assert not mismatches[:5]


def test_convert_scalar_examples():
    for dtype in DType:
        assert convert_scalar(0.0, dtype) == 0
    assert convert_scalar(65520.0, DType.F16) == 0x7C00
    assert convert_scalar(65504.0, DType.F16) == 0x7BFF
    assert convert_scalar(-65520.0, DType.F16) == 0xFC00
    assert convert_scalar(1.0009765625, DType.BF16) == 0x3F80
    assert convert_scalar(1.0, DType.F32) == 0x3F800000
    assert decode_scalar(0x3F80, DType.BF16) == 1.0


def test_bf16_overflow_to_infinity():
    big = float(np.float32(3.4028235e38))
    assert convert_scalar(big, DType.BF16) == 0x7F80
    assert convert_scalar(-big, DType.BF16) == 0xFF80


@pytest.mark.parametrize("dtype", [DType.F16, DType.BF16])
def test_exhaustive_16bit_round_trip(dtype):
    bits = np.arange(2**16, dtype=np.uint16)
    values = decode_array(bits.astype("<u2").tobytes(), dtype, (2**16,))
    back = np.frombuffer(encode_array(values, dtype), dtype="<u2")
    nan = np.isnan(values)
    assert np.array_equal(back[~nan], bits[~nan])
    qnan = F16_QNAN if dtype is DType.F16 else BF16_QNAN
    assert np.all(back[nan] == qnan)
    # spot-check the scalar entry point against the array path
    for b in range(0, 2**16, 257):
        assert convert_scalar(float(values[b]), dtype) == int(back[b])


# -- header parsing -------------------------------------------------------------


def _file(header: dict, data: bytes = b"", pad_to: int | None = None) -> bytes:
    text = json.dumps(header).encode()
    if pad_to is not None:
        text = text.ljust(pad_to)
    return struct.pack("<Q", len(text)) + text + data


def test_minimal_file():
    blob = _file({"x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 8, pad_to=64)
    assert blob[:8] == bytes([0x40, 0, 0, 0, 0, 0, 0, 0])
    n, metas, metadata = parse_header(blob)
    assert n == 64
    assert len(metas) == 1 and metas[0].name == "x" and metas[0].shape == (2,)
    assert metadata is None


@pytest.mark.parametrize(
    "header,data,match",
    [
        ({"x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4, "beyond data region"),
        (
            {
                "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "b": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            },
            b"\0" * 8,
            "overlap",
        ),
        (
            {
                "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "b": {"dtype": "F16", "shape": [4], "data_offsets": [4, 12]},
            },
            b"\0" * 12,
            "overlap",
        ),
        ({"x": {"dtype": "I8", "shape": [2], "data_offsets": [0, 2]}}, b"\0" * 2, "unsupported dtype"),
        ({"x": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8, "expected 12"),
        ({"x": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 0]}}, b"", "invalid shape"),
        ({"x": {"dtype": "F32", "shape": [2], "data_offsets": [8, 0]}}, b"\0" * 8, "span"),
        ({"x": [1, 2]}, b"", "not an object"),
        ({"__metadata__": {"k": 1}}, b"", "__metadata__"),
    ],
)
def test_header_errors(header, data, match):
    with pytest.raises(TensorFileError, match=match) as info:
        parse_header(_file(header, data))
    assert info.value.tensor is not None or info.value.position is not None


def test_overlap_error_names_tensor():
    blob = _file(
        {
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        },
        b"\0" * 8,
    )
    with pytest.raises(TensorFileError) as info:
        parse_header(blob)
    assert info.value.tensor in ("a", "b")


def test_duplicate_names_rejected():
    text = b'{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"x":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}'
    blob = struct.pack("<Q", len(text)) + text + b"\0" * 8
    with pytest.raises(TensorFileError, match="duplicate") as info:
        parse_header(blob)
    assert info.value.tensor == "x"


def test_truncated_and_malformed():
    with pytest.raises(TensorFileError, match="truncated"):
        parse_header(b"\x01\x02")
    with pytest.raises(TensorFileError, match="exceeds"):
        parse_header(struct.pack("<Q", 100) + b"{}")
    with pytest.raises(TensorFileError, match="malformed") as info:
        parse_header(struct.pack("<Q", 5) + b'{"a":')
    assert info.value.position is not None
    with pytest.raises(TensorFileError, match="UTF-8"):
        parse_header(struct.pack("<Q", 2) + b"\xff\xfe")


def test_liberal_layout_accepted():
    # gaps and reverse order are fine on read
    header = {
        "b": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
        "a": {"dtype": "BF16", "shape": [2], "data_offsets": [8, 12]},
        "empty": {"dtype": "F16", "shape": [0], "data_offsets": [0, 0]},
    }
    data = struct.pack("<f", 2.5) + b"\xff" * 4 + struct.pack("<HH", 0x3F80, 0xC000)
    w = deserialize_weights(_file(header, data))
    assert list(w) == ["a", "b", "empty"]
    assert w["a"].values.tolist() == [1.0, -2.0]
    assert w["b"].values.tolist() == [2.5]
    assert w["empty"].shape == (0,)


# -- round trips ------------------------------------------------------------------


def test_f32_round_trip_bitwise(tmp_path, rng):
    w = random_weights(rng)
    store_weights(w, tmp_path / "w.safetensors")
    back = load_weights(tmp_path / "w.safetensors")
    assert back.equal(w)
    assert [back[n].dtype for n in back] == [DType.F32] * len(w)


def test_special_values_written_verbatim(tmp_path):
    vals = np.array([np.inf, -np.inf, -0.0, 1e-45], dtype=np.float32)
    nan_payload = np.array([0x7FA00001], dtype=np.uint32).view(np.float32)
    w = WeightMap({"x": vals, "n": nan_payload})
    store_weights(w, tmp_path / "w.safetensors")
    with pytest.warns(RuntimeWarning, match="NaN"):
        back = load_weights(tmp_path / "w.safetensors")
    assert back["x"].values.view(np.uint32).tolist() == vals.view(np.uint32).tolist()
    assert back["n"].values.view(np.uint32).tolist() == [0x7FA00001]
    assert back.nan_tensors == ("n",)


def test_narrowing_policy(tmp_path):
    w = WeightMap({"x": np.array([1.0009765625, 65520.0, 3.0], dtype=np.float32)})
    store_weights(w, tmp_path / "bf.safetensors", DType.BF16)
    store_weights(w, tmp_path / "h.safetensors", "F16")
    bf = load_weights(tmp_path / "bf.safetensors")
    h = load_weights(tmp_path / "h.safetensors")
    assert bf["x"].dtype is DType.BF16 and bf["x"].values.tolist() == [1.0, 65536.0, 3.0]
    assert h["x"].dtype is DType.F16 and h["x"].values.tolist() == [1.0009765625, math.inf, 3.0]
    # values re-load identical to the rounded ones, and preserve keeps them stable
    store_weights(bf, tmp_path / "bf2.safetensors")
    assert (tmp_path / "bf2.safetensors").read_bytes() == (tmp_path / "bf.safetensors").read_bytes()


def test_canonical_reserialization_is_byte_identical(tmp_path, rng):
    w = WeightMap(
        {
            "z": Tensor(rng.standard_normal((5, 7)).astype(np.float32), DType.BF16),
            "a": Tensor(rng.standard_normal(3).astype(np.float32), DType.F16),
            "m": Tensor(rng.standard_normal((2, 2)).astype(np.float32), DType.F32),
        },
        metadata={"format": "pt", "note": "x"},
    )
    store_weights(w, tmp_path / "one.safetensors")
    first = (tmp_path / "one.safetensors").read_bytes()
    store_weights(load_weights(tmp_path / "one.safetensors"), tmp_path / "two.safetensors")
    second = (tmp_path / "two.safetensors").read_bytes()
    assert hashlib.sha256(first).hexdigest() == hashlib.sha256(second).hexdigest()
    n, metas, metadata = parse_header(first)
    assert n % 8 == 0
    assert [m.name for m in metas] == ["a", "m", "z"]
    # contiguous, no gaps
    ends = 0
    for m in metas:
        assert m.data_offsets[0] == ends
        ends = m.data_offsets[1]
    assert len(first) == 8 + n + ends
    assert metadata == {"format": "pt", "note": "x"}


def test_interop_with_safetensors_library(tmp_path, rng):
    st = pytest.importorskip("safetensors.numpy")
    w = random_weights(rng)
    store_weights(w, tmp_path / "ours.safetensors")
    loaded = st.load_file(str(tmp_path / "ours.safetensors"))
    for name in w:
        assert np.array_equal(loaded[name], w[name].values)
    arrays = {"b": rng.standard_normal((3, 2)).astype(np.float16), "a": rng.standard_normal(4).astype(np.float32)}
    st.save_file(arrays, str(tmp_path / "theirs.safetensors"))
    back = load_weights(tmp_path / "theirs.safetensors")
    assert back["b"].dtype is DType.F16
    assert np.array_equal(back["b"].values, arrays["b"].astype(np.float32))
    assert np.array_equal(back["a"].values, arrays["a"])


def test_weightmap_is_immutable(rng):
    w = random_weights(rng)
    with pytest.raises(ValueError):
        w["embed.weight"].values[0, 0] = 1.0


def test_header_length_corruption_always_detected(rng):
    blob = serialize_weights(random_weights(rng))
    size = len(blob)
    for byte in range(8):
        for value in range(256):
            corrupted = bytearray(blob)
            corrupted[byte] = value
            n = struct.unpack_from("<Q", corrupted)[0]
            if n > size - 8:
                with pytest.raises(TensorFileError):
                    parse_header(bytes(corrupted))


def test_multithreaded_load_matches(tmp_path, rng):
    w = random_weights(rng)
    store_weights(w, tmp_path / "w.safetensors")
    assert load_weights(tmp_path / "w.safetensors", threads=4).equal(w)


def test_path_prefix_keeps_single_location(tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(struct.pack("<Q", 2) + b"\xff\xff")
    with pytest.raises(TensorFileError) as info:
        load_weights(p)
    msg = str(info.value)
    assert msg.startswith(str(p)) and msg.count("byte 8") == 1
