"""Reading and writing weight files.

Run: python notebooks/01_tensor_files.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from mergeforge.tensor_store import DType, Tensor, TensorFileError, WeightMap, convert_scalar, load_weights, store_weights

# %% A small checkpoint with one tensor of each storage type
rng = np.random.default_rng(0)
weights = WeightMap(
    {
        "embed.weight": Tensor(rng.standard_normal((4, 3)).astype(np.float32), DType.BF16),
        "layers.0.bias": Tensor(rng.standard_normal(3).astype(np.float32), DType.F16),
        "norm.scale": Tensor(np.ones(3, np.float32), DType.F32),
    },
    metadata={"format": "pt"},
)

workdir = Path(tempfile.mkdtemp())
path = workdir / "tiny.safetensors"
store_weights(weights, path)
print(f"wrote {path.stat().st_size} bytes")

# %% Values held in memory are float32; the file keeps each tensor's dtype
back = load_weights(path)
for name, tensor in back.items():
    print(f"{name:15s} {tensor.dtype.value:5s} {tensor.shape}")
# BF16 and F16 tensors were rounded on write; F32 comes back bit for bit
for name in weights:
    err = np.max(np.abs(back[name].values - weights[name].values))
    print(f"{name:15s} max rounding error {err:.2e}")

# %% Narrowing rounds to nearest, ties to even
for x in (1.0009765625, 65519.0, 65520.0):
    print(f"{x:>14} -> F16 {convert_scalar(x, DType.F16):#06x}  BF16 {convert_scalar(x, DType.BF16):#06x}")

# %% Writing is canonical, so a reload and rewrite gives identical bytes
store_weights(back, workdir / "again.safetensors")
print("byte identical:", path.read_bytes() == (workdir / "again.safetensors").read_bytes())

# %% Damaged files raise a TensorFileError naming the problem
blob = bytearray(path.read_bytes())
blob[0] = 0xFF
(workdir / "broken.safetensors").write_bytes(bytes(blob))
try:
    load_weights(workdir / "broken.safetensors")
except TensorFileError as exc:
    print("rejected:", exc)
