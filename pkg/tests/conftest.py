from __future__ import annotations

import sys

import numpy as np
import pytest

from mergeforge.tensor_store import DType, Tensor, WeightMap, store_weights

SHAPES = {"embed.weight": (4, 3), "layers.0.bias": (3,), "layers.0.weight": (3, 3), "norm.scale": ()}


def random_weights(rng: np.random.Generator, shapes=SHAPES, dtype=DType.F32) -> WeightMap:
    return WeightMap(
        {name: Tensor(rng.standard_normal(shape).astype(np.float32), dtype) for name, shape in shapes.items()}
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_checkpoints(tmp_path, rng):
    """base + two experts on disk; returns (base_path, [expert paths])."""
    base = random_weights(rng)
    paths = []
    store_weights(base, tmp_path / "base.safetensors")
    for i in range(2):
        expert = WeightMap(
            {
                n: Tensor(t.values + 0.1 * rng.standard_normal(t.shape).astype(np.float32))
                for n, t in base.items()
            }
        )
        p = tmp_path / f"expert{i}.safetensors"
        store_weights(expert, p)
        paths.append(p)
    return tmp_path / "base.safetensors", paths


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)
