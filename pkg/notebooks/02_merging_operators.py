"""The merge operators side by side on toy tensors.

Run: python notebooks/02_merging_operators.py
"""

from __future__ import annotations

import numpy as np

from mergeforge.merge_ops import (
    BreadcrumbsParams,
    DareParams,
    SlerpParams,
    TiesParams,
    breadcrumbs_merge,
    dare_preprocess,
    slerp_merge,
    task_arithmetic_merge,
    task_vectors,
    ties_merge,
)
from mergeforge.tensor_store import WeightMap

np.set_printoptions(precision=3, suppress=True)

base = WeightMap({"w": np.zeros(5, np.float32)})
experts = [
    WeightMap({"w": np.array([0.1, 0.5, -3.0, 0.2, 0.05], np.float32)}),
    WeightMap({"w": np.array([0.4, -0.6, -1.0, 0.3, 0.0], np.float32)}),
]
tv = task_vectors(base, experts, names=["clinical", "coding"])

# %% Task arithmetic adds the weighted deltas
print("task arithmetic ", task_arithmetic_merge(base, tv, [1.0, 1.0])["w"].values)

# %% TIES keeps the largest entries, elects a sign, and averages agreeing values
print("ties (density .6)", ties_merge(base, tv, TiesParams(0.6, [1.0, 1.0]))["w"].values)

# %% BreadCrumbs drops the largest and the smallest entries of each delta
print("breadcrumbs      ", breadcrumbs_merge(base, tv, BreadcrumbsParams(0.2, 0.2, [1.0, 1.0]))["w"].values)

# %% DARE drops entries at random and rescales the rest; the mean is preserved
sparse = dare_preprocess(tv, DareParams(0.5, seed=1))
print("dare, clinical   ", sparse.deltas[0]["w"])
print("dare + ties      ", ties_merge(base, sparse, TiesParams(1.0, [1.0, 1.0]))["w"].values)

# %% SLERP between two checkpoints keeps the norm of equal-norm tensors
a = WeightMap({"w": np.array([1.0, 0.0], np.float32)})
b = WeightMap({"w": np.array([0.0, 1.0], np.float32)})
for t in (0.10, 0.25, 0.50):
    out = slerp_merge(a, b, SlerpParams(t))["w"].values
    print(f"slerp t={t:.2f} {out} norm {np.linalg.norm(out):.6f}")
