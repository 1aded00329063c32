"""Recovering hidden merge weights with the evolutionary search.

The target checkpoint is itself a task-arithmetic merge, so the best
possible fitness is zero distance at known weights.

Run: python notebooks/03_evolutionary_search.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from mergeforge.evolve import EvaluatorSpec, resume_search, run_search
from mergeforge.merge_ops import task_arithmetic_merge, task_vectors
from mergeforge.recipe import ExpertRef, MergeRecipe
from mergeforge.tensor_store import WeightMap, store_weights

rng = np.random.default_rng(42)
workdir = Path(tempfile.mkdtemp())
hidden = [0.35, 1.1]

base = WeightMap({"w": rng.standard_normal(16).astype(np.float32)})
experts = [WeightMap({"w": rng.standard_normal(16).astype(np.float32)}) for _ in range(2)]
target = task_arithmetic_merge(base, task_vectors(base, experts), hidden)
for name, wm in [("base", base), ("e0", experts[0]), ("e1", experts[1]), ("target", target)]:
    store_weights(wm, workdir / f"{name}.safetensors")

template = MergeRecipe(
    str(workdir / "base.safetensors"),
    (ExpertRef(str(workdir / "e0.safetensors")), ExpertRef(str(workdir / "e1.safetensors"))),
    "task_arithmetic",
)
spec = EvaluatorSpec("synthetic_target", target_path=str(workdir / "target.safetensors"))

# %% Search only the two weight genes; everything else stays at the template
result = run_search(template, spec, budget=500, seed=0, search_genes=["weight_0", "weight_1"])
print("hidden weights:", hidden)
print("found weights: ", [round(w, 4) for w in result.best_recipe.weights])
print("fitness:", result.best_fitness, "evaluations:", result.state.evaluations_used)

# %% Best fitness per generation never decreases
best = -np.inf
for gen in range(result.state.generation + 1):
    scores = [h["fitness"] for h in result.history if h["generation"] == gen]
    if scores:
        best = max(best, max(scores))
    if gen % 5 == 0:
        print(f"generation {gen:3d} best {best:.5f}")

# %% A run stopped early and resumed produces the same history
state_path = workdir / "state.json"
run_search(template, spec, budget=200, seed=7, search_genes=["weight_0", "weight_1"],
           state_path=state_path, max_generations=3)
resumed = run_search(template, spec, state=resume_search(state_path), state_path=state_path)
straight = run_search(template, spec, budget=200, seed=7, search_genes=["weight_0", "weight_1"])
print("resume matches uninterrupted run:", resumed.history == straight.history)
