"""Budgeted evolutionary search over multi-expert merge recipes.

A seeded (mu + lambda) genetic algorithm with elitism: tournament selection
(size 3), uniform crossover, Gaussian mutation clamped to gene bounds. Every
evaluator invocation costs one unit of budget, failed ones included; genomes
seen before are served from a cache for free.

Evaluator protocol for external commands: the command template has ``{model}``
replaced by the path of the merged checkpoint, must exit 0 and print
``{"scores": {dataset: number in [0, 100]}}`` on stdout. Fitness is the
(optionally weighted) mean of the scores.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .merge_ops import merge_model
from .recipe import Genome, MergeRecipe, genome_to_recipe, parse_recipe, recipe_to_genome
from .tensor_store import WeightMap, load_weights, store_weights

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TOURNAMENT_SIZE = 3
CROSSOVER_RATE = 0.5
MUTATION_RATE = 0.3
MUTATION_SCALE = 0.1  # fraction of each gene's range
# generations in a row without a new evaluation before giving up
MAX_STALL = 200

__all__ = [
    "EvaluatorSpec",
    "SearchState",
    "SearchResult",
    "Evaluator",
    "parse_scores",
    "evaluate_config",
    "run_search",
    "checkpoint_search",
    "resume_search",
    "genome_key",
]


@dataclass(frozen=True)
class EvaluatorSpec:
    kind: str  # "external_command" | "synthetic_target"
    command_template: str | None = None
    target_path: str | None = None
    timeout: float = 3600.0
    parallel_evals: int = 1
    dataset_weights: Mapping[str, float] | None = None
    keep_candidates: bool = False
    scratch_dir: str | None = None

    def __post_init__(self):
        if self.kind == "external_command":
            if not self.command_template or "{model}" not in self.command_template:
                raise ValueError('external evaluator needs a command template containing "{model}"')
        elif self.kind == "synthetic_target":
            if not self.target_path:
                raise ValueError("synthetic evaluator needs a target checkpoint path")
        else:
            raise ValueError(f"unknown evaluator kind {self.kind!r}")
        if not self.timeout > 0:
            raise ValueError("evaluator timeout must be > 0")
        if self.parallel_evals < 1:
            raise ValueError("parallel_evals must be >= 1")


def parse_scores(text: str, weights: Mapping[str, float] | None = None) -> float:
    """Fitness from an evaluator's stdout; raises ValueError if malformed."""
    doc = json.loads(text)
    scores = doc.get("scores") if isinstance(doc, dict) else None
    if not isinstance(scores, dict) or not scores:
        raise ValueError('expected {"scores": {dataset: number}} with at least one dataset')
    total = wsum = 0.0
    for name, value in scores.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 <= value <= 100:
            raise ValueError(f"score for {name!r} must be a number in [0, 100], got {value!r}")
        w = 1.0 if weights is None else float(weights.get(name, 1.0))
        total += w * value
        wsum += w
    if wsum <= 0:
        raise ValueError("dataset weights sum to zero")
    return total / wsum


def genome_key(vec: Sequence[float]) -> str:
    return hashlib.sha256(np.asarray(vec, dtype="<f8").tobytes()).hexdigest()


class Evaluator:
    """Turns a genome into a fitness by merging and scoring. Counts invocations."""

    def __init__(
        self,
        spec: EvaluatorSpec,
        template: MergeRecipe,
        *,
        loader: Callable[[str], WeightMap] | None = None,
        threads: int | None = 1,
    ):
        self.spec = spec
        self.template = template
        self.threads = threads
        self.calls = 0
        self._loader = loader or load_weights
        self._loaded: dict[str, WeightMap] = {}
        self._target = None
        if spec.kind == "synthetic_target":
            self._target = self._load(spec.target_path)

    def _load(self, path: str) -> WeightMap:
        if path not in self._loaded:
            self._loaded[path] = self._loader(path)
        return self._loaded[path]

    def preload(self) -> None:
        """Load template checkpoints up front so missing files fail fast."""
        self._load(self.template.base)
        for e in self.template.experts:
            self._load(e.path)

    def __call__(self, genome: Genome) -> float:
        self.calls += 1
        recipe = genome_to_recipe(genome, self.template)
        try:
            merged = merge_model(recipe, self._load, threads=self.threads)
        except Exception as exc:
            log.error("merge failed: %s", exc)
            return -math.inf
        if self._target is not None:
            return _negative_distance(merged, self._target)
        return self._run_external(merged, recipe)

    def _run_external(self, merged: WeightMap, recipe: MergeRecipe) -> float:
        scratch = self.spec.scratch_dir or os.environ.get("MERGEFORGE_TMPDIR") or None
        fd, path = tempfile.mkstemp(prefix="candidate-", suffix=".safetensors", dir=scratch)
        os.close(fd)
        try:
            store_weights(merged, path, recipe.output_dtype)
            argv = [arg.replace("{model}", path) for arg in shlex.split(self.spec.command_template)]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.spec.timeout, check=False
                )
            except subprocess.TimeoutExpired:
                log.error("evaluator timed out after %ss on %s", self.spec.timeout, path)
                return -math.inf
            except OSError as exc:
                log.error("evaluator could not start: %s", exc)
                return -math.inf
            if proc.returncode != 0:
                log.error("evaluator exited %d: %s", proc.returncode, proc.stderr.strip()[-500:])
                return -math.inf
            try:
                return parse_scores(proc.stdout, self.spec.dataset_weights)
            except (ValueError, AttributeError) as exc:
                log.error("malformed evaluator output: %s", exc)
                return -math.inf
        finally:
            if not self.spec.keep_candidates:
                Path(path).unlink(missing_ok=True)


def _negative_distance(a: WeightMap, b: WeightMap) -> float:
    total = 0.0
    for name in a:
        d = a[name].values.astype(np.float64) - b[name].values.astype(np.float64)
        total += float(np.dot(d.reshape(-1), d.reshape(-1)))
    return -math.sqrt(total)


def evaluate_config(
    genome: Genome,
    evaluator: Callable[[Genome], float],
    cache: dict[str, float] | None = None,
) -> float:
    """Fitness of ``genome``; a cache hit skips the evaluator entirely."""
    key = genome_key(genome.clamped().to_vector())
    if cache is not None and key in cache:
        return cache[key]
    fitness = float(evaluator(genome))
    if cache is not None:
        cache[key] = fitness
    return fitness


# -- search state ----------------------------------------------------------------


def _enc(x: float):
    return x if math.isfinite(x) else str(x)


def _dec(x) -> float:
    return float(x)


@dataclass
class SearchState:
    seed: int
    budget: int
    population_size: int
    n_experts: int
    search_genes: list[str]
    rng_state: dict
    generation: int = 0
    evaluations_used: int = 0
    stall: int = 0
    population: list[tuple[list[float], float]] = field(default_factory=list)
    best: tuple[list[float], float] | None = None
    cache: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "budget": self.budget,
            "population_size": self.population_size,
            "n_experts": self.n_experts,
            "search_genes": self.search_genes,
            "rng_state": self.rng_state,
            "generation": self.generation,
            "evaluations_used": self.evaluations_used,
            "stall": self.stall,
            "population": [{"genome": g, "fitness": _enc(f)} for g, f in self.population],
            "best": None if self.best is None else {"genome": self.best[0], "fitness": _enc(self.best[1])},
            "cache": {k: _enc(v) for k, v in self.cache.items()},
            "history": [
                {"genome": h["genome"], "fitness": _enc(h["fitness"]), "generation": h["generation"]}
                for h in self.history
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SearchState":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported search state format {doc.get('format_version')!r}")
        best = doc["best"]
        return cls(
            seed=doc["seed"],
            budget=doc["budget"],
            population_size=doc["population_size"],
            n_experts=doc["n_experts"],
            search_genes=list(doc["search_genes"]),
            rng_state=doc["rng_state"],
            generation=doc["generation"],
            evaluations_used=doc["evaluations_used"],
            stall=doc["stall"],
            population=[(list(p["genome"]), _dec(p["fitness"])) for p in doc["population"]],
            best=None if best is None else (list(best["genome"]), _dec(best["fitness"])),
            cache={k: _dec(v) for k, v in doc["cache"].items()},
            history=[
                {"genome": list(h["genome"]), "fitness": _dec(h["fitness"]), "generation": h["generation"]}
                for h in doc["history"]
            ],
        )


def checkpoint_search(state: SearchState, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(state.to_json()), encoding="utf-8")
    os.replace(tmp, path)


def resume_search(path: str | os.PathLike) -> SearchState:
    return SearchState.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SearchResult:
    best_recipe: MergeRecipe
    best_fitness: float
    history: list[dict]
    state: SearchState


# -- the genetic algorithm -------------------------------------------------------


class _Search:
    def __init__(self, template: MergeRecipe, evaluate: Callable[[Genome], float], state: SearchState, parallel: int):
        self.template = template
        self.evaluate = evaluate
        self.state = state
        self.parallel = parallel
        n = state.n_experts
        self.lo, self.hi = Genome.bounds(n)
        names = Genome.gene_names(n)
        unknown = set(state.search_genes) - set(names)
        if unknown:
            raise ValueError(f"unknown genes {sorted(unknown)}; available: {names}")
        self.active = np.array([name in state.search_genes for name in names])
        self.origin = np.clip(recipe_to_genome(template).to_vector(), self.lo, self.hi)
        self.rng = np.random.Generator(np.random.PCG64())
        self.rng.bit_generator.state = state.rng_state

    def _finish(self, vec: np.ndarray) -> list[float]:
        vec = np.where(self.active, vec, self.origin)
        vec = np.clip(vec, self.lo, self.hi)
        vec[0] = float(int(round(vec[0])))
        return [float(x) for x in vec]

    def random_genome(self) -> list[float]:
        vec = self.rng.uniform(self.lo, self.hi)
        vec[0] = float(self.rng.integers(0, 3))
        return self._finish(vec)

    def tournament(self) -> list[float]:
        pop = self.state.population
        picks = self.rng.integers(0, len(pop), TOURNAMENT_SIZE)
        winner = picks[0]
        for i in picks[1:]:
            if pop[i][1] > pop[winner][1]:
                winner = i
        return pop[winner][0]

    def offspring(self) -> list[float]:
        p1 = np.array(self.tournament())
        p2 = np.array(self.tournament())
        child = np.where(self.rng.random(p1.size) < CROSSOVER_RATE, p2, p1)
        mutate = self.rng.random(p1.size) < MUTATION_RATE
        noise = self.rng.normal(0.0, MUTATION_SCALE * (self.hi - self.lo))
        new_method = float(self.rng.integers(0, 3))
        child = np.where(mutate, child + noise, child)
        if mutate[0]:
            child[0] = new_method
        return self._finish(child)

    def evaluate_batch(self, genomes: list[list[float]]) -> list[tuple[list[float], float]]:
        """Evaluate new genomes within budget; returns the (genome, fitness) pairs that got a fitness."""
        st = self.state
        keys = [genome_key(g) for g in genomes]
        todo: dict[str, list[float]] = {}
        for key, g in zip(keys, genomes):
            if key in st.cache or key in todo:
                continue
            if st.evaluations_used + len(todo) >= st.budget:
                break
            todo[key] = g
        pending = list(todo.items())
        if self.parallel > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.parallel) as pool:
                fits = list(pool.map(lambda kv: float(self.evaluate(Genome.from_vector(kv[1]))), pending))
        else:
            fits = [float(self.evaluate(Genome.from_vector(g))) for _, g in pending]
        for (key, g), f in zip(pending, fits):
            st.cache[key] = f
            st.history.append({"genome": g, "fitness": f, "generation": st.generation})
            if st.best is None or f > st.best[1]:
                st.best = (g, f)
        st.evaluations_used += len(pending)
        st.stall = 0 if pending else st.stall + 1
        return [(g, st.cache[k]) for k, g in zip(keys, genomes) if k in st.cache]

    def survivors(self, pool: list[tuple[list[float], float]]) -> list[tuple[list[float], float]]:
        seen = set()
        unique = []
        for g, f in pool:
            key = genome_key(g)
            if key not in seen:
                seen.add(key)
                unique.append((g, f))
        order = sorted(range(len(unique)), key=lambda i: -unique[i][1] if not math.isnan(unique[i][1]) else math.inf)
        return [unique[i] for i in order[: self.state.population_size]]

    def initialize(self) -> None:
        st = self.state
        genomes = [self._finish(self.origin.copy())]
        genomes += [self.random_genome() for _ in range(st.population_size - 1)]
        st.population = self.survivors(self.evaluate_batch(genomes))

    def step(self) -> None:
        st = self.state
        st.generation += 1
        children = [self.offspring() for _ in range(st.population_size)]
        evaluated = self.evaluate_batch(children)
        st.population = self.survivors(st.population + evaluated)

    def save_rng(self) -> None:
        self.state.rng_state = self.rng.bit_generator.state


def run_search(
    template: MergeRecipe,
    evaluator: EvaluatorSpec | Callable[[Genome], float],
    budget: int = 500,
    population_size: int = 20,
    seed: int = 0,
    *,
    state: SearchState | None = None,
    state_path: str | os.PathLike | None = None,
    search_genes: Sequence[str] | None = None,
    max_generations: int | None = None,
    loader: Callable[[str], WeightMap] | None = None,
    threads: int | None = 1,
) -> SearchResult:
    """Search merge configurations of ``template``'s experts.

    ``evaluator`` is an :class:`EvaluatorSpec` or any callable mapping a
    :class:`Genome` to a fitness (higher is better). ``search_genes`` restricts
    the search to the named genes; the rest stay at the template's values.
    Passing a resumed ``state`` continues that run exactly. ``max_generations``
    stops early (after checkpointing) for staged runs.
    """
    n = len(template.experts)
    parallel = 1
    if isinstance(evaluator, EvaluatorSpec):
        parallel = evaluator.parallel_evals
        evaluator = Evaluator(evaluator, template, loader=loader, threads=threads)
        evaluator.preload()
    if state is None:
        if budget < population_size:
            raise ValueError(f"budget ({budget}) must be >= population size ({population_size})")
        if population_size < 1:
            raise ValueError("population size must be >= 1")
        state = SearchState(
            seed=seed,
            budget=budget,
            population_size=population_size,
            n_experts=n,
            search_genes=list(search_genes) if search_genes is not None else Genome.gene_names(n),
            rng_state=np.random.Generator(np.random.PCG64(seed)).bit_generator.state,
        )
    elif state.n_experts != n:
        raise ValueError(f"state has {state.n_experts} experts, template {n}")

    search = _Search(template, evaluator, state, parallel)
    if not state.population and state.generation == 0 and not state.history:
        search.initialize()
        search.save_rng()
        if state_path is not None:
            checkpoint_search(state, state_path)
    steps = 0
    while state.evaluations_used < state.budget and state.stall < MAX_STALL:
        if max_generations is not None and steps >= max_generations:
            break
        search.step()
        search.save_rng()
        steps += 1
        if state_path is not None:
            checkpoint_search(state, state_path)
    if state.stall >= MAX_STALL:
        log.warning("search stalled: %d generations without a new genome", state.stall)

    if state.best is None:
        raise RuntimeError("no genome was evaluated")
    best_genome = Genome.from_vector(state.best[0])
    return SearchResult(
        best_recipe=genome_to_recipe(best_genome, template),
        best_fitness=state.best[1],
        history=state.history,
        state=state,
    )
