"""Merge recipes: JSON documents, validation, and the search genome encoding.

Recipe document::

    {"base": "base.safetensors",
     "experts": [{"path": "a.safetensors", "weight": 1.0}, ...],
     "method": "slerp" | "task_arithmetic" | "ties" | "breadcrumbs",
     "params": {"t", "t_overrides", "density", "lambda", "beta_top",
                "gamma_bottom", "dare": {"drop_p", "seed"}},
     "output_dtype": "preserve" | "F32" | "F16" | "BF16",
     "allow_missing": false,
     "seed": 0}
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from .merge_ops import BreadcrumbsParams, DareParams, SlerpParams, TiesParams
from .tensor_store import DType

log = logging.getLogger(__name__)

METHODS = ("slerp", "task_arithmetic", "ties", "breadcrumbs")
MULTI_EXPERT_METHODS = ("task_arithmetic", "ties", "breadcrumbs")
# SLERP proportions searched by enumeration rather than by the genome
SLERP_GRID = (0.10, 0.25, 0.50)

WEIGHT_BOUNDS = (0.0, 1.5)
DENSITY_BOUNDS = (0.01, 1.0)
LAMBDA_BOUNDS = (0.01, 2.0)
BAND_BOUNDS = (0.0, 0.3)
DROP_BOUNDS = (0.0, 0.95)

_TOP_KEYS = {"base", "experts", "method", "params", "output_dtype", "allow_missing", "seed"}
_PARAM_KEYS = {"t", "t_overrides", "density", "lambda", "beta_top", "gamma_bottom", "dare"}


class RecipeError(ValueError):
    """Invalid recipe document; ``field`` is the dotted path of the offending value."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class ExpertRef:
    path: str
    weight: float = 1.0


@dataclass(frozen=True)
class MethodParams:
    """Numeric hyperparameters; each method reads only the ones it uses."""

    t: float | None = None
    density: float = 1.0
    lam: float = 1.0
    beta_top: float = 0.0
    gamma_bottom: float = 0.0
    t_overrides: tuple[tuple[str, float], ...] = ()


OutputDType = Union[str, DType]


@dataclass(frozen=True)
class MergeRecipe:
    base: str
    experts: tuple[ExpertRef, ...]
    method: str
    params: MethodParams = field(default_factory=MethodParams)
    dare: DareParams | None = None
    output_dtype: OutputDType = "preserve"
    allow_missing: bool = False
    seed: int = 0
    source: str | None = None

    def __post_init__(self):
        validate_recipe(self)

    @property
    def weights(self) -> list[float]:
        return [e.weight for e in self.experts]

    def slerp_params(self) -> SlerpParams:
        return SlerpParams(self.params.t, t_overrides=dict(self.params.t_overrides))

    def ties_params(self) -> TiesParams:
        return TiesParams(self.params.density, self.weights, self.params.lam)

    def breadcrumbs_params(self) -> BreadcrumbsParams:
        return BreadcrumbsParams(
            self.params.beta_top, self.params.gamma_bottom, self.weights, self.params.lam
        )

    def to_document(self) -> dict:
        p = self.params
        params: dict[str, Any] = {
            "density": p.density,
            "lambda": p.lam,
            "beta_top": p.beta_top,
            "gamma_bottom": p.gamma_bottom,
        }
        if p.t is not None:
            params["t"] = p.t
        if p.t_overrides:
            params["t_overrides"] = dict(p.t_overrides)
        if self.dare is not None:
            params["dare"] = {"drop_p": self.dare.drop_p, "seed": self.dare.seed}
        return {
            "base": self.base,
            "experts": [{"path": e.path, "weight": e.weight} for e in self.experts],
            "method": self.method,
            "params": params,
            "output_dtype": self.output_dtype.value
            if isinstance(self.output_dtype, DType)
            else self.output_dtype,
            "allow_missing": self.allow_missing,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2)


def _in_range(path: str, value: float, lo: float, hi: float, *, lo_open=False, hi_open=False) -> None:
    ok_lo = value > lo if lo_open else value >= lo
    ok_hi = value < hi if hi_open else value <= hi
    if not (ok_lo and ok_hi and math.isfinite(value)):
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise RecipeError(path, f"must be in {lb}{lo}, {hi}{rb}, got {value}")


def validate_recipe(r: MergeRecipe) -> None:
    if r.method not in METHODS:
        raise RecipeError("method", f"unknown method {r.method!r}; expected one of {METHODS}")
    if r.method == "slerp" and len(r.experts) != 1:
        raise RecipeError("experts", f"slerp merges exactly one expert, got {len(r.experts)}")
    if not r.experts:
        raise RecipeError("experts", "at least one expert is required")
    for i, e in enumerate(r.experts):
        _in_range(f"experts[{i}].weight", e.weight, 0.0, math.inf, hi_open=True)
    p = r.params
    if r.method == "slerp" and p.t is None:
        raise RecipeError("method_params.t", "required for slerp")
    if p.t is not None:
        _in_range("method_params.t", p.t, 0.0, 1.0)
    for pattern, t in p.t_overrides:
        _in_range(f"method_params.t_overrides.{pattern}", t, 0.0, 1.0)
    _in_range("method_params.density", p.density, 0.0, 1.0, lo_open=True)
    _in_range("method_params.lambda", p.lam, 0.0, math.inf, lo_open=True, hi_open=True)
    _in_range("method_params.beta_top", p.beta_top, 0.0, 1.0, hi_open=True)
    _in_range("method_params.gamma_bottom", p.gamma_bottom, 0.0, 1.0, hi_open=True)
    if p.beta_top + p.gamma_bottom >= 1.0:
        raise RecipeError("method_params.beta_top", "beta_top + gamma_bottom must be < 1")
    if r.dare is not None and r.method == "slerp":
        raise RecipeError("method_params.dare", "DARE applies to multi-expert methods only")
    if not (isinstance(r.output_dtype, DType) or r.output_dtype == "preserve"):
        raise RecipeError("output_dtype", f"expected 'preserve' or a DType, got {r.output_dtype!r}")
    if not 0 <= r.seed < 2**64:
        raise RecipeError("seed", f"must be a 64-bit unsigned integer, got {r.seed}")


# -- parsing -------------------------------------------------------------------


def _number(doc: Mapping, key: str, path: str, default=None) -> float | None:
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise RecipeError(path, f"expected a number, got {v!r}")
    return float(v)


def _integer(doc: Mapping, key: str, path: str, default: int) -> int:
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise RecipeError(path, f"expected an integer, got {v!r}")
    if not 0 <= v < 2**64:
        raise RecipeError(path, f"must be a 64-bit unsigned integer, got {v}")
    return v


def _string(doc: Mapping, key: str, path: str) -> str:
    v = doc.get(key)
    if not isinstance(v, str) or not v:
        raise RecipeError(path, f"expected a non-empty string, got {v!r}")
    return v


def _unknown(doc: Mapping, allowed: set, prefix: str) -> None:
    for key in doc:
        if key not in allowed:
            raise RecipeError(f"{prefix}{key}", "unknown field")


def parse_recipe(document: str | Mapping, *, base_dir: str | os.PathLike | None = None) -> MergeRecipe:
    """Validate a recipe document (JSON text or decoded mapping).

    Relative paths are resolved against ``base_dir`` when it is given.
    """
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise RecipeError("$", f"malformed JSON: {exc}") from None
    else:
        doc = document
    if not isinstance(doc, dict):
        raise RecipeError("$", "recipe must be a JSON object")
    _unknown(doc, _TOP_KEYS, "")

    def resolve(p: str) -> str:
        if base_dir is None or os.path.isabs(p):
            return p
        return str(Path(base_dir) / p)

    base = resolve(_string(doc, "base", "base"))
    raw_experts = doc.get("experts")
    if not isinstance(raw_experts, list):
        raise RecipeError("experts", "expected a list")
    experts = []
    for i, e in enumerate(raw_experts):
        if isinstance(e, str):
            e = {"path": e}
        if not isinstance(e, dict):
            raise RecipeError(f"experts[{i}]", "expected an object")
        _unknown(e, {"path", "weight"}, f"experts[{i}].")
        path = resolve(_string(e, "path", f"experts[{i}].path"))
        weight = _number(e, "weight", f"experts[{i}].weight", 1.0)
        experts.append(ExpertRef(path, weight))

    method = doc.get("method")
    if method not in METHODS:
        raise RecipeError("method", f"expected one of {METHODS}, got {method!r}")

    raw_params = doc.get("params", {})
    if not isinstance(raw_params, dict):
        raise RecipeError("method_params", "expected an object")
    _unknown(raw_params, _PARAM_KEYS, "method_params.")
    overrides = raw_params.get("t_overrides", {})
    if not isinstance(overrides, dict):
        raise RecipeError("method_params.t_overrides", "expected an object")
    params = MethodParams(
        t=_number(raw_params, "t", "method_params.t"),
        density=_number(raw_params, "density", "method_params.density", 1.0),
        lam=_number(raw_params, "lambda", "method_params.lambda", 1.0),
        beta_top=_number(raw_params, "beta_top", "method_params.beta_top", 0.0),
        gamma_bottom=_number(raw_params, "gamma_bottom", "method_params.gamma_bottom", 0.0),
        t_overrides=tuple(
            (k, _number(overrides, k, f"method_params.t_overrides.{k}")) for k in overrides
        ),
    )
    seed = _integer(doc, "seed", "seed", 0)

    dare = None
    raw_dare = raw_params.get("dare")
    if raw_dare is not None:
        if not isinstance(raw_dare, dict):
            raise RecipeError("method_params.dare", "expected an object")
        _unknown(raw_dare, {"drop_p", "seed"}, "method_params.dare.")
        drop_p = _number(raw_dare, "drop_p", "method_params.dare.drop_p")
        if drop_p is None:
            raise RecipeError("method_params.dare.drop_p", "required")
        _in_range("method_params.dare.drop_p", drop_p, 0.0, 1.0, hi_open=True)
        dare_seed = _integer(raw_dare, "seed", "method_params.dare.seed", seed)
        # drop_p == 0 is the identity; normalize to "no DARE"
        if drop_p > 0:
            dare = DareParams(drop_p, dare_seed)

    raw_dtype = doc.get("output_dtype", "preserve")
    if raw_dtype == "preserve":
        output_dtype: OutputDType = "preserve"
    else:
        try:
            output_dtype = DType.parse(raw_dtype)
        except (ValueError, TypeError):
            raise RecipeError("output_dtype", f"expected preserve/F32/F16/BF16, got {raw_dtype!r}") from None

    allow_missing = doc.get("allow_missing", False)
    if not isinstance(allow_missing, bool):
        raise RecipeError("allow_missing", f"expected a boolean, got {allow_missing!r}")

    return MergeRecipe(
        base=base,
        experts=tuple(experts),
        method=method,
        params=params,
        dare=dare,
        output_dtype=output_dtype,
        allow_missing=allow_missing,
        seed=seed,
        source=str(base_dir) if base_dir is not None else None,
    )


def load_recipe(path: str | os.PathLike) -> MergeRecipe:
    path = Path(path)
    recipe = parse_recipe(path.read_text(encoding="utf-8"), base_dir=path.parent)
    return replace(recipe, source=str(path))


# -- genome --------------------------------------------------------------------


@dataclass(frozen=True)
class Genome:
    """Fixed-length encoding of a multi-expert recipe.

    method: 0 task_arithmetic, 1 ties, 2 breadcrumbs.
    """

    method: int
    weights: tuple[float, ...]
    density: float
    lam: float
    beta: float
    gamma: float
    drop: float

    @staticmethod
    def gene_names(n_experts: int) -> list[str]:
        return ["method", *(f"weight_{i}" for i in range(n_experts)), "density", "lambda", "beta", "gamma", "drop"]

    @staticmethod
    def bounds(n_experts: int) -> tuple[np.ndarray, np.ndarray]:
        spans = [(0, 2), *([WEIGHT_BOUNDS] * n_experts), DENSITY_BOUNDS, LAMBDA_BOUNDS, BAND_BOUNDS, BAND_BOUNDS, DROP_BOUNDS]
        lo, hi = zip(*spans)
        return np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64)

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.method, *self.weights, self.density, self.lam, self.beta, self.gamma, self.drop],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, vec) -> "Genome":
        vec = [float(x) for x in vec]
        if len(vec) < 7:
            raise ValueError(f"genome vector too short: {len(vec)}")
        n = len(vec) - 6
        return cls(int(round(vec[0])), tuple(vec[1 : 1 + n]), *vec[1 + n :])

    def clamped(self) -> "Genome":
        lo, hi = self.bounds(len(self.weights))
        vec = self.to_vector()
        clipped = np.clip(vec, lo, hi)
        clipped[0] = min(2, max(0, int(round(vec[0]))))
        if not np.array_equal(clipped, vec):
            names = self.gene_names(len(self.weights))
            bad = [names[i] for i in np.flatnonzero(clipped != vec)]
            log.warning("genes out of bounds clamped: %s", ", ".join(bad))
            return Genome.from_vector(clipped)
        return self


def recipe_to_genome(recipe: MergeRecipe) -> Genome:
    if recipe.method not in MULTI_EXPERT_METHODS:
        raise RecipeError("method", f"{recipe.method} is not searched by the genome")
    p = recipe.params
    return Genome(
        method=MULTI_EXPERT_METHODS.index(recipe.method),
        weights=tuple(recipe.weights),
        density=p.density,
        lam=p.lam,
        beta=p.beta_top,
        gamma=p.gamma_bottom,
        drop=recipe.dare.drop_p if recipe.dare is not None else 0.0,
    )


def genome_to_recipe(genome: Genome, template: MergeRecipe) -> MergeRecipe:
    """Overwrite the template's method and numbers from ``genome`` (clamped to bounds)."""
    if len(genome.weights) != len(template.experts):
        raise RecipeError(
            "experts", f"genome has {len(genome.weights)} weights, template {len(template.experts)} experts"
        )
    g = genome.clamped()
    experts = tuple(ExpertRef(e.path, w) for e, w in zip(template.experts, g.weights))
    params = replace(template.params, density=g.density, lam=g.lam, beta_top=g.beta, gamma_bottom=g.gamma)
    dare = None
    if g.drop > 0:
        seed = template.dare.seed if template.dare is not None else template.seed
        dare = DareParams(g.drop, seed)
    return replace(
        template,
        experts=experts,
        method=MULTI_EXPERT_METHODS[g.method],
        params=params,
        dare=dare,
    )
