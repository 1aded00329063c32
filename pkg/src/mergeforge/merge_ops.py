"""Tensor-wise merging operators over aligned weight maps.

Arithmetic is float32 in, float32 out. Deltas are held in float64 so that
``base + (expert - base)`` reproduces the expert exactly, and all reductions
accumulate in float64.

Multi-expert sums are taken over per-element *sorted* contributions, which
makes task arithmetic, TIES and BreadCrumbs bitwise independent of expert
order.
"""

from __future__ import annotations

import fnmatch
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor_store import Tensor, WeightMap

log = logging.getLogger(__name__)

__all__ = [
    "MergeError",
    "TaskVectorSet",
    "SlerpParams",
    "TiesParams",
    "DareParams",
    "BreadcrumbsParams",
    "task_vectors",
    "slerp",
    "slerp_merge",
    "task_arithmetic_merge",
    "ties_merge",
    "dare_preprocess",
    "breadcrumbs_merge",
    "trim_count",
    "drop_counts",
    "merge_model",
]


class MergeError(ValueError):
    """Merge inputs are inconsistent (shapes, names, parameter ranges)."""

    def __init__(self, message: str, *, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(f"{tensor}: {message}" if tensor else message)


@dataclass(frozen=True)
class TaskVectorSet:
    """Per-expert float64 deltas against a common base."""

    base_name: str
    expert_names: tuple[str, ...]
    deltas: tuple[Mapping[str, np.ndarray], ...]

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class SlerpParams:
    t: float
    colinear_threshold: float = 0.9995
    # fnmatch pattern -> t, first match wins
    t_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for key, t in [("t", self.t), *self.t_overrides.items()]:
            if not 0.0 <= t <= 1.0:
                raise MergeError(f"slerp t must lie in [0, 1], got {t} for {key!r}")

    def t_for(self, name: str) -> float:
        for pattern, t in self.t_overrides.items():
            if fnmatch.fnmatchcase(name, pattern):
                return t
        return self.t


@dataclass(frozen=True)
class TiesParams:
    density: float
    weights: Sequence[float]
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise MergeError(f"TIES density must lie in (0, 1], got {self.density}")
        _check_weights(self.weights, self.lam)


@dataclass(frozen=True)
class DareParams:
    drop_p: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_p < 1.0:
            raise MergeError(f"DARE drop_p must lie in [0, 1), got {self.drop_p}")
        if not 0 <= self.seed < 2**64:
            raise MergeError(f"DARE seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class BreadcrumbsParams:
    beta_top: float
    gamma_bottom: float
    weights: Sequence[float]
    lam: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta_top < 1.0 and 0.0 <= self.gamma_bottom < 1.0):
            raise MergeError(
                f"BreadCrumbs fractions must lie in [0, 1), got {self.beta_top}, {self.gamma_bottom}"
            )
        if self.beta_top + self.gamma_bottom >= 1.0:
            raise MergeError("BreadCrumbs beta_top + gamma_bottom must be < 1")
        _check_weights(self.weights, self.lam)


def _check_weights(weights: Sequence[float], lam: float) -> None:
    if lam <= 0:
        raise MergeError(f"lambda must be > 0, got {lam}")
    if any(w < 0 for w in weights):
        raise MergeError(f"expert weights must be >= 0, got {list(weights)}")


def trim_count(density: float, n: int) -> int:
    """Entries TIES keeps per tensor: ceil(density * n)."""
    # round() absorbs float noise such as 0.1 * 30 = 3.0000000000000004
    return min(n, math.ceil(round(density * n, 9)))


def drop_counts(beta_top: float, gamma_bottom: float, n: int) -> tuple[int, int]:
    """(largest, smallest) entry counts BreadCrumbs zeroes: floor of each fraction."""
    return math.floor(round(beta_top * n, 9)), math.floor(round(gamma_bottom * n, 9))


# -- helpers -------------------------------------------------------------------


def _map_tensors(fn: Callable[[str], np.ndarray], names: Sequence[str], threads: int | None):
    if threads == 1 or len(names) < 2:
        return {name: fn(name) for name in names}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return dict(zip(names, pool.map(fn, names)))


def _sorted_sum(rows: np.ndarray) -> np.ndarray:
    """Sum over axis 0 in ascending value order per column (order-free result)."""
    rows = np.sort(rows, axis=0)
    acc = rows[0].copy()
    for row in rows[1:]:
        acc += row
    return acc


def _apply_update(base: np.ndarray, update: np.ndarray) -> np.ndarray:
    out = (base.astype(np.float64) + update).astype(np.float32)
    # keep base bits where nothing changes (e.g. -0.0 + 0.0)
    return np.where(update == 0, base, out)


def _check_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MergeError(f"shape mismatch {a.shape} vs {b.shape}", tensor=name)


def _check_weight_count(tv: TaskVectorSet, weights: Sequence[float]) -> None:
    if len(weights) != len(tv):
        raise MergeError(f"{len(weights)} weights given for {len(tv)} task vectors")


# -- operators -----------------------------------------------------------------


def task_vectors(
    base: WeightMap,
    experts: Sequence[WeightMap],
    *,
    names: Sequence[str] | None = None,
    base_name: str = "base",
    allow_missing: bool = False,
) -> TaskVectorSet:
    """Per-expert deltas ``expert - base`` in float64.

    With ``allow_missing`` an expert lacking a base tensor contributes a zero
    delta (logged), and extra expert tensors are ignored.
    """
    names = list(names) if names is not None else [f"expert_{i}" for i in range(len(experts))]
    if len(names) != len(experts):
        raise MergeError(f"{len(names)} names given for {len(experts)} experts")
    deltas = []
    for expert_name, expert in zip(names, experts):
        missing = [n for n in base if n not in expert]
        extra = [n for n in expert if n not in base]
        if (missing or extra) and not allow_missing:
            detail = []
            if missing:
                detail.append(f"missing {missing[:5]}")
            if extra:
                detail.append(f"unexpected {extra[:5]}")
            raise MergeError(f"tensor names of {expert_name!r} differ from base: " + "; ".join(detail))
        if missing:
            log.warning("%s: %d tensor(s) missing, using zero deltas", expert_name, len(missing))
        delta = {}
        for tname, tensor in base.items():
            b = tensor.values
            if tname not in expert:
                delta[tname] = np.zeros(b.shape, dtype=np.float64)
                continue
            e = expert[tname].values
            _check_shape(tname, b, e)
            delta[tname] = e.astype(np.float64) - b.astype(np.float64)
        deltas.append(delta)
    return TaskVectorSet(base_name, tuple(names), tuple(deltas))


def slerp(v0: np.ndarray, v1: np.ndarray, t: float, colinear_threshold: float = 0.9995) -> np.ndarray:
    """Spherical interpolation between two float32 arrays treated as flat vectors."""
    v0 = np.asarray(v0, dtype=np.float32)
    v1 = np.asarray(v1, dtype=np.float32)
    if t == 0.0:
        return v0.copy()
    if t == 1.0:
        return v1.copy()
    a = v0.reshape(-1).astype(np.float64)
    b = v1.reshape(-1).astype(np.float64)
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        out = (1.0 - t) * a + t * b
    else:
        cos = min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))
        if abs(cos) > colinear_threshold:
            out = (1.0 - t) * a + t * b
        else:
            omega = math.acos(cos)
            s = math.sin(omega)
            out = (math.sin((1.0 - t) * omega) / s) * a + (math.sin(t * omega) / s) * b
    return out.astype(np.float32).reshape(v0.shape)


def slerp_merge(
    base: WeightMap,
    expert: WeightMap,
    params: SlerpParams,
    *,
    allow_missing: bool = False,
    threads: int | None = 1,
) -> WeightMap:
    """SLERP each tensor of ``base`` toward ``expert`` by ``params.t``.

    Missing expert tensors (with ``allow_missing``) keep the base value.
    """
    if not allow_missing and list(base) != list(expert):
        raise MergeError("tensor names of expert differ from base")

    def one(name: str) -> np.ndarray:
        b = base[name].values
        if name not in expert:
            return b
        e = expert[name].values
        _check_shape(name, b, e)
        return slerp(b, e, params.t_for(name), params.colinear_threshold)

    out = _map_tensors(one, list(base), threads)
    return _rebuild(base, out)


def _rebuild(base: WeightMap, arrays: Mapping[str, np.ndarray]) -> WeightMap:
    return WeightMap(
        {name: Tensor(arrays[name], base[name].dtype) for name in base}, base.metadata
    )


def _combine(
    base: WeightMap,
    tv: TaskVectorSet,
    per_expert: Callable[[str, int, np.ndarray], np.ndarray],
    weights: Sequence[float],
    lam: float,
    threads: int | None,
) -> WeightMap:
    """base + lam * sum_i w_i * per_expert(delta_i) tensor by tensor."""

    def one(name: str) -> np.ndarray:
        b = base[name].values
        if not len(tv):
            return b
        rows = np.stack(
            [w * per_expert(name, i, d[name]).reshape(-1) for i, (w, d) in enumerate(zip(weights, tv.deltas))]
        )
        update = (lam * _sorted_sum(rows)).reshape(b.shape)
        return _apply_update(b, update)

    return _rebuild(base, _map_tensors(one, list(base), threads))


def task_arithmetic_merge(
    base: WeightMap,
    tv: TaskVectorSet,
    weights: Sequence[float],
    lam: float = 1.0,
    *,
    threads: int | None = 1,
) -> WeightMap:
    _check_weight_count(tv, weights)
    _check_weights(weights, lam)
    return _combine(base, tv, lambda name, i, d: d, weights, lam, threads)


def _trim(delta: np.ndarray, k: int) -> np.ndarray:
    flat = delta.reshape(-1)
    # stable sort on -|x|: magnitude ties resolved by lower flat index first
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out


def ties_merge(base: WeightMap, tv: TaskVectorSet, params: TiesParams, *, threads: int | None = 1) -> WeightMap:
    """Trim each delta by magnitude, elect a sign per entry, average agreeing entries."""
    _check_weight_count(tv, params.weights)

    def one(name: str) -> np.ndarray:
        b = base[name].values
        n = b.size
        if not len(tv) or n == 0:
            return b
        k = trim_count(params.density, n)
        weighted = np.stack([w * _trim(d[name], k) for w, d in zip(params.weights, tv.deltas)])
        elected = np.sign(_sorted_sum(weighted))
        agree = (np.sign(weighted) == elected) & (elected != 0)
        total = _sorted_sum(np.where(agree, weighted, 0.0))
        count = agree.sum(axis=0)
        merged = np.divide(total, count, out=np.zeros(n), where=count > 0)
        return _apply_update(b, (params.lam * merged).reshape(b.shape))

    return _rebuild(base, _map_tensors(one, list(base), threads))


def _mask_band(delta: np.ndarray, n_top: int, n_bottom: int) -> np.ndarray:
    flat = delta.reshape(-1)
    n = flat.size
    # ascending magnitude; ties resolved by lower flat index first
    order = np.argsort(np.abs(flat), kind="stable")
    out = flat.copy()
    out[order[:n_bottom]] = 0.0
    if n_top:
        out[order[n - n_top :]] = 0.0
    return out


def breadcrumbs_merge(
    base: WeightMap, tv: TaskVectorSet, params: BreadcrumbsParams, *, threads: int | None = 1
) -> WeightMap:
    """Drop the largest and smallest magnitude fractions of each delta, then sum."""
    _check_weight_count(tv, params.weights)

    def mask(name: str, i: int, delta: np.ndarray) -> np.ndarray:
        n_top, n_bottom = drop_counts(params.beta_top, params.gamma_bottom, delta.size)
        return _mask_band(delta, n_top, n_bottom)

    return _combine(base, tv, mask, params.weights, params.lam, threads)


def _dare_key(seed: int, expert: str, tensor: str) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(seed.to_bytes(8, "little"))
    h.update(expert.encode("utf-8") + b"\0" + tensor.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def dare_keep_mask(seed: int, expert: str, tensor: str, n: int, drop_p: float) -> np.ndarray:
    """Keep mask for one tensor; element i depends only on (seed, expert, tensor, i)."""
    gen = np.random.Generator(np.random.Philox(key=_dare_key(seed, expert, tensor)))
    return gen.random(n) >= drop_p


def dare_preprocess(tv: TaskVectorSet, params: DareParams, *, threads: int | None = 1) -> TaskVectorSet:
    """Randomly drop delta entries with probability ``drop_p``; rescale survivors."""
    if params.drop_p == 0.0:
        return tv
    scale = 1.0 / (1.0 - params.drop_p)
    deltas = []
    for expert, delta in zip(tv.expert_names, tv.deltas):

        def one(name: str, expert=expert, delta=delta) -> np.ndarray:
            d = delta[name]
            keep = dare_keep_mask(params.seed, expert, name, d.size, params.drop_p).reshape(d.shape)
            return np.where(keep, d * scale, 0.0)

        deltas.append(_map_tensors(one, list(delta), threads))
    return TaskVectorSet(tv.base_name, tv.expert_names, tuple(deltas))


def merge_model(recipe, loader: Callable[[str], WeightMap] | None = None, *, threads: int | None = 1) -> WeightMap:
    """Run a validated :class:`~mergeforge.recipe.MergeRecipe`.

    ``loader`` maps a checkpoint path to a WeightMap (default: load from disk).
    The output carries exactly the base's tensor names.
    """
    if loader is None:
        from .tensor_store import load_weights as loader
    base = loader(recipe.base)
    experts = [loader(e.path) for e in recipe.experts]
    where = recipe.source or "<recipe>"
    try:
        if recipe.method == "slerp":
            return slerp_merge(
                base, experts[0], recipe.slerp_params(), allow_missing=recipe.allow_missing, threads=threads
            )
        tv = task_vectors(
            base,
            experts,
            names=[os.path.basename(e.path) for e in recipe.experts],
            base_name=recipe.base,
            allow_missing=recipe.allow_missing,
        )
        if recipe.dare is not None:
            tv = dare_preprocess(tv, recipe.dare, threads=threads)
        if recipe.method == "task_arithmetic":
            return task_arithmetic_merge(base, tv, recipe.weights, recipe.params.lam, threads=threads)
        if recipe.method == "ties":
            return ties_merge(base, tv, recipe.ties_params(), threads=threads)
        if recipe.method == "breadcrumbs":
            return breadcrumbs_merge(base, tv, recipe.breadcrumbs_params(), threads=threads)
    except MergeError as exc:
        raise MergeError(f"{where}: {exc}", tensor=exc.tensor) from None
    raise MergeError(f"{where}: unknown method {recipe.method!r}")
