"""Benchmark gain statistics: AVG, #DG, CV of deltas, relative gains, judge scores."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ScoreTable",
    "GainReport",
    "gain_report",
    "relative_improvement",
    "JudgeCounts",
    "aggregate_judge_scores",
    "render_report",
    "load_score_table",
    "load_clue_plus_fixture",
]

CV_UNDEFINED_TOL = 1e-9
UNDEFINED = "—"


class ScoreTable:
    """model -> dataset -> score (percent)."""

    def __init__(self, scores: Mapping[str, Mapping[str, float]]):
        self.scores = {m: {d: float(v) for d, v in row.items()} for m, row in scores.items()}
        for model, row in self.scores.items():
            if not row:
                raise ValueError(f"model {model!r} has no dataset scores")

    def __contains__(self, model: str) -> bool:
        return model in self.scores

    def __getitem__(self, model: str) -> dict[str, float]:
        return self.scores[model]

    @property
    def models(self) -> list[str]:
        return list(self.scores)

    @classmethod
    def from_document(cls, doc: Mapping) -> "ScoreTable":
        models = doc.get("models") if isinstance(doc, Mapping) else None
        if not isinstance(models, Mapping):
            raise ValueError('score document must contain a "models" object')
        for model, row in models.items():
            if not isinstance(row, Mapping) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in row.values()
            ):
                raise ValueError(f"scores of {model!r} must map dataset names to numbers")
        return cls(models)


@dataclass(frozen=True)
class GainReport:
    baseline: str
    candidate: str
    deltas: dict[str, float]
    mean_delta: float
    avg_score: float
    num_dataset_gains: int
    cv_delta: float | None

    @property
    def cv_defined(self) -> bool:
        return self.cv_delta is not None

    def to_json(self) -> dict:
        return {
            "baseline": self.baseline,
            "candidate": self.candidate,
            "avg": self.avg_score,
            "num_dataset_gains": self.num_dataset_gains,
            "cv_delta": self.cv_delta,
            "mean_delta": self.mean_delta,
            "deltas": self.deltas,
        }


def gain_report(table: ScoreTable, baseline: str, candidate: str, *, ddof: int = 1) -> GainReport:
    """Compare ``candidate`` against ``baseline`` dataset by dataset.

    ``ddof`` selects the standard deviation of the deltas: 1 (sample, the
    default) reproduces the published CV values; 0 gives the population form.
    CV is ``None`` when the mean delta is within 1e-9 of zero.
    """
    for model in (baseline, candidate):
        if model not in table:
            raise KeyError(f"model {model!r} not in score table")
    base, cand = table[baseline], table[candidate]
    if set(base) != set(cand):
        only_b = sorted(set(base) - set(cand))
        only_c = sorted(set(cand) - set(base))
        raise ValueError(
            f"dataset sets differ: only in {baseline!r}: {only_b}; only in {candidate!r}: {only_c}"
        )
    names = list(base)
    deltas = np.array([cand[d] - base[d] for d in names], dtype=np.float64)
    mean = float(deltas.mean())
    if abs(mean) < CV_UNDEFINED_TOL or len(deltas) <= ddof:
        cv = None
    else:
        cv = float(deltas.std(ddof=ddof)) / abs(mean)
    return GainReport(
        baseline=baseline,
        candidate=candidate,
        deltas=dict(zip(names, deltas.tolist())),
        mean_delta=mean,
        avg_score=float(np.mean([cand[d] for d in names])),
        num_dataset_gains=int((deltas > 0).sum()),
        cv_delta=cv,
    )


def relative_improvement(baseline: float, candidate: float) -> float:
    """Percent change from ``baseline`` to ``candidate``."""
    if baseline == 0:
        raise ZeroDivisionError("relative improvement undefined for a zero baseline")
    return 100.0 * (candidate - baseline) / baseline


JUDGE_SCALE = (1, 2, 3, 4)


@dataclass(frozen=True)
class JudgeCounts:
    """``counts[criterion][score]``: how many of the ``m`` judge samples gave ``score``."""

    m: int
    counts: Mapping[str, Mapping[int, int]]

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"sample count must be >= 1, got {self.m}")
        for criterion, per_score in self.counts.items():
            if any(s not in JUDGE_SCALE for s in per_score):
                raise ValueError(f"{criterion}: scores must be in {JUDGE_SCALE}, got {sorted(per_score)}")
            if any(c < 0 for c in per_score.values()):
                raise ValueError(f"{criterion}: negative count")
            total = sum(per_score.values())
            if total != self.m:
                raise ValueError(f"{criterion}: counts sum to {total}, expected {self.m}")


def aggregate_judge_scores(counts: JudgeCounts) -> dict[str, float]:
    """Count-weighted mean judge score per criterion, in [1, 4]."""
    return {
        criterion: sum(s * c for s, c in per_score.items()) / counts.m
        for criterion, per_score in counts.counts.items()
    }


# -- rendering -----------------------------------------------------------------

_COLUMNS = ("model", "AVG", "#DG", "CV Δ")


def _row(r: GainReport) -> list[str]:
    sign = "+" if r.mean_delta > 0 else ("-" if r.mean_delta < 0 else "")
    avg = f"{r.avg_score:.1f}"
    if sign:
        avg += f" ({sign}{abs(r.mean_delta):.1f})"
    cv = UNDEFINED if r.cv_delta is None else f"{r.cv_delta:.1f}"
    return [r.candidate, avg, str(r.num_dataset_gains), cv]


def render_report(reports: Sequence[GainReport], fmt: str = "table") -> str:
    """Render reports as ``table`` text, ``csv`` or ``json``; one decimal place."""
    if fmt == "json":
        return json.dumps([r.to_json() for r in reports], indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "baseline", "avg", "mean_delta", "num_dataset_gains", "cv_delta"])
        for r in reports:
            writer.writerow([
                r.candidate,
                r.baseline,
                f"{r.avg_score:.1f}",
                f"{r.mean_delta:+.1f}",
                r.num_dataset_gains,
                "" if r.cv_delta is None else f"{r.cv_delta:.1f}",
            ])
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    rows = [list(_COLUMNS)]
    baselines = []
    for r in reports:
        if r.baseline not in baselines:
            baselines.append(r.baseline)
        rows.append(_row(r))
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = [f"baseline: {', '.join(baselines)}"]
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) if j == 0 else cell.rjust(w) for j, (cell, w) in enumerate(zip(row, widths))))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def load_score_table(path: str | os.PathLike) -> ScoreTable:
    return ScoreTable.from_document(json.loads(Path(path).read_text(encoding="utf-8")))


def load_clue_plus_fixture() -> dict:
    """The bundled CLUE+ score document (``models`` plus published ``reported`` rows)."""
    text = resources.files("mergeforge").joinpath("data/clue_plus_scores.json").read_text(encoding="utf-8")
    return json.loads(text)
