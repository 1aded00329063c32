"""Average score, datasets with gains, and CV of gains on the bundled CLUE+ scores.

Run: python notebooks/04_gain_statistics.py
"""

from __future__ import annotations

from mergeforge.gainstats import (
    JudgeCounts,
    ScoreTable,
    aggregate_judge_scores,
    gain_report,
    load_clue_plus_fixture,
    relative_improvement,
    render_report,
)

doc = load_clue_plus_fixture()
table = ScoreTable.from_document(doc)
baseline = "Phi-3.5-mini-instruct"

# %% Every model with per-dataset scores that is compared against this baseline
candidates = [r["candidate"] for r in doc["reported"] if r["baseline"] == baseline and r["candidate"] in table]
print(render_report([gain_report(table, baseline, m) for m in candidates]))

# %% Recomputed values next to the published summary rows
print(f"{'model':18s} {'pub CV':>7s} {'sample':>7s} {'population':>11s}")
for row in doc["reported"]:
    if row["candidate"] not in table:
        print(f"{row['candidate']:18s} {row['cv_delta']:7.1f}    (no per-dataset scores)")
        continue
    s = gain_report(table, row["baseline"], row["candidate"], ddof=1).cv_delta
    p = gain_report(table, row["baseline"], row["candidate"], ddof=0).cv_delta
    print(f"{row['candidate']:18s} {row['cv_delta']:7.1f} {s:7.2f} {p:11.2f}")

# %% Relative improvements
for before, after, label in ((36.5, 43.4, "average"), (41.2, 61.6, "RRS QA"), (35.1, 56.7, "SDoH")):
    print(f"{label:8s} {before} -> {after}: {relative_improvement(before, after):.1f}%")

# %% Judge self-consistency: five samples, three scored 3 and two scored 4
print(aggregate_judge_scores(JudgeCounts(5, {"completeness": {3: 3, 4: 2}, "accuracy": {4: 5}})))
