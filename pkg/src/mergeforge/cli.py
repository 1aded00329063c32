"""``mergeforge`` command line: inspect, merge, evolve, stats, pack.

Machine-readable output goes to stdout, diagnostics to stderr. Exit status is
0 only when the command fully succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .evolve import EvaluatorSpec, resume_search, run_search
from .gainstats import ScoreTable, gain_report, load_clue_plus_fixture, load_score_table, render_report
from .merge_ops import DareParams, merge_model
from .packer import DEFAULT_CAPACITY, TokenSequence, best_fit_pack, iter_block_lines, pit_concat, read_sequences
from .recipe import load_recipe
from .tensor_store import WeightMap, load_weights, parse_header, store_weights

log = logging.getLogger("mergeforge")


class CommandError(Exception):
    pass


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- inspect -----------------------------------------------------------------------


def cmd_inspect(args) -> None:
    data = Path(args.path).read_bytes()
    n, metas, metadata = parse_header(data)
    metas = sorted(metas, key=lambda m: m.name)
    total_params = sum(m.numel for m in metas)
    total_bytes = sum(m.nbytes for m in metas)
    if args.json:
        doc = {
            "header_length": n,
            "metadata": metadata,
            "tensors": [{"name": m.name, **m.to_json()} for m in metas],
            "totals": {"tensors": len(metas), "parameters": total_params, "bytes": total_bytes},
        }
        _emit(json.dumps(doc, indent=2))
        return
    rows = [("name", "dtype", "shape", "bytes")]
    rows += [(m.name, m.dtype.value, "x".join(map(str, m.shape)) or "scalar", str(m.nbytes)) for m in metas]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        _emit("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    _emit(f"total: {len(metas)} tensors, {total_params} parameters, {total_bytes} bytes")


# -- merge -------------------------------------------------------------------------


def _apply_seed(recipe, seed):
    if seed is None:
        return recipe
    dare = DareParams(recipe.dare.drop_p, seed) if recipe.dare is not None else None
    return replace(recipe, seed=seed, dare=dare)


def cmd_merge(args) -> None:
    recipe = load_recipe(args.recipe)
    if args.allow_missing:
        recipe = replace(recipe, allow_missing=True)
    recipe = _apply_seed(recipe, args.seed)
    if args.dry_run:
        _, metas, _ = parse_header(Path(recipe.base).read_bytes())
        plan = {"seed": recipe.seed, "tensors": len(metas), **recipe.to_document()}
        _emit(json.dumps(plan, indent=2))
        return
    if not args.out:
        raise CommandError("--out is required unless --dry-run is given")
    merged = merge_model(recipe, threads=args.threads)
    metadata = dict(merged.metadata or {})
    metadata.update({"merge_method": recipe.method, "merge_seed": str(recipe.seed)})
    out = WeightMap({n: merged[n] for n in merged}, metadata)
    store_weights(out, args.out, recipe.output_dtype)
    log.info("wrote %d tensors to %s (seed %d)", len(out), args.out, recipe.seed)


# -- evolve ------------------------------------------------------------------------


def cmd_evolve(args) -> None:
    template = load_recipe(args.template)
    template = _apply_seed(template, args.seed if args.seed is not None else None)
    if args.evaluator:
        spec = EvaluatorSpec(
            "external_command",
            command_template=args.evaluator,
            timeout=args.timeout,
            parallel_evals=args.parallel,
            keep_candidates=args.keep_candidates,
        )
    else:
        spec = EvaluatorSpec(
            "synthetic_target", target_path=args.synthetic_target, timeout=args.timeout, parallel_evals=args.parallel
        )
    state = None
    if args.resume:
        if not args.state or not Path(args.state).exists():
            raise CommandError("--resume needs an existing --state file")
        state = resume_search(args.state)
    seed = args.seed if args.seed is not None else 0
    genes = args.genes.split(",") if args.genes else None
    result = run_search(
        template,
        spec,
        budget=args.budget,
        population_size=args.population,
        seed=seed,
        state=state,
        state_path=args.state,
        search_genes=genes,
        threads=args.threads,
    )
    doc = {
        "seed": result.state.seed,
        "best_fitness": result.best_fitness,
        "evaluations": result.state.evaluations_used,
        "generations": result.state.generation,
        "best_recipe": result.best_recipe.to_document(),
    }
    if args.out:
        Path(args.out).write_text(result.best_recipe.to_json() + "\n", encoding="utf-8")
    if args.history:
        Path(args.history).write_text(json.dumps(result.state.to_json()["history"]) + "\n", encoding="utf-8")
    _emit(json.dumps(doc, indent=2))


# -- stats -------------------------------------------------------------------------


def cmd_stats(args) -> None:
    table = load_score_table(args.scores) if args.scores else ScoreTable.from_document(load_clue_plus_fixture())
    if args.candidates:
        candidates = [c.strip() for c in args.candidates.split(",") if c.strip()]
    else:
        candidates = [m for m in table.models if m != args.baseline]
    reports = [gain_report(table, args.baseline, c, ddof=args.ddof) for c in candidates]
    _emit(render_report(reports, args.format))


# -- pack --------------------------------------------------------------------------


def _pit_groups(path, eos: int, phase: str) -> list[TokenSequence]:
    """Group records by their "group" field and concatenate each group."""
    groups: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            seq = TokenSequence(str(obj["id"]), obj["tokens"])
            g = groups.setdefault(str(obj.get("group", obj["id"])), {"tasks": [], "document": None})
            role = obj.get("role", "task")
            if role == "document":
                if g["document"] is not None:
                    raise CommandError(f"{path}:{lineno}: second document in group")
                g["document"] = seq
            elif role == "task":
                g["tasks"].append(seq)
            else:
                raise CommandError(f"{path}:{lineno}: unknown role {role!r}")
    return [pit_concat(g["tasks"], g["document"], eos, phase) for g in groups.values()]


def cmd_pack(args) -> None:
    if args.pit:
        if args.eos is None:
            raise CommandError("--pit requires --eos")
        sequences = _pit_groups(args.input, args.eos, args.phase)
    else:
        sequences = read_sequences(args.input)
    blocks = best_fit_pack(sequences, args.capacity)
    lines = iter_block_lines(blocks)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    else:
        for line in lines:
            _emit(line)
    fill = sum(b.fill for b in blocks)
    log.info("packed %d sequences into %d blocks (%.1f%% full)", len(sequences), len(blocks),
             100.0 * fill / max(1, len(blocks) * args.capacity))


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergeforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="list the tensors of a checkpoint")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("merge", help="run a merge recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evolve", help="evolutionary search over merge recipes")
    p.add_argument("--template", required=True)
    ev = p.add_mutually_exclusive_group(required=True)
    ev.add_argument("--evaluator", help='command with a "{model}" placeholder')
    ev.add_argument("--synthetic-target", help="checkpoint to approach (fitness = -L2 distance)")
    p.add_argument("--budget", type=int, default=500)
    p.add_argument("--population", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--state", help="search state file, rewritten every generation")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--keep-candidates", action="store_true")
    p.add_argument("--parallel", type=int, default=1, help="concurrent evaluator processes")
    p.add_argument("--timeout", type=float, default=3600.0)
    p.add_argument("--genes", help="comma-separated genes to search (default: all)")
    p.add_argument("--out", help="write the best recipe here")
    p.add_argument("--history", help="write the evaluation history here")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("stats", help="AVG / #DG / CV of gains against a baseline")
    p.add_argument("--scores", help="score document (default: bundled CLUE+ fixture)")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidates", help="comma-separated models (default: all others)")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--ddof", type=int, choices=(0, 1), default=1, help="0: population std, 1: sample std")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pack", help="best-fit packing of token sequences")
    p.add_argument("--input", required=True)
    p.add_argument("--capacity", type=int, default=DEFAULT_CAPACITY)
    p.add_argument("--out")
    p.add_argument("--pit", action="store_true", help="concatenate task items per group first")
    p.add_argument("--eos", type=int)
    p.add_argument("--phase", choices=("task_only", "task_plus_document"), default="task_only")
    p.set_defaults(func=cmd_pack)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CommandError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"mergeforge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
