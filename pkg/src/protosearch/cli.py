"""``protosearch`` command line."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import ablation_variants, kendall_tau, parse_groups, random_search_entries, sweep_hp, best_so_far
from .evaluation import (
    ENV_EVALUATOR_CMD,
    FIDELITIES,
    EvaluationCache,
    Evaluator,
    ExternalBinding,
    ReplayBinding,
    SurrogateBinding,
    evaluate,
)
from .evolution import EvaluatorFailure, SearchConfig, SearchError, run
from .runtime import lr_table, parse_schedule
from .space import (
    PRESETS,
    ProtocolCandidate,
    SearchSpace,
    SpaceError,
    candidate_from_json,
    canonical_encode,
    enumerate_space,
    load_space,
    space_from_json,
    token_of,
    validate,
)
from .trace import ReplayingEvaluator, TraceWriter, entry_to_json, read_trace

log = logging.getLogger("protosearch")

EXIT_OK, EXIT_USAGE, EXIT_EVALUATOR, EXIT_DATA = 0, 1, 2, 3

MANIFEST, TRACE, REPORT, CURVE = "manifest.json", "trace.jsonl", "report.json", "curve.csv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# evaluator resolution


def _add_evaluator_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--evaluator", metavar="CMD", help=f"trainer command (default: ${ENV_EVALUATOR_CMD})")
    g.add_argument("--surrogate", metavar="SEED", type=int, help="built-in hash surrogate with this seed")
    g.add_argument("--replay", metavar="FILE", help="replay table CSV (key,fidelity,fitness)")
    p.add_argument("--fidelity", choices=sorted(FIDELITIES), default="proxy")
    p.add_argument("--timeout", type=float, default=None, help="seconds per external evaluation")
    p.add_argument("--jobs", type=int, default=1, help="max concurrent evaluations")
    p.add_argument("--space", metavar="FILE", help="search-space override JSON")


def _evaluator_spec(args) -> dict:
    if args.surrogate is not None:
        return {"kind": "surrogate", "seed": args.surrogate}
    if args.replay is not None:
        return {"kind": "replay", "table": str(Path(args.replay).resolve())}
    command = args.evaluator or os.environ.get(ENV_EVALUATOR_CMD)
    if not command:
        raise UsageError(
            f"no evaluator: pass --evaluator, --surrogate or --replay, or set {ENV_EVALUATOR_CMD}"
        )
    return {"kind": "external", "command": command, "timeout": args.timeout}


def _binding(spec: dict, jobs: int):
    kind = spec["kind"]
    if kind == "surrogate":
        return SurrogateBinding(spec["seed"])
    if kind == "replay":
        try:
            return ReplayBinding(spec["table"])
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    if kind == "external":
        return ExternalBinding(spec["command"], spec.get("timeout"), max_processes=jobs)
    raise DataError(f"unknown evaluator kind {kind!r}")


def _space(args) -> SearchSpace:
    try:
        return load_space(getattr(args, "space", None))
    except (OSError, SpaceError) as exc:
        raise DataError(f"space: {exc}") from exc


def _make_evaluator(args, space: SearchSpace, seed: int) -> tuple[Evaluator, dict]:
    spec = _evaluator_spec(args)
    ev = Evaluator(_binding(spec, args.jobs), FIDELITIES[args.fidelity], seed,
                   EvaluationCache(), args.jobs, space)
    return ev, spec


def _load_candidate(ref: str, space: SearchSpace) -> ProtocolCandidate:
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in PRESETS:
            raise UsageError(f"unknown preset {ref!r}; choose from {sorted(PRESETS)}")
        cand = PRESETS[name]
    else:
        try:
            with open(ref) as f:
                doc = json.load(f)
            if isinstance(doc, dict) and "candidate" in doc:
                doc = doc["candidate"]
            cand = candidate_from_json(doc, space)
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"{ref}: {exc}") from exc
    problems = validate(cand, space)
    if problems:
        raise DataError(f"{ref}: invalid candidate: {'; '.join(problems)}")
    return cand


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_space_enumerate(args) -> int:
    space = _space(args)
    cands = enumerate_space(space)
    if args.count_only:
        print(len(cands))
    else:
        out = sys.stdout
        for c in cands:
            out.write(canonical_encode(c) + "\n")
    return EXIT_OK


def _config_from_args(args) -> SearchConfig:
    try:
        return SearchConfig(args.m_init, args.m, args.t, args.k, args.p, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _search(out: Path, manifest: dict, space: SearchSpace, config: SearchConfig,
            evaluator: Evaluator) -> int:
    trace_path = out / TRACE
    previous = read_trace(trace_path, space) if manifest.get("resumed") else []
    if len(previous) > config.budget:
        raise DataError(f"{trace_path} has {len(previous)} entries, more than the budget {config.budget}")
    writer = TraceWriter(trace_path, existing=len(previous))
    scorer = ReplayingEvaluator(evaluator, previous) if previous else evaluator
    try:
        best, state = run(space, config, scorer, on_step=writer)
    except EvaluatorFailure as exc:
        log.error("%s (candidate %s)", exc, exc.candidate)
        return EXIT_EVALUATOR
    except SearchError as exc:
        raise DataError(str(exc)) from exc
    curve = state.best_curve()
    (out / CURVE).write_text(
        "eval_index,best_fitness\n"
        + "".join(f"{i},{'' if v is None else repr(v)}\n" for i, v in enumerate(curve, start=1))
    )
    report = {
        "best": entry_to_json(best),
        "best_key": canonical_encode(best.candidate),
        "population": len(state.population),
        "evaluations_spent": state.evaluations_spent,
        "cache_hits": state.cache_hits,
        "generations": state.generation,
        "degraded_steps": state.degraded_steps,
        "failed": sum(1 for e in state.population if not e.valid),
    }
    _write_json(out / REPORT, report)
    manifest["end"] = _now()
    _write_json(out / MANIFEST, manifest)
    print(json.dumps({"best_key": report["best_key"], "fitness": best.fitness}))
    return EXIT_OK


def cmd_search_run(args) -> int:
    config = _config_from_args(args)
    space = _space(args)
    out = _out_dir(args)
    evaluator, spec = _make_evaluator(args, space, args.seed)
    manifest = {
        "command": sys.argv[:],
        "version": __version__,
        "seed": args.seed,
        "config": config.to_json(),
        "space": space.to_json(),
        "space_file": args.space,
        "evaluator": spec,
        "fidelity": args.fidelity,
        "jobs": args.jobs,
        "start": _now(),
        "end": None,
        "artifacts": {"manifest": MANIFEST, "trace": TRACE, "report": REPORT, "curve": CURVE},
    }
    # A fresh run never inherits a stale trace.
    (out / TRACE).unlink(missing_ok=True)
    _write_json(out / MANIFEST, manifest)
    if args.manifest_only:
        return EXIT_OK
    return _search(out, manifest, space, config, evaluator)


def cmd_search_resume(args) -> int:
    out = Path(args.out)
    try:
        manifest = json.loads((out / MANIFEST).read_text())
        space = space_from_json(manifest["space"])
        config = SearchConfig(**manifest["config"])
        spec = manifest["evaluator"]
        fidelity = FIDELITIES[manifest["fidelity"]]
        jobs = args.jobs or manifest.get("jobs", 1)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot resume from {out}: {exc}") from exc
    evaluator = Evaluator(_binding(spec, jobs), fidelity, config.seed, EvaluationCache(), jobs, space)
    manifest["resumed"] = True
    manifest.setdefault("resumes", []).append({"command": sys.argv[:], "start": _now()})
    _write_json(out / MANIFEST, manifest)
    return _search(out, manifest, space, config, evaluator)


def cmd_baseline_random(args) -> int:
    space = _space(args)
    out = _out_dir(args)
    evaluator, spec = _make_evaluator(args, space, args.seed)
    manifest = {
        "command": sys.argv[:],
        "version": __version__,
        "seed": args.seed,
        "n": args.n,
        "space": space.to_json(),
        "evaluator": spec,
        "fidelity": args.fidelity,
        "start": _now(),
        "end": None,
        "artifacts": {"manifest": MANIFEST, "trace": TRACE, "report": REPORT, "curve": CURVE},
    }
    _write_json(out / MANIFEST, manifest)
    entries = random_search_entries(space, args.n, evaluator, args.seed)
    with open(out / TRACE, "w") as f:
        for e in entries:
            f.write(json.dumps(entry_to_json(e)) + "\n")
    curve = best_so_far(e.fitness for e in entries)
    (out / CURVE).write_text(
        "eval_index,best_fitness\n"
        + "".join(f"{i},{'' if v is None else repr(v)}\n" for i, v in enumerate(curve, start=1))
    )
    valid = [e for e in entries if e.valid]
    report = {
        "n": args.n,
        "evaluations_spent": sum(not e.cached for e in entries),
        "cache_hits": sum(e.cached for e in entries),
        "failed": len(entries) - len(valid),
    }
    if valid:
        best = max(valid, key=lambda e: e.fitness)  # max() keeps the first of equal maxima
        report["best"] = entry_to_json(best)
        report["best_key"] = canonical_encode(best.candidate)
    _write_json(out / REPORT, report)
    manifest["end"] = _now()
    _write_json(out / MANIFEST, manifest)
    if not valid:
        log.error("all %d random-search evaluations failed", args.n)
        return EXIT_EVALUATOR
    print(json.dumps({"best_key": report["best_key"], "fitness": report["best"]["fitness"]}))
    return EXIT_OK


def cmd_eval_one(args) -> int:
    space = _space(args)
    cand = _load_candidate(args.candidate, space)
    evaluator, _ = _make_evaluator(args, space, args.seed)
    result = evaluate(evaluator.binding, evaluator.request(cand), evaluator.cache)
    doc = {
        "key": canonical_encode(cand),
        "status": result.status,
        "fitness": result.fitness,
        "eval_seconds": result.eval_seconds,
    }
    if result.message:
        doc["message"] = result.message
    print(json.dumps(doc))
    return EXIT_OK if result.ok else EXIT_EVALUATOR


def _read_scores(path: str) -> tuple[list[str] | None, list[list[float]]]:
    """Rows of numbers from a CSV/plain file; keyed replay tables return their keys."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(str(exc)) from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(x.strip() for x in r)]
    if not rows:
        raise DataError(f"{path}: no data")
    header = [h.strip() for h in rows[0]]
    if header == ["key", "fidelity", "fitness"]:
        keys = [r[0].strip() for r in rows[1:]]
        return keys, [[float(r[2])] for r in rows[1:]]
    try:
        [float(x) for x in rows[0]]
    except ValueError:
        rows = rows[1:]  # header line
    try:
        return None, [[float(x) for x in r] for r in rows]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_analyze_tau(args) -> int:
    keys_a, rows_a = _read_scores(args.a)
    if args.b is None:
        if any(len(r) < 2 for r in rows_a):
            raise DataError(f"{args.a}: need two columns when --b is omitted")
        a, b = [r[0] for r in rows_a], [r[1] for r in rows_a]
    else:
        keys_b, rows_b = _read_scores(args.b)
        if keys_a is not None and keys_b is not None:
            lookup = {k: r[0] for k, r in zip(keys_b, rows_b)}
            shared = [(r[0], lookup[k]) for k, r in zip(keys_a, rows_a) if k in lookup]
            a, b = [x for x, _ in shared], [y for _, y in shared]
        else:
            a, b = [r[0] for r in rows_a], [r[0] for r in rows_b]
    try:
        report = kendall_tau(a, b, variant=args.variant)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    doc = report.to_json()
    if args.out:
        _write_json(_out_dir(args) / "tau.json", doc)
    print(json.dumps(doc))
    return EXIT_OK


def cmd_analyze_sweep(args) -> int:
    space = _space(args)
    base = _load_candidate(args.base, space)
    evaluator, _ = _make_evaluator(args, space, args.seed)
    try:
        rows = sweep_hp(base, args.hp, space, evaluator)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    text = "choice,fitness\n" + "".join(
        f"{token_of(v)},{'' if f is None else repr(f)}\n" for v, f in rows
    )
    if args.out:
        (_out_dir(args) / f"sweep_{args.hp}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(f is not None for _, f in rows) else EXIT_EVALUATOR


def cmd_analyze_ablate(args) -> int:
    space = _space(args)
    base = _load_candidate(args.base, space)
    target = _load_candidate(args.target, space)
    groups = parse_groups(args.groups)
    try:
        variants = ablation_variants(base, target, groups, space)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    scored = None
    if args.evaluator or args.surrogate is not None or args.replay:
        evaluator, _ = _make_evaluator(args, space, args.seed)
        scored = evaluator.score_batch(variants)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "key", "fitness"])
    for i, (g, v) in enumerate(zip(groups, variants)):
        fit = "" if scored is None or scored[i][0].fitness is None else repr(scored[i][0].fitness)
        w.writerow(["+".join(g) or "-", canonical_encode(v), fit])
    if args.out:
        (_out_dir(args) / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_lr_table(args) -> int:
    try:
        schedule = parse_schedule(args.schedule, args.lr, args.total)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sys.stdout.write(lr_table(schedule))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protosearch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"protosearch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    sp = sub.add_parser("space", help="inspect the search space")
    sp_sub = sp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = sp_sub.add_parser("enumerate", help="list every candidate's canonical encoding")
    p.add_argument("--space", metavar="FILE")
    p.add_argument("--count-only", action="store_true")
    p.set_defaults(func=cmd_space_enumerate)

    se = sub.add_parser("search", help="evolutionary protocol search")
    se_sub = se.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = se_sub.add_parser("run")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--m-init", type=int, default=16)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--t", type=int, default=10)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--p", type=float, default=0.2, help="per-gene mutation probability")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest-only", action="store_true", help="write the run manifest and stop")
    _add_evaluator_flags(p)
    p.set_defaults(func=cmd_search_run)
    p = se_sub.add_parser("resume")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_search_resume)

    bl = sub.add_parser("baseline", help="baselines at a fixed budget")
    bl_sub = bl.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = bl_sub.add_parser("random")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_evaluator_flags(p)
    p.set_defaults(func=cmd_baseline_random)

    ev = sub.add_parser("eval", help="score single candidates")
    ev_sub = ev.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = ev_sub.add_parser("one")
    p.add_argument("--candidate", required=True, help="candidate JSON file or builtin:baseline|searched")
    p.add_argument("--seed", type=int, default=0)
    _add_evaluator_flags(p)
    p.set_defaults(func=cmd_eval_one)

    an = sub.add_parser("analyze", help="rank correlation, sweeps, ablations")
    an_sub = an.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = an_sub.add_parser("tau")
    p.add_argument("--a", required=True, help="scores file (or a two-column file when --b is omitted)")
    p.add_argument("--b")
    p.add_argument("--variant", choices=["a", "b"], default="b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_tau)
    p = an_sub.add_parser("sweep")
    p.add_argument("--hp", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_evaluator_flags(p)
    p.set_defaults(func=cmd_analyze_sweep)
    p = an_sub.add_parser("ablate")
    p.add_argument("--base", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--groups", required=True, help='"standard" or e.g. "alpha_real;optimizer+learning_rate;-"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_evaluator_flags(p)
    p.set_defaults(func=cmd_analyze_ablate)

    p = sub.add_parser("lr-table", help="CSV of the learning rate at every iteration")
    p.add_argument("--schedule", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--total", type=int, required=True)
    p.set_defaults(func=cmd_lr_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"protosearch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"protosearch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
