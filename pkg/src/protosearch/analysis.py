"""Validation toolkit: rank correlation, random-search baseline, sweeps and ablations."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .evaluation import Evaluator
from .evolution import INIT, ScoredCandidate, SearchConfig, SearchError, run, topk_indices
from .space import Conditional, ProtocolCandidate, SearchSpace, sample_uniform, token_of


@dataclass(frozen=True)
class RankCorrelationReport:
    tau: float
    n: int
    concordant: int
    discordant: int
    ties_a: int  # pairs tied in a only
    ties_b: int  # pairs tied in b only
    ties_both: int = 0
    variant: str = "b"

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "n": self.n,
            "variant": self.variant,
            "counts": {
                "concordant": self.concordant,
                "discordant": self.discordant,
                "ties_a": self.ties_a,
                "ties_b": self.ties_b,
                "ties_both": self.ties_both,
            },
        }


def _tied_pairs(sorted_values: Sequence) -> int:
    total, run_len = 0, 1
    for prev, cur in zip(sorted_values, sorted_values[1:]):
        if cur == prev:
            run_len += 1
        else:
            total += run_len * (run_len - 1) // 2
            run_len = 1
    return total + run_len * (run_len - 1) // 2


def _count_inversions(xs: list) -> int:
    """Number of pairs i < j with xs[i] > xs[j]; sorts ``xs`` in place."""
    n = len(xs)
    if n < 2:
        return 0
    mid = n // 2
    left, right = xs[:mid], xs[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    i = j = k = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            xs[k] = right[j]
            inv += len(left) - i
            j += 1
        else:
            xs[k] = left[i]
            i += 1
        k += 1
    xs[k:] = left[i:] + right[j:]
    return inv


def kendall_tau(scores_a: Sequence, scores_b: Sequence, variant: str = "b") -> RankCorrelationReport:
    """Kendall rank correlation in O(n log n).

    ``variant="b"`` corrects for ties: (C - D) / sqrt((C + D + Ta)(C + D + Tb)),
    where pairs tied in both inputs are left out of every count. ``"a"`` divides
    by the total number of pairs instead.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError(f"length mismatch: {len(scores_a)} vs {len(scores_b)}")
    n = len(scores_a)
    if n < 2:
        raise ValueError("need at least two observations")
    if variant not in ("a", "b"):
        raise ValueError(f"unknown variant {variant!r}")
    pairs = sorted(zip(scores_a, scores_b))
    n0 = n * (n - 1) // 2
    tied_a = _tied_pairs([a for a, _ in pairs])
    tied_ab = _tied_pairs(pairs)
    bs = [b for _, b in pairs]
    discordant = _count_inversions(bs)  # bs is now sorted
    tied_b = _tied_pairs(bs)
    ta, tb = tied_a - tied_ab, tied_b - tied_ab
    concordant = n0 - tied_a - tied_b + tied_ab - discordant
    c, d = concordant, discordant
    if variant == "b":
        denom = (c + d + ta) * (c + d + tb)
        if denom == 0:
            raise ValueError("tau-b undefined: an input is constant")
        tau = (c - d) / math.sqrt(denom)
    else:
        tau = (c - d) / n0
    return RankCorrelationReport(tau, n, c, d, ta, tb, tied_ab, variant)


@dataclass
class StrategyRun:
    name: str
    curve: list  # best-so-far fitness per evaluation; None before the first success
    total_evaluations: int
    wall_seconds: float


@dataclass
class ComparisonReport:
    runs: list[StrategyRun] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "eval_index", "best_fitness"])
        for r in self.runs:
            for i, v in enumerate(r.curve, start=1):
                w.writerow([r.name, i, "" if v is None else repr(v)])
        return buf.getvalue()


def best_so_far(values: Iterable[float | None]) -> list[float | None]:
    curve, best = [], None
    for v in values:
        if v is not None and (best is None or v > best):
            best = v
        curve.append(best)
    return curve


def random_search_entries(space: SearchSpace, n: int, evaluator: Evaluator,
                          seed: int) -> list[ScoredCandidate]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    cands = [sample_uniform(space, rng) for _ in range(n)]
    results = evaluator.score_batch(cands)
    return [ScoredCandidate.from_result(c, r, INIT, 0, hit) for c, (r, hit) in zip(cands, results)]


def random_search(space: SearchSpace, n: int, evaluator: Evaluator,
                  seed: int) -> tuple[ScoredCandidate, list[float | None]]:
    """Score ``n`` uniform samples; return the best and the best-so-far curve."""
    entries = random_search_entries(space, n, evaluator, seed)
    idx = topk_indices(entries, 1)
    if not idx:
        raise SearchError(f"all {n} random-search evaluations failed")
    return entries[idx[0]], best_so_far(e.fitness for e in entries)


def equal_budget_duel(space: SearchSpace, config: SearchConfig, evaluator: Evaluator,
                      random_evaluator: Evaluator) -> ComparisonReport:
    """Evolutionary search against random search with the same number of evaluations."""
    report = ComparisonReport()
    t0 = time.perf_counter()
    _, state = run(space, config, evaluator)
    report.runs.append(StrategyRun("evolution", state.best_curve(), len(state.population),
                                   time.perf_counter() - t0))
    t0 = time.perf_counter()
    _, curve = random_search(space, config.budget, random_evaluator, config.seed)
    report.runs.append(StrategyRun("random", curve, len(curve), time.perf_counter() - t0))
    return report


def _positional_lr(candidate_values: dict, space: SearchSpace,
                   source_of: Callable[[str], ProtocolCandidate]) -> None:
    """Move conditional values that fell outside their branch to the same slot in the new branch.

    Deterministic, so a sweep or ablation row is reproducible without an RNG.
    """
    for d in space.domains:
        if not isinstance(d, Conditional) or d.name not in candidate_values:
            continue
        branch = d.branch(candidate_values[d.condition])
        value = candidate_values[d.name]
        if any(value == c and type(value) is type(c) for c in branch):
            continue
        old_branch = d.branch(source_of(d.name)[d.condition])
        tokens = [token_of(c) for c in old_branch]
        pos = tokens.index(token_of(value)) if token_of(value) in tokens else 0
        candidate_values[d.name] = branch[min(pos, len(branch) - 1)]


def sweep_hp(base: ProtocolCandidate, hp_name: str, space: SearchSpace,
             evaluator: Evaluator) -> list[tuple[object, float | None]]:
    """Score ``base`` with one hyperparameter set to each of its domain values, in domain order."""
    if hp_name not in space:
        raise KeyError(f"unknown hyperparameter {hp_name!r}; known: {list(space.names)}")
    domain = space[hp_name]
    choices = domain.values(base.as_dict())
    cands = []
    for value in choices:
        values = base.as_dict()
        values[hp_name] = value
        _positional_lr(values, space, lambda _: base)
        cands.append(ProtocolCandidate([(n, values[n]) for n in base]))
    results = evaluator.score_batch(cands)
    return [(v, r.fitness) for v, (r, _) in zip(choices, results)]


# Standard ablation ladder: which searched settings are grafted onto the baseline.
STANDARD_GROUPS = {
    "base": (),
    "1": ("alpha_real",),
    "2": ("data_augmentation",),
    "3": ("alpha_real", "data_augmentation"),
    "4": ("optimizer", "learning_rate"),
    "5": ("lr_schedule",),
    "6": ("optimizer", "learning_rate", "lr_schedule"),
    "all": ("alpha_real", "data_augmentation", "optimizer", "learning_rate", "lr_schedule"),
}


def ablation_variants(base: ProtocolCandidate, target: ProtocolCandidate,
                      groups: Sequence[Iterable[str]],
                      space: SearchSpace | None = None) -> list[ProtocolCandidate]:
    """For each field group, ``base`` with exactly those fields taken from ``target``."""
    names = list(base)
    if list(target) != names:
        raise ValueError("base and target have different fields")
    out = []
    for group in groups:
        group = tuple(group)
        unknown = [g for g in group if g not in names]
        if unknown:
            raise KeyError(f"unknown fields {unknown}; known: {names}")
        values = base.as_dict()
        for g in group:
            values[g] = target[g]
        if space is not None:
            _positional_lr(values, space, lambda name: target if name in group else base)
        out.append(ProtocolCandidate([(n, values[n]) for n in names]))
    return out


def parse_groups(spec: str) -> list[tuple[str, ...]]:
    """``"standard"`` or groups separated by ``;`` with fields joined by ``+`` (``-`` is the empty group)."""
    if spec.strip() == "standard":
        return list(STANDARD_GROUPS.values())
    groups = []
    for part in spec.split(";"):
        part = part.strip()
        if part in ("", "-"):
            groups.append(())
        elif part in STANDARD_GROUPS:
            groups.append(STANDARD_GROUPS[part])
        else:
            groups.append(tuple(f.strip() for f in part.split("+") if f.strip()))
    return groups
