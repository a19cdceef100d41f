"""Append-only JSONL search trace, doubling as the resume checkpoint."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

from .evaluation import ERROR, OK, EvaluationResult, Evaluator, cache_key
from .evolution import ScoredCandidate, SearchConfig, SearchError, SearchState
from .space import (
    ProtocolCandidate,
    SearchSpace,
    candidate_from_json,
    candidate_to_json,
    canonical_encode,
)


def entry_to_json(entry: ScoredCandidate) -> dict:
    doc = {
        "generation": entry.generation,
        "origin": entry.origin,
        "candidate": candidate_to_json(entry.candidate),
        "fitness": entry.fitness,
        "eval_seconds": entry.eval_seconds,
        "cached": entry.cached,
        "status": entry.status,
    }
    if entry.message is not None:
        doc["message"] = entry.message
    return doc


def entry_from_json(doc: dict, space: SearchSpace) -> ScoredCandidate:
    return ScoredCandidate(
        candidate_from_json(doc["candidate"], space),
        None if doc["fitness"] is None else float(doc["fitness"]),
        doc["origin"],
        int(doc["generation"]),
        float(doc.get("eval_seconds", 0.0)),
        bool(doc.get("cached", False)),
        doc.get("status", OK if doc["fitness"] is not None else ERROR),
        doc.get("message"),
    )


def read_trace(path: str | Path, space: SearchSpace) -> list[ScoredCandidate]:
    """Parse a trace; a truncated final line (interrupted write) is dropped."""
    path = Path(path)
    if not path.exists():
        return []
    entries = []
    lines = path.read_text().split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise SearchError(f"{path}:{i + 1}: corrupt trace line") from None
        entries.append(entry_from_json(doc, space))
    return entries


class TraceWriter:
    """Appends population entries from index ``len(existing)`` onward, fsync'd per generation."""

    def __init__(self, path: str | Path, existing: int = 0):
        self.path = Path(path)
        self.written = existing
        self._truncate_to(existing)

    def _truncate_to(self, n: int) -> None:
        if not self.path.exists():
            self.path.touch()
            return
        keep = []
        with open(self.path) as f:
            for line in f:
                if len(keep) == n:
                    break
                if line.endswith("\n") and line.strip():
                    keep.append(line)
        self.path.write_text("".join(keep))

    def __call__(self, state: SearchState, start: int = 0) -> None:
        new = state.population[self.written:]
        if not new:
            return
        with open(self.path, "a") as f:
            for e in new:
                f.write(json.dumps(entry_to_json(e)) + "\n")
            f.flush()
            os.fsync(f.fileno())
        self.written = len(state.population)


def state_from_trace(entries: Sequence[ScoredCandidate], config: SearchConfig) -> SearchState:
    state = SearchState(config)
    for e in entries:
        state.append(e)
        state.generation = max(state.generation, e.generation)
    return state


class ReplayingEvaluator:
    """Serves the first ``len(entries)`` scores from a trace, then delegates.

    Replayed results are loaded into the inner cache so later duplicates
    still count as cache hits.
    """

    def __init__(self, inner: Evaluator, entries: Sequence[ScoredCandidate]):
        self.inner = inner
        self.entries = list(entries)
        self.position = 0

    def score_batch(self, candidates: Sequence[ProtocolCandidate]):
        out = []
        n_replay = max(0, min(len(candidates), len(self.entries) - self.position))
        for cand in candidates[:n_replay]:
            e = self.entries[self.position]
            if canonical_encode(e.candidate) != canonical_encode(cand):
                raise SearchError(
                    f"trace entry {self.position} is {canonical_encode(e.candidate)}, "
                    f"but the seeded run produced {canonical_encode(cand)}; "
                    "was the trace written with a different seed or config?"
                )
            result = EvaluationResult(e.status, e.fitness, e.message, e.eval_seconds)
            if not e.cached:
                self.inner.cache.put(cache_key(self.inner.request(cand)), result)
            out.append((result, e.cached))
            self.position += 1
        rest = list(candidates[n_replay:])
        if rest:
            out.extend(self.inner.score_batch(rest))
            self.position += len(rest)
        return out
