"""Scoring candidates: trainer subprocess, replay table, and a hash-based surrogate.

Every binding is a callable ``binding(request) -> EvaluationResult``. The
:class:`Evaluator` front end adds the per-run cache and concurrency limits.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shlex
import signal
import subprocess
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .space import (
    ProtocolCandidate,
    SearchSpace,
    candidate_from_json,
    candidate_to_json,
    canonical_encode,
    default_space,
    token_of,
)

logger = logging.getLogger(__name__)

ENV_EVALUATOR_CMD = "PROTOSEARCH_EVALUATOR_CMD"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

OK, ERROR, TIMEOUT = "ok", "error", "timeout"


@dataclass(frozen=True)
class FidelityDescriptor:
    total_iterations: int
    data_fraction: float
    batch_size: int
    proxy_model: str
    name: str = "custom"

    def __post_init__(self):
        if self.total_iterations <= 0 or self.batch_size <= 0:
            raise ValueError("total_iterations and batch_size must be positive")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")

    def to_json(self) -> dict:
        return {
            "total_iterations": self.total_iterations,
            "data_fraction": self.data_fraction,
            "batch_size": self.batch_size,
            "proxy_model": self.proxy_model,
        }


# Proxy task: 1/6 of the iterations on 20% of the training data with a small model.
PROXY = FidelityDescriptor(50_000, 0.2, 256, "crnn-proxy", name="proxy")
FULL = FidelityDescriptor(300_000, 1.0, 256, "target", name="full")
FIDELITIES = {"proxy": PROXY, "full": FULL}


@dataclass(frozen=True)
class EvaluationRequest:
    candidate: ProtocolCandidate
    fidelity: FidelityDescriptor
    seed: int

    def to_json(self) -> dict:
        return {
            "candidate": candidate_to_json(self.candidate),
            "fidelity": self.fidelity.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping, space: SearchSpace | None = None) -> "EvaluationRequest":
        fid = obj["fidelity"]
        fidelity = FidelityDescriptor(
            int(fid["total_iterations"]),
            float(fid["data_fraction"]),
            int(fid["batch_size"]),
            str(fid["proxy_model"]),
        )
        for preset in FIDELITIES.values():
            if preset.to_json() == fidelity.to_json():
                fidelity = preset
        return cls(candidate_from_json(obj["candidate"], space), fidelity, int(obj["seed"]))


@dataclass(frozen=True)
class EvaluationResult:
    status: str
    fitness: float | None = None
    message: str | None = None
    eval_seconds: float = 0.0

    def __post_init__(self):
        if self.status not in (OK, ERROR, TIMEOUT):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == OK:
            if self.fitness is None or not 0.0 <= self.fitness <= 1.0:
                raise ValueError(f"ok result needs fitness in [0, 1], got {self.fitness!r}")
        elif self.fitness is not None:
            raise ValueError("failed results carry no fitness")

    @property
    def ok(self) -> bool:
        return self.status == OK


def cache_key(request: EvaluationRequest) -> tuple[str, str, int]:
    return (canonical_encode(request.candidate), request.fidelity.name, request.seed)


class EvaluationCache:
    """Insert-once result store. Concurrent misses on one key share a single computation."""

    def __init__(self):
        self._lock = threading.Lock()
        self._done: dict[tuple, EvaluationResult] = {}
        self._pending: dict[tuple, Future] = {}

    def __len__(self) -> int:
        with self._lock:
            return len(self._done)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._done

    def get(self, key) -> EvaluationResult | None:
        with self._lock:
            return self._done.get(key)

    def put(self, key, result: EvaluationResult) -> EvaluationResult:
        """Store ``result`` unless the key is taken; return whichever is stored."""
        with self._lock:
            return self._done.setdefault(key, result)

    def get_or_compute(self, key, compute: Callable[[], EvaluationResult]) -> tuple[EvaluationResult, bool]:
        """Return ``(result, hit)``; ``compute`` runs at most once per key."""
        with self._lock:
            if key in self._done:
                return self._done[key], True
            fut = self._pending.get(key)
            owner = fut is None
            if owner:
                fut = self._pending[key] = Future()
        if not owner:
            return fut.result(), True
        try:
            result = compute()
        except BaseException as exc:
            with self._lock:
                del self._pending[key]
            fut.set_exception(exc)
            raise
        with self._lock:
            self._done.setdefault(key, result)
            del self._pending[key]
        fut.set_result(result)
        return result, False

    def items(self):
        with self._lock:
            return list(self._done.items())


def evaluate(binding: Callable[[EvaluationRequest], EvaluationResult],
             request: EvaluationRequest,
             cache: EvaluationCache) -> EvaluationResult:
    """Cached dispatch. Binding exceptions are stored as errors so they are not retried."""
    result, _ = evaluate_with_hit(binding, request, cache)
    return result


def evaluate_with_hit(binding, request, cache) -> tuple[EvaluationResult, bool]:
    def compute():
        try:
            return binding(request)
        except Exception as exc:  # noqa: BLE001 - any binding crash becomes an error result
            logger.warning("evaluator raised on %s: %s", canonical_encode(request.candidate), exc)
            return EvaluationResult(ERROR, message=f"{type(exc).__name__}: {exc}")

    return cache.get_or_compute(cache_key(request), compute)


# ---------------------------------------------------------------------------
# surrogate


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def unit_hash(*parts: str) -> float:
    """FNV-1a-64 of the ``|``-joined parts, scaled into [0, 1)."""
    return fnv1a_64("|".join(parts).encode("utf-8")) / 2.0**64


def surrogate_score(candidate: ProtocolCandidate, surrogate_seed: int) -> float:
    """Deterministic synthetic accuracy in [0.78, 0.98).

    Per-choice main effects plus two interaction terms (optimizer with learning
    rate, optimizer with schedule) so that the landscape rewards tuning the
    optimization knobs jointly.
    """
    seed = str(int(surrogate_seed))
    names = list(candidate)
    main = sum(unit_hash(seed, "main", n, token_of(candidate[n])) for n in names) / len(names)
    opt = token_of(candidate["optimizer"]) if "optimizer" in candidate else ""
    lr = token_of(candidate["learning_rate"]) if "learning_rate" in candidate else ""
    sched = token_of(candidate["lr_schedule"]) if "lr_schedule" in candidate else ""
    pair = 0.5 * (unit_hash(seed, "pair", "optxlr", opt, lr)
                  + unit_hash(seed, "pair", "optxsched", opt, sched))
    return 0.78 + 0.12 * main + 0.08 * pair


class SurrogateBinding:
    def __init__(self, surrogate_seed: int):
        self.surrogate_seed = int(surrogate_seed)

    def __call__(self, request: EvaluationRequest) -> EvaluationResult:
        # No training happens, so the simulated cost is zero; this also keeps traces byte-stable.
        return EvaluationResult(OK, surrogate_score(request.candidate, self.surrogate_seed))

    def describe(self) -> dict:
        return {"kind": "surrogate", "seed": self.surrogate_seed}


# ---------------------------------------------------------------------------
# external trainer process


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def parse_response(stdout: str) -> tuple[str, float | None, str | None]:
    """Validate a trainer's stdout document; returns ``(status, fitness, message)``."""
    try:
        doc = json.loads(stdout)
    except json.JSONDecodeError as exc:
        return ERROR, None, f"malformed JSON on stdout: {exc}"
    if not isinstance(doc, dict):
        return ERROR, None, "response is not a JSON object"
    message = doc.get("message")
    if message is not None:
        message = str(message)
    status = doc.get("status")
    if status != OK:
        return ERROR, None, message or f"trainer reported status {status!r}"
    acc = doc.get("accuracy")
    if isinstance(acc, bool) or not isinstance(acc, (int, float)):
        return ERROR, None, f"accuracy must be a number, got {acc!r}"
    if not 0.0 <= acc <= 1.0:
        return ERROR, None, f"accuracy {acc} outside [0, 1]"
    return OK, float(acc), message


def external_evaluate(command: str | Sequence[str], request: EvaluationRequest,
                      timeout_seconds: float | None) -> EvaluationResult:
    """Run a trainer: request JSON on stdin, one response JSON document on stdout."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    payload = json.dumps(request.to_json())
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
    except OSError as exc:
        return EvaluationResult(ERROR, message=f"cannot start {argv[0]!r}: {exc}")
    try:
        out, err = proc.communicate(payload, timeout=timeout_seconds)
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        proc.communicate()
        return EvaluationResult(
            TIMEOUT,
            message=f"killed after {timeout_seconds}s",
            eval_seconds=time.monotonic() - start,
        )
    finally:
        if proc.poll() is None:
            _kill_group(proc)
            proc.wait()
    elapsed = time.monotonic() - start
    if proc.returncode != 0:
        tail = (err or "").strip().splitlines()[-3:]
        return EvaluationResult(
            ERROR,
            message=f"exit code {proc.returncode}" + (f": {' | '.join(tail)}" if tail else ""),
            eval_seconds=elapsed,
        )
    status, fitness, message = parse_response(out)
    return EvaluationResult(status, fitness, message, elapsed)


class ExternalBinding:
    """Trainer subprocess binding with a cap on simultaneously running processes."""

    def __init__(self, command: str | Sequence[str], timeout_seconds: float | None = None,
                 max_processes: int = 1):
        self.command = command
        self.timeout_seconds = timeout_seconds
        self._slots = threading.BoundedSemaphore(max(1, max_processes))

    def __call__(self, request: EvaluationRequest) -> EvaluationResult:
        with self._slots:
            return external_evaluate(self.command, request, self.timeout_seconds)

    def describe(self) -> dict:
        return {"kind": "external", "command": self.command, "timeout": self.timeout_seconds}


# ---------------------------------------------------------------------------
# replay table


def load_replay_table(path: str | Path) -> dict[tuple[str, str], float]:
    """Read a ``key,fidelity,fitness`` CSV into a lookup table."""
    table: dict[tuple[str, str], float] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["key", "fidelity", "fitness"]:
            raise ValueError(f"{path}: header must be key,fidelity,fitness")
        for lineno, row in enumerate(reader, start=2):
            try:
                fitness = float(row["fitness"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: bad fitness {row['fitness']!r}") from None
            if not 0.0 <= fitness <= 1.0:
                raise ValueError(f"{path}:{lineno}: fitness {fitness} outside [0, 1]")
            table[(row["key"].strip(), row["fidelity"].strip())] = fitness
    return table


def replay_evaluate(table: Mapping[tuple[str, str], float], request: EvaluationRequest) -> EvaluationResult:
    key = (canonical_encode(request.candidate), request.fidelity.name)
    if key not in table:
        return EvaluationResult(ERROR, message=f"no replay row for {key[0]} at {key[1]}")
    return EvaluationResult(OK, table[key])


class ReplayBinding:
    def __init__(self, table: Mapping[tuple[str, str], float] | str | Path):
        self.source = None if isinstance(table, Mapping) else str(table)
        self.table = table if isinstance(table, Mapping) else load_replay_table(table)

    def __call__(self, request: EvaluationRequest) -> EvaluationResult:
        return replay_evaluate(self.table, request)

    def describe(self) -> dict:
        return {"kind": "replay", "table": self.source}


# ---------------------------------------------------------------------------


class Evaluator:
    """Binding + fidelity + seed + cache: what the search loop calls to score candidates."""

    def __init__(self, binding, fidelity: FidelityDescriptor = PROXY, seed: int = 0,
                 cache: EvaluationCache | None = None, jobs: int = 1,
                 space: SearchSpace | None = None):
        self.binding = binding
        self.fidelity = fidelity
        self.seed = int(seed)
        self.cache = cache if cache is not None else EvaluationCache()
        self.jobs = max(1, int(jobs))
        self.space = space or default_space()

    def request(self, candidate: ProtocolCandidate) -> EvaluationRequest:
        return EvaluationRequest(candidate, self.fidelity, self.seed)

    def score(self, candidate: ProtocolCandidate) -> tuple[EvaluationResult, bool]:
        return evaluate_with_hit(self.binding, self.request(candidate), self.cache)

    def score_batch(self, candidates: Sequence[ProtocolCandidate]) -> list[tuple[EvaluationResult, bool]]:
        """Score in order. Hit flags depend only on order, never on completion timing."""
        keys = [cache_key(self.request(c)) for c in candidates]
        first: dict[tuple, int] = {}
        misses = []
        for i, k in enumerate(keys):
            if k not in first and k not in self.cache:
                first[k] = i
                misses.append(i)
        computed: dict[int, EvaluationResult] = {}
        if self.jobs > 1 and len(misses) > 1:
            with ThreadPoolExecutor(max_workers=min(self.jobs, len(misses))) as pool:
                futures = {i: pool.submit(self.score, candidates[i]) for i in misses}
                computed = {i: f.result()[0] for i, f in futures.items()}
        else:
            computed = {i: self.score(candidates[i])[0] for i in misses}
        out = []
        for i, k in enumerate(keys):
            if i in computed:
                out.append((computed[i], False))
            else:
                out.append((self.cache.get(k), True))
        return out
