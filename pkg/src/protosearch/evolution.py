"""Evolutionary protocol search: random initial population, then top-k crossover/mutation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .evaluation import EvaluationResult, Evaluator
from .space import (
    ProtocolCandidate,
    SearchSpace,
    draw_choice,
    is_valid,
    repair,
    sample_uniform,
)

logger = logging.getLogger(__name__)

INIT, CROSSOVER, MUTATION = "init", "crossover", "mutation"


class SearchError(RuntimeError):
    pass


class EvaluatorFailure(SearchError):
    def __init__(self, message: str, candidate: ProtocolCandidate | None = None):
        super().__init__(message)
        self.candidate = candidate


@dataclass(frozen=True)
class SearchConfig:
    m_init: int = 16
    m: int = 8
    t: int = 10
    k: int = 4
    mutation_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.m_init < 1 or self.k < 1 or self.t < 0:
            raise ValueError("m_init and k must be positive, t non-negative")
        if self.m < 2 or self.m % 2:
            raise ValueError(f"m must be a positive even number, got {self.m}")
        if self.k > self.m_init:
            raise ValueError(f"k={self.k} exceeds m_init={self.m_init}")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must lie in [0, 1]")

    @property
    def budget(self) -> int:
        return self.m_init + self.t * self.m

    def to_json(self) -> dict:
        return {
            "m_init": self.m_init,
            "m": self.m,
            "t": self.t,
            "k": self.k,
            "mutation_prob": self.mutation_prob,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: ProtocolCandidate
    fitness: float | None  # None marks a failed evaluation
    origin: str
    generation: int
    eval_seconds: float = 0.0
    cached: bool = False
    status: str = "ok"
    message: str | None = None

    @property
    def valid(self) -> bool:
        return self.fitness is not None

    @classmethod
    def from_result(cls, candidate, result: EvaluationResult, origin, generation, cached):
        return cls(
            candidate,
            result.fitness,
            origin,
            generation,
            0.0 if cached else result.eval_seconds,
            cached,
            result.status,
            result.message,
        )


@dataclass
class SearchState:
    config: SearchConfig
    population: list[ScoredCandidate] = field(default_factory=list)
    generation: int = 0
    evaluations_spent: int = 0
    cache_hits: int = 0
    degraded_steps: int = 0

    def append(self, entry: ScoredCandidate) -> None:
        self.population.append(entry)
        if entry.cached:
            self.cache_hits += 1
        else:
            self.evaluations_spent += 1

    @property
    def parents(self) -> list[ProtocolCandidate]:
        return select_topk(self, self.config.k)

    def best(self) -> ScoredCandidate:
        idx = topk_indices(self.population, 1)
        if not idx:
            raise SearchError("no successfully evaluated candidate in the population")
        return self.population[idx[0]]

    def best_curve(self) -> list[float | None]:
        """Best-so-far fitness after each population entry (None until the first success)."""
        curve, best = [], None
        for e in self.population:
            if e.valid and (best is None or e.fitness > best):
                best = e.fitness
            curve.append(best)
        return curve


def topk_indices(population: Sequence[ScoredCandidate], k: int) -> list[int]:
    """Indices of the k fittest valid entries; equal fitness keeps insertion order."""
    scored = [i for i, e in enumerate(population) if e.valid]
    scored.sort(key=lambda i: -population[i].fitness)  # stable sort keeps FIFO among ties
    return scored[:k]


def select_topk(state: SearchState, k: int) -> list[ProtocolCandidate]:
    return [state.population[i].candidate for i in topk_indices(state.population, k)]


def crossover(parent_a: ProtocolCandidate, parent_b: ProtocolCandidate, space: SearchSpace,
              rng: np.random.Generator) -> ProtocolCandidate:
    """Uniform crossover: every gene from either parent with probability 1/2."""
    genes = []
    for name in space.names:
        source = parent_a if rng.random() < 0.5 else parent_b
        genes.append((name, source[name]))
    return repair(ProtocolCandidate(genes), space, rng)


def mutate(parent: ProtocolCandidate, space: SearchSpace, prob: float,
           rng: np.random.Generator) -> ProtocolCandidate:
    """Redraw each gene with probability ``prob`` from its whole domain (may pick the same value)."""
    values: dict = {}
    for d in space.domains:
        if rng.random() < prob:
            values[d.name] = draw_choice(d.values(values), rng)
        else:
            values[d.name] = parent[d.name]
    return repair(ProtocolCandidate([(n, values[n]) for n in space.names]), space, rng)


def _append_scored(state, space, batch, results):
    for (cand, origin), (result, cached) in zip(batch, results):
        if not is_valid(cand, space):
            raise SearchError(f"invalid candidate produced: {cand}")
        state.append(ScoredCandidate.from_result(cand, result, origin, state.generation, cached))


def initialize(space: SearchSpace, config: SearchConfig, evaluator: Evaluator,
               rng: np.random.Generator) -> SearchState:
    state = SearchState(config)
    batch = [(sample_uniform(space, rng), INIT) for _ in range(config.m_init)]
    results = evaluator.score_batch([c for c, _ in batch])
    _append_scored(state, space, batch, results)
    if not any(e.valid for e in state.population):
        first = state.population[0]
        raise EvaluatorFailure(
            f"all {config.m_init} initial evaluations failed; first: {first.message}",
            first.candidate,
        )
    return state


def make_children(state: SearchState, space: SearchSpace,
                  rng: np.random.Generator) -> list[tuple[ProtocolCandidate, str]]:
    """Draw one generation of children from the current top-k (no evaluation)."""
    cfg = state.config
    parents = select_topk(state, cfg.k)
    children = []
    for _ in range(cfg.m // 2):
        if len(parents) >= 2:
            i, j = rng.choice(len(parents), size=2, replace=False)
        else:
            i = j = 0
        children.append((crossover(parents[i], parents[j], space, rng), CROSSOVER))
    for _ in range(cfg.m // 2):
        p = parents[int(rng.integers(len(parents)))]
        children.append((mutate(p, space, cfg.mutation_prob, rng), MUTATION))
    return children


def evolve_step(state: SearchState, space: SearchSpace, evaluator: Evaluator,
                rng: np.random.Generator) -> SearchState:
    if state.generation >= state.config.t:
        raise SearchError(f"generation {state.generation} already reached t={state.config.t}")
    children = make_children(state, space, rng)
    results = evaluator.score_batch([c for c, _ in children])
    state.generation += 1
    _append_scored(state, space, children, results)
    if not any(r.ok for r, _ in results):
        state.degraded_steps += 1
        logger.warning("generation %d: all %d children failed to evaluate", state.generation, len(children))
    return state


def run(space: SearchSpace, config: SearchConfig, evaluator: Evaluator,
        on_step: Callable[[SearchState, int], None] | None = None) -> tuple[ScoredCandidate, SearchState]:
    """Full search. ``on_step(state, start)`` fires after each generation with the index of its first entry."""
    rng = np.random.default_rng(config.seed)
    state = initialize(space, config, evaluator, rng)
    if on_step:
        on_step(state, 0)
    while state.generation < config.t:
        start = len(state.population)
        evolve_step(state, space, evaluator, rng)
        if on_step:
            on_step(state, start)
    return state.best(), state
