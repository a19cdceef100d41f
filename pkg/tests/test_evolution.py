from collections import Counter

import numpy as np
import pytest

from protosearch.evaluation import ERROR, PROXY, EvaluationResult, Evaluator, SurrogateBinding
from protosearch.evolution import (
    CROSSOVER,
    INIT,
    MUTATION,
    EvaluatorFailure,
    ScoredCandidate,
    SearchConfig,
    SearchError,
    SearchState,
    crossover,
    evolve_step,
    initialize,
    mutate,
    run,
    select_topk,
    topk_indices,
)
from protosearch.space import (
    BASELINE,
    SEARCHED,
    Categorical,
    SearchSpace,
    canonical_encode,
    default_space,
    is_valid,
    sample_uniform,
)


def surrogate(seed=0, jobs=1):
    return Evaluator(SurrogateBinding(seed), PROXY, seed, jobs=jobs)


def state_with(fitnesses):
    cfg = SearchConfig(m_init=len(fitnesses), k=1)
    rng = np.random.default_rng(0)
    space = default_space()
    pop = [ScoredCandidate(sample_uniform(space, rng), f, INIT, 0) for f in fitnesses]
    return SearchState(cfg, pop)


def test_config_defaults_and_checks():
    cfg = SearchConfig()
    assert (cfg.m_init, cfg.m, cfg.t, cfg.k, cfg.mutation_prob) == (16, 8, 10, 4, 0.2)
    assert cfg.budget == 96
    for bad in ({"m": 7}, {"k": 17}, {"mutation_prob": 1.5}, {"m_init": 0}):
        with pytest.raises(ValueError):
            SearchConfig(**bad)


def test_topk_fifo_ties():
    state = state_with([0.5, 0.9, 0.7, 0.9])
    assert topk_indices(state.population, 2) == [1, 3]
    assert select_topk(state, 2) == [state.population[1].candidate, state.population[3].candidate]
    assert topk_indices(state.population, 4) == [1, 3, 2, 0]


def test_topk_skips_failures():
    state = state_with([0.5, None, 0.7])
    assert topk_indices(state.population, 3) == [2, 0]


def test_crossover_identical_parents(space, rng):
    for _ in range(100):
        assert crossover(SEARCHED, SEARCHED, space, rng) == SEARCHED


def test_crossover_repairs_lr(space):
    a = BASELINE  # adadelta, lr 1
    b = SEARCHED  # adam, lr 5e-4
    rng = np.random.default_rng(0)
    seen = 0
    for _ in range(2000):
        child = crossover(a, b, space, rng)
        assert is_valid(child, space)
        if child.optimizer == "adadelta":
            assert child.learning_rate in ("2", "1.5", "1", "0.5")
            seen += child.learning_rate != "1"
    assert seen > 0  # the repair path was exercised


def test_crossover_inheritance_rates(space):
    a = SEARCHED
    b = SEARCHED.replace(alpha_real=SEARCHED.alpha_real * 2, color_format="rgb", keep_aspect_ratio=True,
                         data_augmentation=False, character_set="DLUP", learning_rate="1e-4",
                         lr_schedule="constant")
    rng = np.random.default_rng(11)
    n = 10_000
    counts = Counter()
    for _ in range(n):
        child = crossover(a, b, space, rng)
        for name in space.names:
            if name != "optimizer" and child[name] == a[name]:
                counts[name] += 1
    for name in space.names:
        if name != "optimizer":
            assert 0.47 <= counts[name] / n <= 0.53, name


def test_mutate_prob_zero(space, rng):
    for _ in range(100):
        assert mutate(SEARCHED, space, 0.0, rng) == SEARCHED


def test_mutate_prob_one_singleton(rng):
    s = SearchSpace((Categorical("x", ("a",)), Categorical("y", (False,))))
    parent = sample_uniform(s, rng)
    assert all(mutate(parent, s, 1.0, rng) == parent for _ in range(50))


def test_mutate_replacement_rate(space):
    # A redraw lands on a different value with probability (n-1)/n, so the
    # observed change rate divided by that factor estimates the redraw rate.
    rng = np.random.default_rng(5)
    n = 100_000
    changes = Counter()
    for _ in range(n):
        child = mutate(SEARCHED, space, 0.2, rng)
        for name in ("alpha_real", "character_set", "lr_schedule", "color_format"):
            changes[name] += child[name] != SEARCHED[name]
    for name in changes:
        size = len(space[name].choices)
        draw_rate = changes[name] / n / ((size - 1) / size)
        assert 0.19 <= draw_rate <= 0.21, (name, draw_rate)


def test_mutate_always_valid(space, rng):
    parent = SEARCHED
    for _ in range(5000):
        parent = mutate(parent, space, 0.5, rng)
        assert is_valid(parent, space)


def test_initialize(space):
    ev = surrogate(3)
    state = initialize(space, SearchConfig(seed=3), ev, np.random.default_rng(3))
    assert len(state.population) == 16 and state.generation == 0
    assert all(e.origin == INIT and e.generation == 0 for e in state.population)
    again = initialize(space, SearchConfig(seed=3), surrogate(3), np.random.default_rng(3))
    assert [(e.candidate, e.fitness) for e in state.population] == [(e.candidate, e.fitness) for e in again.population]


def test_initialize_single(space):
    best, state = run(space, SearchConfig(m_init=1, k=1, t=0), surrogate())
    assert len(state.population) == 1 and best is state.population[0]


class AlwaysFail:
    def __call__(self, request):
        return EvaluationResult(ERROR, message="boom")


def test_initialize_all_failed(space):
    with pytest.raises(EvaluatorFailure) as info:
        run(space, SearchConfig(), Evaluator(AlwaysFail(), PROXY, 0))
    assert info.value.candidate is not None


def test_evolve_step_grows_by_m(space):
    ev = surrogate(1)
    rng = np.random.default_rng(1)
    state = initialize(space, SearchConfig(seed=1), ev, rng)
    evolve_step(state, space, ev, rng)
    assert len(state.population) == 24 and state.generation == 1
    origins = [e.origin for e in state.population[16:]]
    assert origins == [CROSSOVER] * 4 + [MUTATION] * 4
    assert all(e.generation == 1 for e in state.population[16:])


def test_evolve_step_past_t(space):
    _, state = run(space, SearchConfig(t=1), surrogate())
    with pytest.raises(SearchError):
        evolve_step(state, space, surrogate(), np.random.default_rng(0))


def test_k1_crossover_copies_parent(space):
    ev = surrogate(2)
    rng = np.random.default_rng(2)
    state = initialize(space, SearchConfig(k=1, seed=2), ev, rng)
    top = select_topk(state, 1)[0]
    evolve_step(state, space, ev, rng)
    assert all(e.candidate == top for e in state.population[16:20])


def test_full_run_composition(space):
    best, state = run(space, SearchConfig(seed=4), surrogate(4))
    counts = Counter(e.origin for e in state.population)
    assert counts == {INIT: 16, CROSSOVER: 40, MUTATION: 40}
    assert state.evaluations_spent + state.cache_hits == 96
    assert state.evaluations_spent <= 96
    assert all(is_valid(e.candidate, space) for e in state.population)


def test_best_matches_sort_oracle(space):
    best, state = run(space, SearchConfig(seed=9), surrogate(9))
    ordered = sorted(range(len(state.population)), key=lambda i: (-state.population[i].fitness, i))
    assert [state.population[i].candidate for i in ordered[:4]] == select_topk(state, 4)
    assert best is state.population[ordered[0]]
    fits = [state.population[i].fitness for i in ordered[:4]]
    assert fits == sorted(fits, reverse=True)


def test_incumbent_non_decreasing(space):
    _, state = run(space, SearchConfig(seed=12), surrogate(12))
    per_gen = {}
    for e in state.population:
        per_gen[e.generation] = max(per_gen.get(e.generation, 0), e.fitness)
    running, incumbents = 0, []
    for g in sorted(per_gen):
        running = max(running, per_gen[g])
        incumbents.append(running)
    assert incumbents == sorted(incumbents)
    curve = state.best_curve()
    assert all(a <= b for a, b in zip(curve, curve[1:]))


def test_t0_is_random_search(space):
    best, state = run(space, SearchConfig(t=0, seed=5), surrogate(5))
    assert len(state.population) == 16
    assert best.fitness == max(e.fitness for e in state.population)


def test_run_is_deterministic(space):
    def snapshot(jobs):
        _, state = run(space, SearchConfig(seed=21), surrogate(21, jobs=jobs))
        return [(canonical_encode(e.candidate), e.fitness, e.origin, e.cached) for e in state.population]

    assert snapshot(1) == snapshot(1) == snapshot(4)


def test_duplicates_served_from_cache(space):
    class Counting:
        def __init__(self):
            self.keys = []

        def __call__(self, request):
            self.keys.append(canonical_encode(request.candidate))
            return SurrogateBinding(0)(request)

    binding = Counting()
    _, state = run(space, SearchConfig(seed=8), Evaluator(binding, PROXY, 8))
    assert len(binding.keys) == len(set(binding.keys)) == state.evaluations_spent
    seen = set()
    for e in state.population:
        key = canonical_encode(e.candidate)
        assert e.cached == (key in seen)
        seen.add(key)


def test_failed_children_kept_and_excluded(space):
    class FailAdam:
        def __call__(self, request):
            if request.candidate.optimizer == "adam":
                return EvaluationResult(ERROR, message="diverged")
            return SurrogateBinding(0)(request)

    best, state = run(space, SearchConfig(seed=6), Evaluator(FailAdam(), PROXY, 6))
    assert len(state.population) == 96
    failed = [e for e in state.population if not e.valid]
    assert failed and all(e.status == ERROR for e in failed)
    assert best.candidate.optimizer == "adadelta"
    assert all(c.optimizer == "adadelta" for c in select_topk(state, 4))


def test_degraded_step_warning(space, caplog):
    rng = np.random.default_rng(0)
    state = initialize(space, SearchConfig(t=1), surrogate(), rng)
    with caplog.at_level("WARNING"):
        evolve_step(state, space, Evaluator(AlwaysFail(), PROXY, 0), rng)
    assert state.degraded_steps == 1 and len(state.population) == 24
    assert all(not e.valid for e in state.population[16:])
    assert any("failed" in r.message for r in caplog.records)
