"""Tests for the GA/ABC baselines and exhaustive search."""

import numpy as np
import pytest

from cpudse.errors import ExhaustiveCapError, SearchError
from cpudse.modules.design_space import enumerate_configs, select_params, subsystem_subset
from cpudse.modules.metaheuristics import (
    Evaluator,
    abc_search,
    convergence_iteration,
    exhaustive_search,
    ga_search,
    mutation_rate,
    scout_phase,
    simulation_objective,
)
from cpudse.schemas import Configuration, HistoryPoint, SearchSpec

TARGET = (1, 4, 2)


def distance_fitness(cfg):
    return -float(sum((a - b) ** 2 for a, b in zip(cfg.ranks, TARGET)))


def test_evaluator_memoises(toy_space):
    evaluator = Evaluator(distance_fitness, toy_space)
    cfg = Configuration(ranks=(0, 0, 0))
    assert evaluator(cfg) == evaluator(cfg) == -21.0
    assert (evaluator.calls, evaluator.requests) == (1, 2)
    assert evaluator.evaluate_many([cfg, Configuration(ranks=(1, 1, 1))]) == [-21.0, -10.0]
    assert (evaluator.calls, evaluator.requests) == (2, 4)


def test_mutation_rate_anneals():
    spec = SearchSpec(m0=0.4, alpha=0.5)
    assert [mutation_rate(spec, k) for k in range(3)] == [0.4, 0.2, 0.1]
    assert mutation_rate(spec.model_copy(update={"anneal": False}), 5) == 0.4


@pytest.mark.parametrize("search", [ga_search, abc_search])
def test_search_finds_toy_optimum(toy_space, search):
    result = search(toy_space, Evaluator(distance_fitness, toy_space), SearchSpec(seed=3))
    assert result.best.ranks == TARGET
    assert result.fitness == 0.0
    best = [h.best_fitness for h in result.history]
    assert best == sorted(best)
    assert [h.iteration for h in result.history] == list(range(51))
    assert result.calls <= 48


@pytest.mark.parametrize("search", [ga_search, abc_search])
def test_search_is_seeded(catalog, search):
    space = subsystem_subset(catalog, "branch")
    target = tuple(c // 2 for c in space.cardinalities)

    def fitness(cfg):
        return -float(np.abs(np.array(cfg.ranks) - target).sum())

    spec = SearchSpec(population=8, iterations=10, seed=11)
    a = search(space, Evaluator(fitness), spec)
    b = search(space, Evaluator(fitness), spec)
    assert (a.best, a.fitness, a.calls) == (b.best, b.fitness, b.calls)
    assert a.fitness >= a.history[0].best_fitness


def test_vanilla_variants_are_named(toy_space):
    spec = SearchSpec(population=4, iterations=2, anneal=False, stagnation_mutation=False)
    assert ga_search(toy_space, Evaluator(distance_fitness), spec).algorithm == "ga-vanilla"
    assert abc_search(toy_space, Evaluator(distance_fitness), spec).algorithm == "abc-vanilla"
    assert ga_search(toy_space, Evaluator(distance_fitness), SearchSpec(iterations=2)).algorithm == "ga"


def test_history_callback(toy_space):
    points = []
    ga_search(toy_space, Evaluator(distance_fitness), SearchSpec(population=4, iterations=3),
              on_iteration=points.append)
    assert [p.iteration for p in points] == [0, 1, 2, 3]


def test_exhaustive_is_exact_and_breaks_ties_low(toy_space):
    evaluator = Evaluator(distance_fitness)
    result = exhaustive_search(toy_space, evaluator)
    assert result.best.ranks == TARGET
    assert result.calls == 48

    flat = exhaustive_search(toy_space, Evaluator(lambda cfg: 1.0))
    assert flat.best == next(iter(enumerate_configs(toy_space)))


def test_exhaustive_cap(toy_space):
    with pytest.raises(ExhaustiveCapError):
        exhaustive_search(toy_space, Evaluator(distance_fitness), cap=47)


def test_scout_phase_replaces_stuck_sources():
    sources = np.zeros((3, 2), dtype=np.int64)
    trials = np.array([0, 5, 7])
    replaced = scout_phase(sources, trials, 5, np.array([4, 4]), np.random.default_rng(0))
    assert replaced == [1, 2]
    assert list(trials) == [0, 0, 0]
    assert np.all(sources >= 0) and np.all(sources < 4)


def test_convergence_iteration():
    assert convergence_iteration([1.0, 5.0, 9.5, 10.0]) == 2
    points = [HistoryPoint(iteration=i, best_fitness=v, calls=i, wall_time=0.0) for i, v in enumerate([2.0, 2.0])]
    assert convergence_iteration(points) == 0
    with pytest.raises(SearchError):
        convergence_iteration([])


def test_simulation_objective_matches_exhaustive(catalog, chunks):
    space = select_params(catalog, ["icache size (kb)"])
    fitness = simulation_objective(chunks[:1], space)
    exact = exhaustive_search(space, Evaluator(fitness, space))
    values = [fitness(cfg) for cfg in enumerate_configs(space)]
    assert exact.fitness == max(values)
    ga = ga_search(space, Evaluator(fitness, space), SearchSpec(population=4, iterations=3))
    assert ga.fitness <= exact.fitness
    with pytest.raises(SearchError):
        simulation_objective([], space)
