"""GA and ABC baselines with annealed mutation and stagnation handling, plus exhaustive search."""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence, Union

import numpy as np

from cpudse import config
from cpudse.errors import ExhaustiveCapError, SearchError
from cpudse.modules.design_space import enumerate_configs, sample_config, space_size, validate_config
from cpudse.modules.metrics import DEFAULT_AREA_WEIGHTS, objective
from cpudse.modules.simulator import simulate
from cpudse.schemas import (
    AreaWeights,
    Chunk,
    Configuration,
    DesignSpace,
    HistoryPoint,
    SearchResult,
    SearchSpec,
)

Fitness = Callable[[Configuration], float]


class Evaluator:
    """
    Memoised fitness function.

    `requests` counts every lookup, `calls` only the ones that reached the
    underlying function (simulations, for a simulator-backed evaluator).
    """

    def __init__(self, fn: Fitness, space: Optional[DesignSpace] = None):
        self.fn = fn
        self.space = space
        self.cache: dict[tuple[int, ...], float] = {}
        self.calls = 0
        self.requests = 0

    def __call__(self, cfg: Configuration) -> float:
        self.requests += 1
        key = tuple(cfg.ranks)
        if key not in self.cache:
            if self.space is not None:
                validate_config(cfg, self.space)
            self.cache[key] = float(self.fn(cfg))
            self.calls += 1
        return self.cache[key]

    def evaluate_many(self, configs: Sequence[Configuration]) -> list[float]:
        """Evaluate a population; new configurations may run in parallel."""
        fresh = list(dict.fromkeys(tuple(c.ranks) for c in configs if tuple(c.ranks) not in self.cache))
        if config.THREADS > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
                values = list(pool.map(lambda r: float(self.fn(Configuration(ranks=r))), fresh))
            self.cache.update(zip(fresh, values))
            self.calls += len(fresh)
        return [self(c) for c in configs]


def simulation_objective(chunks: Sequence[Chunk], space: DesignSpace,
                         area_weights: AreaWeights = DEFAULT_AREA_WEIGHTS, seed: int = 0) -> Fitness:
    """Mean IPC/area over a fixed chunk set; parameters outside `space` stay at baseline."""
    if not chunks:
        raise SearchError("simulation objective needs at least one chunk")

    def fitness(cfg: Configuration) -> float:
        values = [objective(simulate(chunk, cfg, space, seed=seed), cfg, space, area_weights)
                  for chunk in chunks]
        return float(np.mean(values))

    return fitness


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def mutation_rate(spec: SearchSpec, iteration: int) -> float:
    """m_k = m0 * alpha^k when annealing, m0 otherwise."""
    return spec.m0 * spec.alpha ** iteration if spec.anneal else spec.m0


def _mutate(ranks: np.ndarray, cards: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = ranks.copy()
    hit = rng.random(len(ranks)) < rate
    if hit.any():
        out[hit] = rng.integers(0, cards[hit])
    return out


def _config(ranks: np.ndarray) -> Configuration:
    return Configuration(ranks=tuple(int(r) for r in ranks))


class _Tracker:
    """Best-so-far bookkeeping and history."""

    def __init__(self, evaluator: Evaluator, on_iteration: Optional[Callable[[HistoryPoint], None]]):
        self.evaluator = evaluator
        self.on_iteration = on_iteration
        self.best: Optional[np.ndarray] = None
        self.best_fitness = -np.inf
        self.history: list[HistoryPoint] = []
        self.started = time.perf_counter()

    def offer(self, ranks: np.ndarray, fitness: float) -> bool:
        if fitness > self.best_fitness:
            self.best_fitness = fitness
            self.best = ranks.copy()
            return True
        return False

    def record(self, iteration: int) -> None:
        point = HistoryPoint(iteration=iteration, best_fitness=self.best_fitness,
                             calls=self.evaluator.calls, wall_time=time.perf_counter() - self.started)
        self.history.append(point)
        if self.on_iteration is not None:
            self.on_iteration(point)

    def result(self, algorithm: str) -> SearchResult:
        return SearchResult(algorithm=algorithm, best=_config(self.best), fitness=self.best_fitness,
                            history=self.history, calls=self.evaluator.calls,
                            requests=self.evaluator.requests)


# ---------------------------------------------------------------------------
# Genetic algorithm
# ---------------------------------------------------------------------------

def _tournament(population: np.ndarray, fitness: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    picks = rng.integers(0, len(population), size=size)
    return population[picks[np.argmax(fitness[picks])]]


def ga_search(space: DesignSpace, evaluator: Evaluator, spec: SearchSpec = SearchSpec(),
              on_iteration: Optional[Callable[[HistoryPoint], None]] = None) -> SearchResult:
    """
    Elitist GA over ranks.

    Each iteration: tournament selection, uniform crossover (gene-wise swap),
    per-gene mutation at the annealed rate. When the best fitness has not
    improved for `stagnation` iterations every non-elite individual is
    mutated at rate 0.5.
    """
    rng = np.random.default_rng(spec.seed)
    cards = np.array(space.cardinalities, dtype=np.int64)
    tracker = _Tracker(evaluator, on_iteration)

    population = np.array([sample_config(space, rng).ranks for _ in range(spec.population)], dtype=np.int64)
    fitness = np.array(evaluator.evaluate_many([_config(r) for r in population]))
    for ranks, f in zip(population, fitness):
        tracker.offer(ranks, f)
    tracker.record(0)

    stagnant = 0
    for k in range(1, spec.iterations + 1):
        rate = mutation_rate(spec, k - 1)
        children = [tracker.best.copy()]
        while len(children) < spec.population:
            a = _tournament(population, fitness, spec.tournament, rng)
            b = _tournament(population, fitness, spec.tournament, rng)
            if rng.random() < spec.crossover_rate:
                child = np.where(rng.random(len(cards)) < 0.5, a, b)
            else:
                child = a.copy()
            children.append(_mutate(child, cards, rate, rng))

        population = np.array(children, dtype=np.int64)
        if spec.stagnation_mutation and stagnant >= spec.stagnation:
            for i in range(1, len(population)):
                population[i] = _mutate(population[i], cards, 0.5, rng)
            stagnant = 0

        fitness = np.array(evaluator.evaluate_many([_config(r) for r in population]))
        improved = False
        for ranks, f in zip(population, fitness):
            improved |= tracker.offer(ranks, f)
        stagnant = 0 if improved else stagnant + 1
        tracker.record(k)

    return tracker.result("ga" if spec.anneal or spec.stagnation_mutation else "ga-vanilla")


# ---------------------------------------------------------------------------
# Artificial bee colony
# ---------------------------------------------------------------------------

def _neighbour(sources: np.ndarray, i: int, cards: np.ndarray, rate: float,
               rng: np.random.Generator) -> np.ndarray:
    """Move one random parameter of source i relative to another source; annealed random jump."""
    x = sources[i].copy()
    j = int(rng.integers(0, len(cards)))
    if rng.random() < rate or len(sources) < 2:
        x[j] = rng.integers(0, cards[j])
        return x
    k = int(rng.integers(0, len(sources) - 1))
    k += k >= i
    phi = rng.uniform(-1.0, 1.0)
    x[j] = int(np.clip(np.rint(x[j] + phi * (x[j] - sources[k, j])), 0, cards[j] - 1))
    if x[j] == sources[i, j] and cards[j] > 1:
        step = 1 if rng.random() < 0.5 else -1
        x[j] = int(np.clip(x[j] + step, 0, cards[j] - 1))
    return x


def scout_phase(sources: np.ndarray, trials: np.ndarray, limit: int, cards: np.ndarray,
                rng: np.random.Generator) -> list[int]:
    """Re-randomise every source with at least `limit` failed improvements; returns their indices."""
    replaced = [int(i) for i in np.flatnonzero(trials >= limit)]
    for i in replaced:
        sources[i] = rng.integers(0, cards)
        trials[i] = 0
    return replaced


def abc_search(space: DesignSpace, evaluator: Evaluator, spec: SearchSpec = SearchSpec(),
               on_iteration: Optional[Callable[[HistoryPoint], None]] = None) -> SearchResult:
    """
    Artificial bee colony over ranks with population/2 food sources.

    Employed bees perturb each source once, onlookers pick sources in
    proportion to fitness, scouts replace sources stuck for `stagnation`
    trials (when stagnation handling is on).
    """
    rng = np.random.default_rng(spec.seed)
    cards = np.array(space.cardinalities, dtype=np.int64)
    tracker = _Tracker(evaluator, on_iteration)
    n_sources = max(spec.population // 2, 1)

    sources = np.array([sample_config(space, rng).ranks for _ in range(n_sources)], dtype=np.int64)
    fitness = np.array(evaluator.evaluate_many([_config(r) for r in sources]))
    trials = np.zeros(n_sources, dtype=np.int64)
    for ranks, f in zip(sources, fitness):
        tracker.offer(ranks, f)
    tracker.record(0)

    def try_improve(i: int, rate: float) -> None:
        candidate = _neighbour(sources, i, cards, rate, rng)
        f = evaluator(_config(candidate))
        tracker.offer(candidate, f)
        if f > fitness[i]:
            sources[i], fitness[i], trials[i] = candidate, f, 0
        else:
            trials[i] += 1

    for k in range(1, spec.iterations + 1):
        rate = mutation_rate(spec, k - 1)
        for i in range(n_sources):
            try_improve(i, rate)

        weights = fitness - fitness.min() + 1e-12
        probabilities = weights / weights.sum()
        for i in rng.choice(n_sources, size=n_sources, p=probabilities):
            try_improve(int(i), rate)

        if spec.stagnation_mutation:
            for i in scout_phase(sources, trials, spec.stagnation, cards, rng):
                fitness[i] = evaluator(_config(sources[i]))
                tracker.offer(sources[i], fitness[i])
        tracker.record(k)

    return tracker.result("abc" if spec.anneal or spec.stagnation_mutation else "abc-vanilla")


# ---------------------------------------------------------------------------
# Exhaustive search and convergence
# ---------------------------------------------------------------------------

def exhaustive_search(space: DesignSpace, evaluator: Evaluator, cap: int = config.EXHAUSTIVE_CAP) -> SearchResult:
    """Exact argmax over every configuration; ties go to the lexicographically first ranks."""
    size = space_size(space)
    if size > cap:
        raise ExhaustiveCapError(f"Design space has {size} configurations, above the exhaustive cap of {cap}")

    tracker = _Tracker(evaluator, None)
    for cfg in enumerate_configs(space):
        tracker.offer(np.array(cfg.ranks, dtype=np.int64), evaluator(cfg))
    tracker.record(0)
    return tracker.result("exhaustive")


def convergence_iteration(history: Sequence[Union[float, HistoryPoint]], frac: float = 0.9) -> int:
    """First index where best-so-far reaches frac of the final best-so-far."""
    if not history:
        raise SearchError("convergence needs a non-empty history")
    values = [h.best_fitness if isinstance(h, HistoryPoint) else float(h) for h in history]
    target = frac * values[-1]
    for i, v in enumerate(values):
        if v >= target:
            return i
    return len(values) - 1
