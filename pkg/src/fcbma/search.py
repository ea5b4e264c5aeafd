"""Searching the product space of per-factor partitions for low-BIC schemes."""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .glm import FittedModel, GLMError, Problem, rejected_model
from .partition import Partition, PartitionSpace, canonicalize, repair
from .scheme import CollapsingScheme

Progress = Callable[[dict], None]


class SearchError(ValueError):
    pass


class Evaluator:
    """Memoised scheme -> FittedModel map over one prepared problem.

    Fitting is a pure function of the scheme, so the memo may be shared by
    several searches. Schemes that cannot be fitted (rank deficiency,
    divergence) are memoised as rejected models with infinite BIC.
    """

    def __init__(self, problem: Problem, threads: int = 1):
        self.problem = problem
        self.threads = max(1, int(threads))
        self._memo: dict[CollapsingScheme, FittedModel] = {}
        self._lock = threading.Lock()
        self.n_fits = 0

    @property
    def factors(self) -> tuple[str, ...]:
        return self.problem.template.factors

    def _fit(self, scheme: CollapsingScheme) -> FittedModel:
        try:
            return self.problem.fit(scheme)
        except GLMError:
            return rejected_model(scheme, self.problem.template.family, self.problem.levels, self.problem.n_obs)

    def __call__(self, scheme: CollapsingScheme) -> FittedModel:
        model = self._memo.get(scheme)
        if model is None:
            model = self._fit(scheme)
            with self._lock:
                self._memo.setdefault(scheme, model)
                self.n_fits += 1
        return model

    def many(self, schemes: Sequence[CollapsingScheme]) -> list[FittedModel]:
        todo = list(dict.fromkeys(s for s in schemes if s not in self._memo))
        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                fitted = list(pool.map(self._fit, todo))
            with self._lock:
                for s, m in zip(todo, fitted):
                    self._memo.setdefault(s, m)
                self.n_fits += len(todo)
        return [self(s) for s in schemes]


def _evaluator(problem: Problem | Evaluator) -> Evaluator:
    return problem if isinstance(problem, Evaluator) else Evaluator(problem)


def _ordered_spaces(ev: Evaluator, spaces: Mapping[str, PartitionSpace] | None) -> dict[str, PartitionSpace]:
    if spaces is None:
        return ev.problem.spaces()
    extra = [f for f in spaces if f not in ev.factors]
    if extra:
        raise SearchError(f"spaces given for unknown factors {extra}")
    out = {}
    for f in ev.factors:
        if f in spaces:
            out[f] = spaces[f]
        else:
            n = len(ev.problem.levels[f])
            out[f] = PartitionSpace(n, candidates=(Partition.identity(n),))
    return out


@dataclass(frozen=True)
class SAConfig:
    """Annealing schedule. ``initial_temperature=None`` calibrates it so that
    the median |dBIC| of ``calibration_moves`` random moves is accepted with
    probability ``target_acceptance``."""

    initial_temperature: float | None = None
    cooling_factor: float = 0.95
    iterations_per_temperature: int = 50
    min_temperature: float = 1e-3
    restarts: int = 20
    rng_seed: int = 0
    calibration_moves: int = 100
    target_acceptance: float = 0.8

    def __post_init__(self):
        if self.initial_temperature is not None and not self.initial_temperature > 0:
            raise SearchError("initial_temperature must be positive")
        if not 0 < self.cooling_factor < 1:
            raise SearchError("cooling_factor must be in (0, 1)")
        if self.iterations_per_temperature < 1 or self.restarts < 1:
            raise SearchError("iterations_per_temperature and restarts must be >= 1")
        if not self.min_temperature > 0:
            raise SearchError("min_temperature must be positive")
        if not 0 < self.target_acceptance < 1:
            raise SearchError("target_acceptance must be in (0, 1)")


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 60
    generations: int = 120
    crossover_rate: float = 0.8
    mutation_rate: float = 0.3
    elitism_count: int = 2
    tournament_size: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.population_size < 4:
            raise SearchError("population_size must be at least 4")
        if self.generations < 1:
            raise SearchError("generations must be at least 1")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise SearchError("crossover_rate and mutation_rate must lie in [0, 1]")
        if not 0 <= self.elitism_count < self.population_size:
            raise SearchError("elitism_count must be in [0, population_size)")
        if self.tournament_size < 2:
            raise SearchError("tournament_size must be at least 2")


@dataclass
class SearchResult:
    visited: dict[CollapsingScheme, FittedModel]
    trace: list[float] = field(default_factory=list)
    method: str = ""
    finals: list[CollapsingScheme] = field(default_factory=list)

    @property
    def best(self) -> FittedModel:
        if not self.visited:
            raise SearchError("search visited no schemes")
        return min(self.visited.values(), key=_rank_key)

    @property
    def best_scheme(self) -> CollapsingScheme:
        return self.best.scheme

    def ranked(self) -> list[FittedModel]:
        return sorted((m for m in self.visited.values() if math.isfinite(m.bic)), key=_rank_key)

    def merge(self, other: "SearchResult") -> "SearchResult":
        visited = dict(self.visited)
        visited.update(other.visited)
        return SearchResult(visited, self.trace + other.trace, self.method or other.method,
                            self.finals + other.finals)


def _rank_key(m: FittedModel):
    return (m.bic, m.scheme.graycode())


def _space_size(spaces: Mapping[str, PartitionSpace]) -> int:
    total = 1
    for s in spaces.values():
        total *= s.size
    return total


def exhaustive_search(
    problem: Problem | Evaluator,
    spaces: Mapping[str, PartitionSpace] | None = None,
    ceiling: int = 10**6,
    progress: Progress | None = None,
    batch: int = 2000,
) -> SearchResult:
    """Fit every scheme of the product space; refuses spaces above ``ceiling``."""
    ev = _evaluator(problem)
    spaces = _ordered_spaces(ev, spaces)
    size = _space_size(spaces)
    if size > ceiling:
        raise SearchError(
            f"product space has {size} schemes, above the exhaustive ceiling {ceiling}; "
            "use sa_search or ga_search instead"
        )
    import itertools

    names = list(spaces)
    visited: dict[CollapsingScheme, FittedModel] = {}
    trace: list[float] = []
    best = math.inf
    pending: list[CollapsingScheme] = []

    def flush():
        nonlocal best
        for m in ev.many(pending):
            visited[m.scheme] = m
            best = min(best, m.bic)
        trace.append(best)
        if progress:
            progress({"event": "exhaustive", "evaluated": len(visited), "total": size, "best_bic": best})
        pending.clear()

    for combo in itertools.product(*(list(spaces[f]) for f in names)):
        pending.append(CollapsingScheme(tuple(zip(names, combo))))
        if len(pending) >= batch:
            flush()
    if pending:
        flush()
    return SearchResult(visited, trace, "exhaustive")


# -- stochastic moves -------------------------------------------------------


def _movable(spaces: Mapping[str, PartitionSpace]) -> list[str]:
    return [f for f, s in spaces.items() if s.candidates is None or len(s.candidates) > 1]


def random_scheme(spaces: Mapping[str, PartitionSpace], rng: np.random.Generator) -> CollapsingScheme:
    return CollapsingScheme(tuple((f, s.random(rng)) for f, s in spaces.items()))


def random_neighbor(scheme: CollapsingScheme, spaces: Mapping[str, PartitionSpace],
                    rng: np.random.Generator, movable: Sequence[str] | None = None) -> CollapsingScheme:
    """Pick a factor uniformly, then one of its one-move neighbours uniformly."""
    movable = _movable(spaces) if movable is None else movable
    if not movable:
        return scheme
    f = movable[int(rng.integers(len(movable)))]
    options = spaces[f].neighbor_list(scheme[f])
    if not options:
        return scheme
    return scheme.replace(f, options[int(rng.integers(len(options)))])


def _derived_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *path])


def calibrate_temperature(ev: Evaluator, spaces, start: CollapsingScheme, rng, moves: int = 100,
                          acceptance: float = 0.8) -> float:
    """Temperature at which the median |dBIC| of random moves from ``start`` is
    accepted with the target probability."""
    base = ev(start).bic
    deltas = []
    for _ in range(moves):
        b = ev(random_neighbor(start, spaces, rng)).bic
        if math.isfinite(b) and math.isfinite(base) and b != base:
            deltas.append(abs(b - base))
    if not deltas:
        return 1.0
    return float(np.median(deltas)) / math.log(1.0 / acceptance)


def sa_search(
    problem: Problem | Evaluator,
    spaces: Mapping[str, PartitionSpace] | None = None,
    cfg: SAConfig = SAConfig(),
    progress: Progress | None = None,
) -> SearchResult:
    """Simulated annealing with Metropolis acceptance on dBIC.

    Each restart starts from a random scheme with its own derived random
    stream, so results depend only on ``cfg.rng_seed``.
    """
    ev = _evaluator(problem)
    spaces = _ordered_spaces(ev, spaces)
    movable = _movable(spaces)
    visited: dict[CollapsingScheme, FittedModel] = {}
    trace: list[float] = []
    finals = []
    best = math.inf

    def evaluate(s: CollapsingScheme) -> float:
        m = ev(s)
        visited[s] = m
        return m.bic

    for r in range(cfg.restarts):
        rng = _derived_rng(cfg.rng_seed, r)
        current = random_scheme(spaces, rng)
        cur_bic = evaluate(current)
        best = min(best, cur_bic)
        if cfg.initial_temperature is None:
            temp = calibrate_temperature(ev, spaces, current, rng, cfg.calibration_moves, cfg.target_acceptance)
        else:
            temp = cfg.initial_temperature
        temp = max(temp, cfg.min_temperature)
        while temp >= cfg.min_temperature:
            for _ in range(cfg.iterations_per_temperature):
                cand = random_neighbor(current, spaces, rng, movable)
                if cand == current:
                    trace.append(best)
                    continue
                bic = evaluate(cand)
                delta = bic - cur_bic
                u = rng.random()
                if math.isinf(cur_bic) and math.isfinite(bic):
                    accept = True
                elif math.isnan(delta) or math.isinf(bic):
                    accept = False
                else:
                    accept = delta < 0 or u < math.exp(-delta / temp)
                if accept:
                    current, cur_bic = cand, bic
                    best = min(best, bic)
                trace.append(best)
            if progress:
                progress({"event": "sa", "restart": r, "temperature": temp, "current_bic": cur_bic,
                          "best_bic": best, "visited": len(visited)})
            temp *= cfg.cooling_factor
        finals.append(current)
    return SearchResult(visited, trace, "sa", finals)


# -- genetic algorithm ------------------------------------------------------


def crossover_codes(a: Sequence[int], b: Sequence[int], point: int) -> tuple[Partition, Partition]:
    """One-point crossover of two graycodes, offspring canonicalised."""
    if len(a) != len(b):
        raise SearchError("parents must have the same length")
    if not 0 < point < len(a):
        raise SearchError(f"crossover point must lie strictly inside 1..{len(a) - 1}")
    return (canonicalize(list(a[:point]) + list(b[point:])),
            canonicalize(list(b[:point]) + list(a[point:])))


def crossover_schemes(a: CollapsingScheme, b: CollapsingScheme, cuts: Iterable[int]) -> tuple[CollapsingScheme, CollapsingScheme]:
    """Swap alternate factor segments between two schemes.

    ``cuts`` are factor-boundary positions in 1..len-1; segments after an odd
    number of cuts come from the other parent.
    """
    cuts = sorted(set(cuts))
    if a.factors != b.factors:
        raise SearchError("parents must share their factor order")
    if any(not 0 < c < len(a) for c in cuts):
        raise SearchError("cut points must fall between factors")
    left, right = [], []
    swap = False
    for i, ((f, pa), (_, pb)) in enumerate(zip(a, b)):
        if i in cuts:
            swap = not swap
        left.append((f, pb if swap else pa))
        right.append((f, pa if swap else pb))
    return CollapsingScheme(tuple(left)), CollapsingScheme(tuple(right))


def _tournament(pop: list[FittedModel], size: int, rng) -> FittedModel:
    picks = rng.integers(len(pop), size=size)
    return min((pop[i] for i in picks), key=_rank_key)


def _crossover(a: CollapsingScheme, b: CollapsingScheme, spaces, movable, rng):
    if len(movable) >= 2:
        positions = [a.factors.index(f) for f in movable]
        boundaries = positions[1:]
        n_cuts = int(rng.integers(1, len(boundaries) + 1))
        cuts = rng.choice(boundaries, size=n_cuts, replace=False)
        return crossover_schemes(a, b, [int(c) for c in cuts])
    if len(movable) == 1:
        f = movable[0]
        pa, pb = a[f], b[f]
        if pa.n < 2:
            return a, b
        point = int(rng.integers(1, pa.n))
        ca, cb = crossover_codes(pa.codes, pb.codes, point)
        ra = repair(spaces[f], ca.codes) or pa
        rb = repair(spaces[f], cb.codes) or pb
        return a.replace(f, ra), b.replace(f, rb)
    return a, b


def ga_search(
    problem: Problem | Evaluator,
    spaces: Mapping[str, PartitionSpace] | None = None,
    cfg: GAConfig = GAConfig(),
    progress: Progress | None = None,
) -> SearchResult:
    """Genetic algorithm over concatenated graycodes.

    Tournament selection on BIC with elitism; crossover cuts at factor
    boundaries when several factors are collapsed and inside the graycode
    when only one is; mutation replaces one factor's partition by a random
    one-move neighbour.
    """
    ev = _evaluator(problem)
    spaces = _ordered_spaces(ev, spaces)
    movable = _movable(spaces)
    rng = _derived_rng(cfg.rng_seed)
    visited: dict[CollapsingScheme, FittedModel] = {}
    trace: list[float] = []

    def evaluate(schemes):
        models = ev.many(schemes)
        for m in models:
            visited[m.scheme] = m
        return models

    seen, initial = set(), []
    for _ in range(cfg.population_size * 20):
        s = random_scheme(spaces, rng)
        if s not in seen:
            seen.add(s)
            initial.append(s)
        if len(initial) == cfg.population_size:
            break
    while len(initial) < cfg.population_size:
        initial.append(random_scheme(spaces, rng))
    population = sorted(evaluate(initial), key=_rank_key)
    best = population[0].bic
    trace.append(best)

    for gen in range(cfg.generations):
        children: list[CollapsingScheme] = []
        need = cfg.population_size - cfg.elitism_count
        while len(children) < need:
            pa = _tournament(population, cfg.tournament_size, rng).scheme
            pb = _tournament(population, cfg.tournament_size, rng).scheme
            if rng.random() < cfg.crossover_rate:
                ca, cb = _crossover(pa, pb, spaces, movable, rng)
            else:
                ca, cb = pa, pb
            for child in (ca, cb):
                if rng.random() < cfg.mutation_rate:
                    child = random_neighbor(child, spaces, rng, movable)
                children.append(child)
        children = children[:need]
        population = sorted(population[:cfg.elitism_count] + evaluate(children), key=_rank_key)
        best = min(best, population[0].bic)
        trace.append(population[0].bic)
        if progress:
            progress({"event": "ga", "generation": gen, "population_best_bic": population[0].bic,
                      "best_bic": best, "visited": len(visited)})
    return SearchResult(visited, trace, "ga", [population[0].scheme])


# -- truncation -------------------------------------------------------------


def top_k(
    models: SearchResult | Iterable[FittedModel],
    k: int | None = None,
    mass: float | None = None,
    window: float | None = None,
) -> list[FittedModel]:
    """Best models by BIC, truncated by count, posterior mass or Occam's window.

    ``mass`` keeps the shortest prefix whose posterior weight (computed over
    every finite-BIC model supplied) reaches the cutoff. ``window`` keeps the
    models whose weight is within a factor ``window`` of the best one. When
    several rules are given the shortest resulting list wins.
    """
    if isinstance(models, SearchResult):
        ranked = models.ranked()
    else:
        ranked = sorted((m for m in models if math.isfinite(m.bic)), key=_rank_key)
    if not ranked:
        raise SearchError("no fitted models to rank")
    keep = len(ranked)
    if k is not None:
        if k < 1:
            raise SearchError("k must be at least 1")
        keep = min(keep, k)
    bics = np.array([m.bic for m in ranked])
    if mass is not None:
        if not 0 < mass <= 1:
            raise SearchError("mass must lie in (0, 1]")
        w = np.exp(-(bics - bics[0]) / 2.0)
        cum = np.cumsum(w / w.sum())
        keep = min(keep, int(np.searchsorted(cum, mass - 1e-12)) + 1)
    if window is not None:
        if window < 1:
            raise SearchError("window must be at least 1")
        # weight ratio best/other = exp((bic - best)/2)
        keep = min(keep, int(np.sum((bics - bics[0]) / 2.0 <= math.log(window))))
    return ranked[:keep]
