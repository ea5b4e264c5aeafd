import math

import numpy as np
import pytest

from fcbma.data import Dataset
from fcbma.glm import ModelTemplate, Problem, rejected_model
from fcbma.partition import ConstraintSet, Partition, PartitionSpace
from fcbma.scheme import CollapsingScheme
from fcbma.search import (Evaluator, GAConfig, SAConfig, SearchError, SearchResult, crossover_codes,
                          crossover_schemes, exhaustive_search, ga_search, random_neighbor, sa_search, top_k)


def make_problem(levels=(5, 4), n=6000, seed=0, truth=("12233", "1123"), constraints=None):
    rng = np.random.default_rng(seed)
    names = [f"F{i}" for i in range(len(levels))]
    eta = np.full(n, -1.5)
    codes = {}
    for f, k, t in zip(names, levels, truth):
        c = rng.integers(k, size=n)
        block = np.asarray(Partition.parse(t).codes)[c]
        eta += 0.35 * (block - 1)
        codes[f] = c
    e = rng.uniform(0.5, 2.0, n)
    y = rng.poisson(e * np.exp(eta))
    d = Dataset({"y": y, "e": e}, codes, {f: tuple(str(i + 1) for i in range(k)) for f, k in zip(names, levels)})
    return Problem(d, ModelTemplate("poisson", "y", tuple(names), exposure="e", constraints=constraints or {}))


@pytest.fixture(scope="module")
def small():
    return Evaluator(make_problem())


@pytest.fixture(scope="module")
def small_exhaustive(small):
    return exhaustive_search(small)


def test_exhaustive_visits_everything(small_exhaustive):
    assert len(small_exhaustive.visited) == 52 * 15
    best = small_exhaustive.best
    assert best.bic == min(m.bic for m in small_exhaustive.visited.values())
    assert best.scheme["F0"].graycode() == "12233"


def test_exhaustive_single_level():
    d = Dataset({"y": np.array([1.0, 3.0])}, {"A": np.zeros(2, int)}, {"A": ("only",)})
    r = exhaustive_search(Problem(d, ModelTemplate("poisson", "y", ("A",))))
    assert len(r.visited) == 1
    assert r.best_scheme["A"] == Partition.trivial(1)


def test_exhaustive_ceiling():
    with pytest.raises(SearchError, match="sa_search or ga_search"):
        exhaustive_search(make_problem(), ceiling=100)


def test_exhaustive_parallel_is_identical(small_exhaustive):
    ev = Evaluator(make_problem(), threads=4)
    r = exhaustive_search(ev)
    assert {s: m.bic for s, m in r.visited.items()} == {s: m.bic for s, m in small_exhaustive.visited.items()}


def test_exhaustive_respects_constraints():
    cs = {"F0": ConstraintSet.from_one_based(must_link=[(2, 3)], cannot_link=[(1, 5)])}
    prob = make_problem(constraints=cs)
    r = exhaustive_search(prob, prob.spaces(["F0"]))
    assert len(r.visited) == PartitionSpace(5, cs["F0"]).size
    assert all(cs["F0"].admits(s["F0"]) for s in r.visited)


def test_evaluator_memo_and_rejections():
    prob = make_problem()
    ev = Evaluator(prob)
    s = prob.identity_scheme()
    m1 = ev(s)
    m2 = ev(s)
    assert m1 is m2 and ev.n_fits == 1
    # a factor level that never occurs makes its own block unfittable
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 3, 200)
    data = Dataset({"y": rng.poisson(2.0, 200).astype(float)}, {"A": codes}, {"A": ("a", "b", "c", "d")})
    ev2 = Evaluator(Problem(data, ModelTemplate("poisson", "y", ("A",))))
    bad = ev2(CollapsingScheme.of({"A": Partition.identity(4)}))
    assert bad.bic == math.inf and not bad.converged
    r = exhaustive_search(ev2)
    assert r.best.bic < math.inf
    # the unobserved level can only appear merged into an observed block
    assert all(any(s["A"].same_block(3, j) for j in range(3))
               for s, m in r.visited.items() if math.isfinite(m.bic))


def test_sa_finds_optimum(small, small_exhaustive):
    spaces = small.problem.spaces(["F0"])
    opt = exhaustive_search(small, spaces).best
    r = sa_search(small, spaces, SAConfig(restarts=2, iterations_per_temperature=20, rng_seed=3))
    assert r.best.bic == pytest.approx(opt.bic, abs=1e-9)
    assert r.best_scheme["F0"].graycode() == "12233"


def test_sa_deterministic(small):
    cfg = SAConfig(restarts=2, iterations_per_temperature=10, cooling_factor=0.8, rng_seed=9)
    a = sa_search(Evaluator(small.problem), None, cfg)
    b = sa_search(Evaluator(small.problem), None, cfg)
    assert a.trace == b.trace
    assert a.best_scheme == b.best_scheme
    assert list(a.visited) == list(b.visited)


def test_sa_zero_temperature_is_greedy(small):
    spaces = small.problem.spaces()
    cfg = SAConfig(initial_temperature=1e-3, min_temperature=1e-3, iterations_per_temperature=3000,
                   restarts=3, rng_seed=1)
    r = sa_search(small, spaces, cfg)
    for final in r.finals:
        here = small(final).bic
        for f in final.factors:
            for q in spaces[f].neighbors(final[f]):
                assert small(final.replace(f, q)).bic >= here


def test_sa_trace_monotone(small):
    r = sa_search(small, None, SAConfig(restarts=2, iterations_per_temperature=10, cooling_factor=0.8))
    assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))


def test_sa_config_validation():
    with pytest.raises(SearchError):
        SAConfig(cooling_factor=1.0)
    with pytest.raises(SearchError):
        SAConfig(initial_temperature=0.0)
    with pytest.raises(SearchError):
        SAConfig(restarts=0)


def test_ga_config_validation():
    with pytest.raises(SearchError):
        GAConfig(population_size=3)
    with pytest.raises(SearchError):
        GAConfig(population_size=10, elitism_count=10)
    with pytest.raises(SearchError):
        GAConfig(tournament_size=1)
    with pytest.raises(SearchError):
        GAConfig(mutation_rate=1.5)


def test_crossover_within_string():
    a, b = crossover_codes([int(c) for c in "122324536"], [int(c) for c in "111213425"], 5)
    assert a.graycode() == "122323425"
    assert b.graycode() == "111213456"
    with pytest.raises(SearchError):
        crossover_codes([1, 2], [1, 1], 0)


def test_crossover_factor_boundaries():
    p = {k: Partition.parse(v) for k, v in {"a": "12", "b": "123", "c": "1"}.items()}
    q = {k: Partition.parse(v) for k, v in {"a": "11", "b": "111", "c": "1"}.items()}
    s1, s2 = CollapsingScheme.of(p), CollapsingScheme.of(q)
    c1, c2 = crossover_schemes(s1, s2, [1])
    assert c1["a"] == p["a"] and c1["b"] == q["b"]
    assert c2["a"] == q["a"] and c2["b"] == p["b"]
    c1, _ = crossover_schemes(s1, s2, [1, 2])
    assert c1["b"] == q["b"] and c1["c"] == p["c"]


def test_mutation_is_one_neighbor_move(small):
    spaces = small.problem.spaces()
    rng = np.random.default_rng(0)
    s = small.problem.identity_scheme()
    for _ in range(100):
        t = random_neighbor(s, spaces, rng)
        changed = [f for f in s.factors if s[f] != t[f]]
        assert len(changed) == 1
        assert t[changed[0]] in spaces[changed[0]].neighbors(s[changed[0]])
        s = t


def test_ga_finds_optimum(small, small_exhaustive):
    r = ga_search(small, None, GAConfig(rng_seed=4))
    assert r.best.bic == pytest.approx(small_exhaustive.best.bic, abs=1e-9)


def test_ga_elitism_never_worsens(small):
    cfg = GAConfig(population_size=8, generations=30, crossover_rate=0.0, mutation_rate=0.0,
                   elitism_count=7, rng_seed=2)
    r = ga_search(small, None, cfg)
    assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))


def test_ga_deterministic_under_threads(small):
    cfg = GAConfig(population_size=12, generations=15, rng_seed=6)
    a = ga_search(Evaluator(small.problem, threads=1), None, cfg)
    b = ga_search(Evaluator(small.problem, threads=4), None, cfg)
    assert a.trace == b.trace and a.best_scheme == b.best_scheme


def test_ga_respects_constraints():
    cs = {"F0": ConstraintSet.from_one_based(must_link=[(1, 2)], cannot_link=[(2, 3)])}
    prob = make_problem(constraints=cs)
    r = ga_search(prob, None, GAConfig(population_size=16, generations=20, mutation_rate=0.5, rng_seed=1))
    assert all(cs["F0"].admits(s["F0"]) for s in r.visited)


def test_ga_single_factor_with_candidates():
    prob = make_problem()
    cands = (Partition.parse("12233"), Partition.parse("12345"), Partition.parse("11111"))
    spaces = {"F0": PartitionSpace(5, candidates=cands), "F1": PartitionSpace(4, candidates=(Partition.identity(4),))}
    r = ga_search(prob, spaces, GAConfig(population_size=6, generations=5, rng_seed=0))
    assert {s["F0"] for s in r.visited} <= set(cands)


def test_stochastic_matches_exhaustive_statistically():
    ev = Evaluator(make_problem(levels=(5, 4), seed=3, truth=("11223", "1233")))
    opt = exhaustive_search(ev).best.bic
    sa_hits = sum(
        abs(sa_search(ev, None, SAConfig(restarts=3, rng_seed=s)).best.bic - opt) < 1e-9 for s in range(20))
    ga_hits = sum(
        abs(ga_search(ev, None, GAConfig(rng_seed=s)).best.bic - opt) < 1e-9 for s in range(20))
    assert sa_hits >= 18 and ga_hits >= 18


# -- truncation ------------------------------------------------------------


def fake_models(bics):
    out = []
    for i, b in enumerate(bics):
        s = CollapsingScheme.of({"A": Partition.parse("1" * (i + 1) + "2")}) if i < 8 else None
        m = rejected_model(s, "poisson", {}, 10)
        out.append(type(m)(**{**m.__dict__, "bic": float(b)}))
    return out


def test_top_k_window():
    kept = top_k(fake_models([10, 12, 30]), window=20)
    assert [m.bic for m in kept] == [10, 12]


def test_top_k_count_and_order():
    models = fake_models([30, 10, 12, math.inf])
    assert [m.bic for m in top_k(models, k=1)] == [10]
    assert [m.bic for m in top_k(models)] == [10, 12, 30]


def test_top_k_mass():
    # cumulative weights 0.7788, 0.9526, 0.9914, 1.0000 for integer BICs spaced by 3
    models = fake_models([161, 164, 167, 170, 198])
    assert len(top_k(models, mass=0.95)) == 2
    assert len(top_k(models, mass=0.99)) == 3
    assert len(top_k(models, mass=0.999)) == 4


def test_top_k_errors():
    with pytest.raises(SearchError):
        top_k([])
    with pytest.raises(SearchError):
        top_k(SearchResult({}))
