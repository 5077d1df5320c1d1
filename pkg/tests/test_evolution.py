import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evonf.errors import FitnessError, SpecMismatch
from evonf.evolution import (
    EAConfig,
    GeneKind,
    GeneSpace,
    crossover,
    evolve,
    linear_rank_probabilities,
    mutate_vector,
    mutation_rate,
    mutation_step,
    nonuniform_mutate,
)
from evonf.genome import EncodingSpec, random_genome


def real_space(n=10, lo=-5.0, hi=5.0):
    return GeneSpace(np.full(n, lo), np.full(n, hi), np.zeros(n, dtype=np.int8))


def mixed_space():
    kinds = np.array([GeneKind.REAL] * 4 + [GeneKind.BINARY] * 3 + [GeneKind.INTEGER] * 2, dtype=np.int8)
    lower = np.array([-1, 0, 2, -10, 0, 0, 0, 2, 0], dtype=float)
    upper = np.array([1, 5, 3, 10, 1, 1, 1, 4, 2], dtype=float)
    return GeneSpace(lower, upper, kinds)


def sphere(v):
    return float(np.sum(np.asarray(v) ** 2))


class _FixedRng:
    """Stand-in generator returning a fixed value from ``random``."""

    def __init__(self, value):
        self.value = value

    def random(self, size=None):
        return self.value if size is None else np.full(size, self.value)


# rank selection

def test_rank_probabilities_examples():
    np.testing.assert_allclose(linear_rank_probabilities(5, 0.0), np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(linear_rank_probabilities(2, 0.5), [0.75, 0.25], atol=1e-15)
    p = linear_rank_probabilities(30, 0.5)
    assert p[0] == pytest.approx(1.5 / 30) and p[-1] == pytest.approx(0.5 / 30)


@given(st.integers(2, 500), st.floats(0.0, 1.0))
def test_rank_probabilities_normalized(n, pressure):
    p = linear_rank_probabilities(n, pressure)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(np.diff(p) <= 1e-15)


def test_rank_probabilities_need_two():
    with pytest.raises(ValueError):
        linear_rank_probabilities(1, 0.5)


# crossover

def test_crossover_equal_parents():
    space = mixed_space()
    v = space.random_vector(np.random.default_rng(0))
    a, b = crossover(v, v, np.random.default_rng(1), space)
    np.testing.assert_array_equal(a, v)
    np.testing.assert_array_equal(b, v)


def test_crossover_identity_draw():
    space = mixed_space()
    rng = np.random.default_rng(2)
    va, vb = space.random_vector(rng), space.random_vector(rng)
    # beta = 1 and no swaps (the swap test is ``u < 0.5``)
    a, b = crossover(va, vb, _FixedRng(1.0), space)
    np.testing.assert_array_equal(a, va)
    np.testing.assert_array_equal(b, vb)


def test_crossover_convex_real_genes():
    space = real_space(5)
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(10**5 // 5):
        va, vb = space.random_vector(rng), space.random_vector(rng)
        a, b = crossover(va, vb, rng, space)
        lo, hi = np.minimum(va, vb), np.maximum(va, vb)
        violations += int(np.sum((a < lo) | (a > hi)) + np.sum((b < lo) | (b > hi)))
    assert violations == 0


def test_crossover_discrete_genes_come_from_parents():
    space = mixed_space()
    rng = np.random.default_rng(4)
    disc = space.discrete
    for _ in range(500):
        va, vb = space.random_vector(rng), space.random_vector(rng)
        a, b = crossover(va, vb, rng, space)
        assert np.all((a[disc] == va[disc]) | (a[disc] == vb[disc]))
        # swapped genes go to the other child
        np.testing.assert_array_equal(np.sort(np.stack([a[disc], b[disc]]), axis=0),
                                      np.sort(np.stack([va[disc], vb[disc]]), axis=0))


def test_crossover_spec_mismatch():
    g1 = random_genome(EncodingSpec(1), np.random.default_rng(0))
    g2 = random_genome(EncodingSpec(2), np.random.default_rng(0))
    with pytest.raises(SpecMismatch):
        crossover(g1, g2, np.random.default_rng(0))
    with pytest.raises(SpecMismatch):
        crossover(np.zeros(3), np.zeros(4), np.random.default_rng(0), real_space(3))


def test_crossover_on_genomes_keeps_spec():
    spec = EncodingSpec(2)
    rng = np.random.default_rng(5)
    a, b = crossover(random_genome(spec, rng), random_genome(spec, rng), rng)
    assert a.spec == spec and spec.gene_space.contains(a.values) and spec.gene_space.contains(b.values)


# non-uniform mutation

def test_step_examples():
    assert mutation_step(10, 3.0, 0.3, 10, 5.0) == 0.0
    assert mutation_step(4, 3.0, 1.0, 10, 5.0) == 0.0
    assert mutation_step(0, 3.0, 0.0, 10, 5.0) == 3.0


def test_mutate_to_upper_bound_at_start():
    cfg = EAConfig(generations=10)

    class Rng:
        draws = iter([0.0, 0.0])  # coin toward the upper bound, gamma = 0

        def random(self):
            return next(self.draws)

    assert nonuniform_mutate(0.2, (-1.0, 2.0), 0, cfg, Rng()) == 2.0


def test_mutation_bounds_and_decay():
    cfg = EAConfig(generations=100, mutation_shape=5.0)
    rng = np.random.default_rng(6)
    a, b = -2.0, 3.0
    xs = rng.uniform(a, b, 10**5)
    outside = 0
    for x in xs[:2000]:
        y = nonuniform_mutate(x, (a, b), 37, cfg, rng)
        outside += not (a <= y <= b)
    assert outside == 0
    assert all(nonuniform_mutate(x, (a, b), 100, cfg, rng) == x for x in xs[:500])

    def mean_step(t):
        space = GeneSpace(np.full(xs.size, a), np.full(xs.size, b), np.zeros(xs.size, dtype=np.int8))
        always = EAConfig(generations=100, mutation_rate_start=1.0, mutation_rate_floor=1.0)
        y = mutate_vector(xs, space, t, always, rng)
        assert np.all((y >= a) & (y <= b))
        return np.mean(np.abs(y - xs))

    assert mean_step(90) < mean_step(10)


def test_mutation_rate_schedule():
    cfg = EAConfig(generations=60)
    assert mutation_rate(0, cfg) == pytest.approx(0.7)
    assert mutation_rate(30, cfg) == pytest.approx(0.35)
    assert mutation_rate(60, cfg) == 0.05


def test_mutation_rate_statistical():
    cfg = EAConfig(generations=60)
    n = 200_000
    space = real_space(n)
    x = np.zeros(n)
    rng = np.random.default_rng(7)
    for t in (0, 20, 45):
        y = mutate_vector(x, space, t, cfg, rng)
        rate = np.mean(y != x)
        assert rate == pytest.approx(mutation_rate(t, cfg), abs=5e-3)


def test_discrete_mutation_stays_in_domain():
    space = mixed_space()
    cfg = EAConfig(generations=10)
    rng = np.random.default_rng(8)
    v = space.random_vector(rng)
    for t in range(10):
        v = mutate_vector(v, space, t, cfg, rng)
        assert space.contains(v)


def test_frozen_genes_never_change():
    spec = EncodingSpec(1, fixed_min=True)
    space = spec.gene_space
    rng = np.random.default_rng(9)
    a, b = spec.random_vector(rng), spec.random_vector(rng)
    cfg = EAConfig(generations=5)
    c, d = crossover(a, b, rng, space)
    m = mutate_vector(c, space, 0, cfg, rng)
    frozen = space.frozen
    np.testing.assert_array_equal(m[frozen], a[frozen])
    np.testing.assert_array_equal(d[frozen], b[frozen])


# configuration

@pytest.mark.parametrize("kwargs", [
    {"population_size": 1}, {"generations": 0}, {"elitism_fraction": 1.0},
    {"rank_pressure": 1.5}, {"mutation_shape": 0.5}, {"crossover_rate": -0.1},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EAConfig(**kwargs)


def test_elite_count():
    assert EAConfig().n_elites == 2


# the generational loop

def test_constant_fitness():
    cfg = EAConfig(population_size=10, generations=5)
    best, hist = evolve(cfg, real_space(3), lambda v: 1.5)
    assert hist.best == [1.5] * 6
    assert best.fitness == 1.5


def test_sphere_converges():
    # the search is scale-equivariant: on [-s, s] the residual grows like s^2
    results = []
    for seed in (1, 2, 3):
        cfg = EAConfig(population_size=30, generations=60, master_seed=seed)
        best, hist = evolve(cfg, real_space(10, -1.0, 1.0), sphere)
        results.append(best.fitness)
    assert float(np.median(results)) <= 1e-2


def test_history_invariants():
    space = mixed_space()
    seen = []

    def fit(v):
        assert space.contains(v)
        seen.append(v)
        return sphere(v[:4]) + float(np.sum(v[4:]))

    cfg = EAConfig(population_size=12, generations=15, master_seed=4)
    best, hist = evolve(cfg, space, fit, describe=lambda v: int(v[-1]))
    assert len(hist) == 16
    assert all(b2 <= b1 for b1, b2 in zip(hist.best, hist.best[1:]))
    assert best.fitness == hist.best[-1]
    assert all(isinstance(r.active_rules, int) for r in hist.rows)


def test_population_size_constant(monkeypatch):
    import evonf.evolution as evolution

    sizes = []
    original = evolution._evaluate

    def spy(population, *args):
        sizes.append((len(population), sum(not ind.evaluated for ind in population)))
        return original(population, *args)

    monkeypatch.setattr(evolution, "_evaluate", spy)
    cfg = EAConfig(population_size=7, generations=4, master_seed=1)
    evolve(cfg, real_space(2), sphere)
    # ceil(0.05 * 7) = 1 elite is carried over without re-evaluation
    assert sizes == [(7, 7)] + [(7, 6)] * 4


def test_determinism_and_thread_independence():
    cfg = EAConfig(population_size=16, generations=12, master_seed=11)
    _, h1 = evolve(cfg, real_space(4), sphere)
    _, h2 = evolve(cfg, real_space(4), sphere)
    from dataclasses import replace

    _, h3 = evolve(replace(cfg, workers=4), real_space(4), sphere)
    assert h1.best == h2.best == h3.best
    assert [r.mean_rmse for r in h1.rows] == [r.mean_rmse for r in h3.rows]


def test_initial_individual_is_kept():
    space = real_space(3)
    cfg = EAConfig(population_size=6, generations=3, master_seed=0)
    best, hist = evolve(cfg, space, sphere, initial=[np.zeros(3)])
    assert hist.best[0] == 0.0 and best.fitness == 0.0


def test_fitness_error_carries_genome():
    def boom(v):
        raise RuntimeError("bad")

    with pytest.raises(FitnessError) as info:
        evolve(EAConfig(population_size=4, generations=1), real_space(2), boom)
    assert info.value.genome is not None


def test_history_csv(tmp_path):
    cfg = EAConfig(population_size=6, generations=3, master_seed=2)
    _, hist = evolve(cfg, real_space(2), sphere)
    path = tmp_path / "h.csv"
    hist.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["generation", "best_rmse", "mean_rmse", "active_rules", "elapsed_ms"]
    assert len(rows) == 5 and rows[1][4] == ""
    hist.to_csv(path, timing=True)
    assert float(list(csv.reader(open(path)))[-1][4]) >= 0


def test_evolve_over_genomes():
    spec = EncodingSpec(1)
    target = 0.12

    def fit(g):
        return abs(g.learning_rate - target)

    cfg = EAConfig(population_size=10, generations=10, master_seed=3)
    best, hist = evolve(cfg, spec, fit)
    assert spec.gene_space.contains(best.genome.values)
    assert best.fitness < 0.01
    assert math.isfinite(hist.best[-1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_elitism_on_random_seeds(seed):
    cfg = EAConfig(population_size=8, generations=8, master_seed=seed)
    _, hist = evolve(cfg, mixed_space(), lambda v: sphere(v) + 0.1 * np.sin(v[0] * 7))
    assert all(b2 <= b1 for b1, b2 in zip(hist.best, hist.best[1:]))
