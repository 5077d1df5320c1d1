"""Generational real-coded evolutionary algorithm.

Linear-rank roulette selection, elitism, uniform/arithmetic crossover and a
non-uniform mutation whose step distribution concentrates near zero as the
run proceeds.  Every random decision draws from a substream keyed by
``(master_seed, generation, index)``, so a run is reproducible no matter how
many threads evaluate fitness.
"""

import csv
import enum
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from evonf.errors import FitnessError, SpecMismatch


class GeneKind(enum.IntEnum):
    REAL = 0
    INTEGER = 1
    BINARY = 2
    CATEGORICAL = 3


@dataclass(frozen=True, eq=False)
class GeneSpace:
    """Per-gene bounds ``[lower, upper]``, kinds and a frozen mask.

    Frozen genes keep their initial value: they are never mutated and both
    children inherit them unchanged.
    """

    lower: np.ndarray
    upper: np.ndarray
    kinds: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        kinds = np.asarray(self.kinds, dtype=np.int8)
        frozen = (
            np.zeros(lower.shape, dtype=bool)
            if self.frozen is None
            else np.asarray(self.frozen, dtype=bool)
        )
        if not (lower.shape == upper.shape == kinds.shape == frozen.shape) or lower.ndim != 1:
            raise ValueError("gene space arrays must be 1-D and of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("gene bounds must be finite")
        if np.any(lower >= upper):
            raise ValueError("every gene needs lower < upper")
        for name, arr in (("lower", lower), ("upper", upper), ("kinds", kinds), ("frozen", frozen)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.lower.shape[0]

    @property
    def gene_space(self):
        return self

    @property
    def discrete(self):
        return self.kinds != GeneKind.REAL

    def random_vector(self, rng):
        real = self.lower + rng.random(len(self)) * (self.upper - self.lower)
        ints = np.floor(self.lower + rng.random(len(self)) * (self.upper - self.lower + 1.0))
        ints = np.minimum(ints, self.upper)
        return np.where(self.discrete, ints, real)

    def wrap(self, vector):
        return vector

    def unwrap(self, item):
        return item

    def contains(self, vector):
        v = np.asarray(vector, dtype=float)
        ok = np.all((v >= self.lower) & (v <= self.upper))
        ints = v[self.discrete]
        return bool(ok and np.all(ints == np.round(ints)))


@dataclass(frozen=True)
class EAConfig:
    population_size: int = 30
    generations: int = 60
    rank_pressure: float = 0.5
    elitism_fraction: float = 0.05
    mutation_rate_start: float = 0.70
    mutation_rate_floor: float = 0.05
    mutation_shape: float = 5.0
    crossover_rate: float = 0.9
    master_seed: int = 0
    target_fitness: float = None
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0.0 <= self.elitism_fraction < 1.0:
            raise ValueError("elitism_fraction must be in [0, 1)")
        for name in ("rank_pressure", "mutation_rate_start", "mutation_rate_floor", "crossover_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.mutation_shape < 1.0:
            raise ValueError("mutation_shape must be >= 1")

    @property
    def n_elites(self):
        return math.ceil(self.elitism_fraction * self.population_size)


@dataclass
class Individual:
    genome: object
    fitness: float = math.inf
    evaluated: bool = False


@dataclass
class GenerationStats:
    generation: int
    best_rmse: float
    mean_rmse: float
    active_rules: object
    elapsed_ms: float


@dataclass
class RunHistory:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def best(self):
        return [r.best_rmse for r in self.rows]

    def to_csv(self, path, timing=False):
        """One row per generation.  ``elapsed_ms`` is blank unless ``timing``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["generation", "best_rmse", "mean_rmse", "active_rules", "elapsed_ms"])
            for r in self.rows:
                writer.writerow([
                    r.generation,
                    repr(float(r.best_rmse)),
                    repr(float(r.mean_rmse)),
                    "" if r.active_rules is None else r.active_rules,
                    f"{r.elapsed_ms:.3f}" if timing else "",
                ])


def linear_rank_probabilities(n, pressure):
    """Selection probability per rank, best first.

    Linear ranking with ``eta+ = 1 + pressure`` for the best and
    ``eta- = 1 - pressure`` for the worst individual.
    """
    if n < 2:
        raise ValueError("need at least two individuals to rank")
    hi, lo = 1.0 + pressure, 1.0 - pressure
    k = np.arange(n)
    probs = (hi - (hi - lo) * k / (n - 1)) / n
    return probs / probs.sum()


def mutation_rate(t, cfg):
    """Per-gene mutation probability for generation ``t``."""
    decayed = cfg.mutation_rate_start * (1.0 - t / cfg.generations)
    return max(cfg.mutation_rate_floor, decayed)


def mutation_step(t, y, gamma, t_max, shape):
    """Non-uniform step ``y * (1 - gamma ** ((1 - t / t_max) ** shape))`` in [0, y]."""
    return y * (1.0 - gamma ** ((1.0 - t / t_max) ** shape))


def nonuniform_mutate(x, bounds, t, cfg, rng):
    """Mutate one real gene inside ``bounds = (a, b)``.

    An unbiased coin picks the direction; the step toward the chosen bound
    shrinks in distribution as ``t`` approaches ``cfg.generations``.
    """
    a, b = bounds
    toward_upper = rng.random() < 0.5
    gamma = rng.random()
    if toward_upper:
        out = x + mutation_step(t, b - x, gamma, cfg.generations, cfg.mutation_shape)
    else:
        out = x - mutation_step(t, x - a, gamma, cfg.generations, cfg.mutation_shape)
    return min(max(out, a), b)


def _as_vectors(parent_a, parent_b, space):
    if space is None:
        spec_a = getattr(parent_a, "spec", None)
        if spec_a is None or spec_a != getattr(parent_b, "spec", None):
            raise SpecMismatch("parents were built from different encodings")
        return parent_a.values, parent_b.values, spec_a.gene_space, spec_a.wrap
    a = np.asarray(parent_a, dtype=float)
    b = np.asarray(parent_b, dtype=float)
    if a.shape != b.shape or a.shape[0] != len(space):
        raise SpecMismatch("parent length does not match the gene space")
    return a, b, space, space.wrap


def crossover(parent_a, parent_b, rng, space=None):
    """Uniform crossover on discrete genes, whole-arithmetic on real genes.

    Accepts two Genomes (same encoding) or two vectors plus their ``space``.
    """
    a, b, space, wrap = _as_vectors(parent_a, parent_b, space)
    n = len(space)
    swap = (rng.random(n) < 0.5) & space.discrete
    beta = rng.random(n)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    mix_a = np.clip(beta * a + (1.0 - beta) * b, lo, hi)
    mix_b = np.clip((1.0 - beta) * a + beta * b, lo, hi)
    child_a = np.where(space.discrete, np.where(swap, b, a), mix_a)
    child_b = np.where(space.discrete, np.where(swap, a, b), mix_b)
    child_a = np.where(space.frozen, a, child_a)
    child_b = np.where(space.frozen, b, child_b)
    return wrap(child_a), wrap(child_b)


def mutate_vector(vector, space, t, cfg, rng):
    """Apply per-gene mutation with probability ``mutation_rate(t, cfg)``.

    Real genes take a non-uniform step; discrete genes are redrawn uniformly
    from their domain.
    """
    x = np.array(vector, dtype=float)
    n = len(space)
    hit = (rng.random(n) < mutation_rate(t, cfg)) & ~space.frozen
    toward_upper = rng.random(n) < 0.5
    gamma = rng.random(n)
    redraw = np.floor(space.lower + rng.random(n) * (space.upper - space.lower + 1.0))
    redraw = np.minimum(redraw, space.upper)
    up = mutation_step(t, space.upper - x, gamma, cfg.generations, cfg.mutation_shape)
    down = mutation_step(t, x - space.lower, gamma, cfg.generations, cfg.mutation_shape)
    real = np.clip(np.where(toward_upper, x + up, x - down), space.lower, space.upper)
    mutated = np.where(space.discrete, redraw, real)
    return np.where(hit, mutated, x)


def _evaluate(population, fitness_fn, space, cache, workers):
    todo = [ind for ind in population if not ind.evaluated]
    keys = [space.unwrap(ind.genome).tobytes() for ind in todo]
    fresh = {}
    jobs = []
    for ind, key in zip(todo, keys):
        if key not in cache and key not in fresh:
            fresh[key] = None
            jobs.append((key, ind.genome))

    def run(job):
        key, genome = job
        try:
            return float(fitness_fn(genome))
        except Exception as exc:  # re-raised with the genome attached
            raise FitnessError(f"fitness evaluation failed: {exc!r}", genome) from exc

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, jobs))
    else:
        values = [run(job) for job in jobs]
    for (key, _), value in zip(jobs, values):
        cache[key] = value
    for ind, key in zip(todo, keys):
        ind.fitness = cache[key]
        ind.evaluated = True


def _ranked(population):
    order = sorted(range(len(population)), key=lambda i: (population[i].fitness, i))
    return [population[i] for i in order]


def evolve(cfg, spec, fitness_fn, initial=(), describe=None):
    """Run the generational loop and return ``(best, history)``.

    ``spec`` is a :class:`GeneSpace` or anything exposing ``gene_space``,
    ``random_vector(rng)``, ``wrap(vector)`` and ``unwrap(item)`` (such as a
    genome encoding).  ``fitness_fn`` receives wrapped items and returns a
    non-negative error to minimize.  ``initial`` items seed the first
    generation; ``describe(item)`` fills the history's ``active_rules``
    column for the best individual.
    """
    space = spec.gene_space
    n = cfg.population_size
    t_max = cfg.generations
    seed = cfg.master_seed
    start = time.perf_counter()
    cache = {}
    history = RunHistory()

    population = [Individual(genome) for genome in list(initial)[:n]]
    for i in range(len(population), n):
        rng = np.random.default_rng([seed, 0, i])
        population.append(Individual(spec.wrap(spec.random_vector(rng))))

    def record(generation, ranked):
        fits = np.array([ind.fitness for ind in ranked])
        history.rows.append(GenerationStats(
            generation=generation,
            best_rmse=float(fits[0]),
            mean_rmse=float(np.mean(fits)),
            active_rules=None if describe is None else describe(ranked[0].genome),
            elapsed_ms=(time.perf_counter() - start) * 1000.0,
        ))

    _evaluate(population, fitness_fn, spec, cache, cfg.workers)
    ranked = _ranked(population)
    record(0, ranked)
    probs = linear_rank_probabilities(n, cfg.rank_pressure)
    n_elites = min(cfg.n_elites, n)

    for generation in range(1, t_max + 1):
        if cfg.target_fitness is not None and ranked[0].fitness <= cfg.target_fitness:
            break
        t = generation - 1
        nxt = [Individual(ind.genome, ind.fitness, True) for ind in ranked[:n_elites]]
        for i in range(n_elites, n, 2):
            rng = np.random.default_rng([seed, generation, i])
            pa, pb = rng.choice(n, size=2, p=probs)
            va = spec.unwrap(ranked[pa].genome)
            vb = spec.unwrap(ranked[pb].genome)
            if rng.random() < cfg.crossover_rate:
                va, vb = crossover(va, vb, rng, space)
            for v in (va, vb)[: n - i]:
                nxt.append(Individual(spec.wrap(mutate_vector(v, space, t, cfg, rng))))
        _evaluate(nxt, fitness_fn, spec, cache, cfg.workers)
        ranked = _ranked(nxt)
        record(generation, ranked)

    return ranked[0], history
