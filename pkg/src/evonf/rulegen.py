"""Initial rule bases: evenly spaced partitions and grid partitioning."""

import itertools
import math

from evonf.errors import InvalidCount
from evonf.fuzzy_core import MAX_MF, MIN_MF, BellMF, FuzzyRule, GaussianMF, Shape

DEFAULT_BELL_Q = 2.0


def default_partition(universe, m, shape=Shape.GAUSSIAN):
    """``m`` evenly spaced MFs over ``universe``; neighbours cross at 0.5."""
    if not MIN_MF <= m <= MAX_MF:
        raise InvalidCount(f"partition size must be in [{MIN_MF}, {MAX_MF}], got {m}")
    lo, hi = (float(v) for v in universe)
    if not lo < hi:
        raise ValueError("universe must satisfy lo < hi")
    step = (hi - lo) / (m - 1)
    centers = [lo + k * step for k in range(m)]
    if shape is Shape.BELL:
        return [BellMF(0.5 * step, DEFAULT_BELL_Q, c) for c in centers]
    sigma = step / 2.0 / math.sqrt(2.0 * math.log(2.0))
    return [GaussianMF(c, sigma) for c in centers]


def grid_rule_labels(counts):
    """Label-index tuples of the full grid, in lexicographic order."""
    return list(itertools.product(*(range(m) for m in counts)))


def grid_partition(variables, consequent_init=None):
    """One active rule per combination of one label from each variable.

    ``consequent_init`` is an optional coefficient template copied into every
    rule; by default all coefficients start at zero.
    """
    counts = [len(v.partitions) for v in variables]
    if consequent_init is None:
        consequent_init = (0.0,) * (len(variables) + 1)
    rules = []
    for labels in grid_rule_labels(counts):
        masks = tuple(
            tuple(int(j == label) for j in range(m)) for label, m in zip(labels, counts)
        )
        rules.append(FuzzyRule(masks, tuple(consequent_init)))
    return rules
