"""Parameterized membership functions, Schweizer-Sklar operators and
Takagi-Sugeno inference.

All values here are immutable; a :class:`FuzzyInferenceSystem` compiles its
evaluation plan once and can then be shared between threads.
"""

import enum
import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from evonf import _engine
from evonf.errors import (
    EmptyDataset,
    MalformedRule,
    NoActiveRules,
    UnsupportedFisKind,
)

P_MIN = 1e-3
P_MAX = 50.0
PARAM_FLOOR = 1e-3
FIRE_EPS = _engine.FIRE_EPS
MIN_MF = 2
MAX_MF = 4


class Shape(enum.Enum):
    BELL = "bell"
    GAUSSIAN = "gaussian"


class FisKind(enum.Enum):
    TAKAGI_SUGENO = "takagi_sugeno"
    MAMDANI = "mamdani"
    TSUKAMOTO = "tsukamoto"


@dataclass(frozen=True)
class BellMF:
    """Generalized bell ``1 / (1 + |(x - r) / p|^(2q))``."""

    p: float
    q: float
    r: float

    shape = Shape.BELL
    param_names = ("p", "q", "r")

    def __post_init__(self):
        object.__setattr__(self, "p", max(float(self.p), PARAM_FLOOR))
        object.__setattr__(self, "q", max(float(self.q), PARAM_FLOOR))
        object.__setattr__(self, "r", float(self.r))

    @property
    def center(self):
        return self.r

    @property
    def params(self):
        return (self.p, self.q, self.r)

    def with_params(self, params):
        return BellMF(*params)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = np.abs(x - self.r) / self.p
        with np.errstate(divide="ignore", over="ignore"):
            u = np.exp(2.0 * self.q * np.log(z))
        out = 1.0 / (1.0 + u)
        return float(out) if out.ndim == 0 else out

    def partials(self, x):
        """Degrees and d(degree)/d(p, q, r) for every element of ``x``."""
        x = np.asarray(x, dtype=float)
        d = x - self.r
        z = np.abs(d) / self.p
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            log_z = np.log(z)
            u = np.exp(2.0 * self.q * log_z)
            mu = 1.0 / (1.0 + u)
            m2u = mu * mu * u
            dp = m2u * 2.0 * self.q / self.p
            dq = np.where(z > 0, -2.0 * m2u * log_z, 0.0)
            dr = np.where(d != 0, 2.0 * self.q * m2u / np.where(d != 0, d, 1.0), 0.0)
        # u overflowing to inf means mu == 0 and a flat tail
        grads = np.stack([dp, dq, dr], axis=-1)
        grads = np.where(np.isfinite(grads), grads, 0.0)
        return mu, grads


@dataclass(frozen=True)
class GaussianMF:
    """Gaussian ``exp(-(x - mu)^2 / (2 sigma^2))``."""

    mu: float
    sigma: float

    shape = Shape.GAUSSIAN
    param_names = ("mu", "sigma")

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma", max(float(self.sigma), PARAM_FLOOR))

    @property
    def center(self):
        return self.mu

    @property
    def params(self):
        return (self.mu, self.sigma)

    def with_params(self, params):
        return GaussianMF(*params)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.exp(-((x - self.mu) ** 2) / (2.0 * self.sigma**2))
        return float(out) if out.ndim == 0 else out

    def partials(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.mu
        mu = np.exp(-(d**2) / (2.0 * self.sigma**2))
        grads = np.stack([mu * d / self.sigma**2, mu * d**2 / self.sigma**3], axis=-1)
        return mu, grads


MembershipFunction = BellMF | GaussianMF


@dataclass(frozen=True)
class FuzzyVariable:
    name: str
    universe: tuple
    partitions: tuple

    def __post_init__(self):
        lo, hi = (float(v) for v in self.universe)
        if not lo < hi:
            raise ValueError(f"universe of {self.name!r} must satisfy lo < hi")
        object.__setattr__(self, "universe", (lo, hi))
        object.__setattr__(self, "partitions", tuple(self.partitions))
        if not MIN_MF <= len(self.partitions) <= MAX_MF:
            raise ValueError(
                f"{self.name!r} needs {MIN_MF}-{MAX_MF} membership functions, "
                f"got {len(self.partitions)}"
            )
        for mf in self.partitions:
            if not lo <= mf.center <= hi:
                raise ValueError(f"center {mf.center} outside universe of {self.name!r}")


@dataclass(frozen=True)
class OperatorParams:
    tnorm_p: float = 1.0
    tconorm_p: float = 1.0
    fixed_min: bool = False

    def __post_init__(self):
        for name in ("tnorm_p", "tconorm_p"):
            value = float(getattr(self, name))
            if not P_MIN <= value <= P_MAX:
                raise ValueError(f"{name}={value} outside [{P_MIN}, {P_MAX}]")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class FuzzyRule:
    """One rule: a bitmask per input variable plus a linear consequent.

    ``consequent`` is ``(p_0, p_1, ..., p_n)``: intercept first.  A rule whose
    masks are all zero cannot fire and is forced inactive.
    """

    antecedent: tuple
    consequent: tuple
    active: bool = True

    def __post_init__(self):
        masks = tuple(tuple(int(bool(b)) for b in m) for m in self.antecedent)
        object.__setattr__(self, "antecedent", masks)
        object.__setattr__(self, "consequent", tuple(float(c) for c in self.consequent))
        if len(self.consequent) != len(masks) + 1:
            raise ValueError("consequent needs one coefficient per input plus an intercept")
        if self.active and not any(any(m) for m in masks):
            object.__setattr__(self, "active", False)

    @property
    def is_empty(self):
        return not any(any(m) for m in self.antecedent)

    def output(self, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.consequent)
        return c[0] + x @ c[1:]


@dataclass(frozen=True)
class FuzzyInferenceSystem:
    inputs: tuple
    rules: tuple
    operators: OperatorParams = field(default_factory=OperatorParams)
    kind: FisKind = FisKind.TAKAGI_SUGENO

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "rules", tuple(self.rules))
        widths = [len(v.partitions) for v in self.inputs]
        for i, rule in enumerate(self.rules):
            if [len(m) for m in rule.antecedent] != widths:
                raise ValueError(f"rule {i} masks do not match partition widths {widths}")
        if not any(r.active for r in self.rules):
            raise NoActiveRules("a fuzzy inference system needs at least one active rule")

    @property
    def n_inputs(self):
        return len(self.inputs)

    @property
    def active_rules(self):
        return [r for r in self.rules if r.active]

    @property
    def mf_counts(self):
        return tuple(len(v.partitions) for v in self.inputs)

    @functools.cached_property
    def plan(self):
        if self.kind is not FisKind.TAKAGI_SUGENO:
            raise UnsupportedFisKind(f"{self.kind.value} inference is not executable")
        return _engine.Plan(self)

    def predict(self, x):
        """Outputs for a ``(samples, n_inputs)`` matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _engine.forward(self.plan, x).y

    def replace_partitions(self, partitions):
        """Copy with new membership functions (``partitions[v]`` per input)."""
        inputs = tuple(
            replace(var, partitions=tuple(parts))
            for var, parts in zip(self.inputs, partitions)
        )
        return replace(self, inputs=inputs)


def mf_eval(mf, x):
    return mf(x)


def _check_degrees(*values):
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"degree {v} outside [0, 1]")


def tnorm(a, b, params):
    """Schweizer-Sklar T-norm ``[max(0, a^-p + b^-p - 1)]^(-1/p)``.

    Falls back to ``min(a, b)`` when ``params.fixed_min``.  A zero argument
    yields 0, the limit of the formula.
    """
    _check_degrees(a, b)
    if params.fixed_min:
        return min(a, b)
    return float(_engine.ss_reduce(np.array([a, b]), params.tnorm_p))


def tconorm(a, b, params):
    """De Morgan dual ``1 - T(1 - a, 1 - b)`` with the T-conorm parameter."""
    _check_degrees(a, b)
    if params.fixed_min:
        return max(a, b)
    return 1.0 - float(_engine.ss_reduce(np.array([1.0 - a, 1.0 - b]), params.tconorm_p))


def _tnorm_all(values, params):
    if params.fixed_min:
        return min(values)
    return float(_engine.ss_reduce(np.asarray(values, dtype=float), params.tnorm_p))


def _tconorm_all(values, params):
    if params.fixed_min:
        return max(values)
    comp = 1.0 - np.asarray(values, dtype=float)
    return 1.0 - float(_engine.ss_reduce(comp, params.tconorm_p))


def firing_strength(rule, x, fis):
    """Degree to which ``x`` matches the antecedent of ``rule``.

    Labels selected for the same variable are OR-ed with the T-conorm, and
    the per-variable degrees are AND-ed with the T-norm.  Variables with an
    empty mask do not take part.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (fis.n_inputs,):
        raise ValueError(f"expected {fis.n_inputs} inputs, got shape {x.shape}")
    if rule.is_empty:
        raise MalformedRule("rule selects no fuzzy set on any variable")
    per_variable = []
    for value, var, mask in zip(x, fis.inputs, rule.antecedent):
        degrees = [mf(value) for mf, bit in zip(var.partitions, mask) if bit]
        if degrees:
            per_variable.append(_tconorm_all(degrees, fis.operators))
    return _tnorm_all(per_variable, fis.operators)


def ts_evaluate(fis, x):
    """Weighted-average Takagi-Sugeno output.

    ``x`` may be one input vector (returns a float) or a matrix of them.
    When the total firing strength is below ``FIRE_EPS`` the plain mean of
    the rule outputs is returned instead.
    """
    if fis.kind is not FisKind.TAKAGI_SUGENO:
        raise UnsupportedFisKind(f"{fis.kind.value} inference is not executable")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != fis.n_inputs:
            raise ValueError(f"expected {fis.n_inputs} inputs, got {x.shape[0]}")
        return float(fis.predict(x[None, :])[0])
    return fis.predict(x)


def rmse(fis, data):
    """Root mean squared error of ``fis`` on a dataset with ``inputs``/``targets``."""
    targets = np.asarray(data.targets, dtype=float)
    if targets.size == 0:
        raise EmptyDataset("cannot compute RMSE on an empty dataset")
    pred = ts_evaluate(fis, np.asarray(data.inputs, dtype=float).reshape(len(targets), -1))
    return math.sqrt(float(np.mean((pred - targets) ** 2)))
