"""Fixed-length layered chromosome and its mapping to fuzzy systems.

Gene layout, in order (``n`` inputs, ``M = max_mf``, ``R = M ** n`` rule
slots)::

    counts        n        integer in [2, M]      MFs per input
    shapes        n        categorical {0: bell, 1: gaussian}
    mf_params     n*M*3    real; per slot (width, slope, center)
    angles        R*(n+1)  real degrees; consequent (p_0, p_1..p_n) = tan(angle)
    rule_bits     R        binary; rule slot switched on
    label_masks   R*n*M    binary; label k of input v used by the rule
    operators     2        real in [P_MIN, P_MAX]; T-norm and T-conorm exponent
    learning_rate 1        real
    fis_kind      1        categorical, pinned to Takagi-Sugeno

A bell MF reads the slot as ``(p, q, r)``; a Gaussian reads ``width`` as
sigma and ``center`` as mu and ignores the slope.  Slot ``k`` of the rule
layer starts out as the ``k``-th label combination of the full ``M``-grid.
"""

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from evonf.errors import AngleOutOfRange, NoActiveRules, NotRepresentable
from evonf.evolution import GeneKind, GeneSpace
from evonf.fuzzy_core import (
    MAX_MF,
    MIN_MF,
    P_MAX,
    P_MIN,
    BellMF,
    FisKind,
    FuzzyInferenceSystem,
    FuzzyRule,
    FuzzyVariable,
    GaussianMF,
    OperatorParams,
    Shape,
)
from evonf.rulegen import grid_rule_labels

FORMAT = "evonf-genome/1"
SHAPES = (Shape.BELL, Shape.GAUSSIAN)
KINDS = (FisKind.TAKAGI_SUGENO, FisKind.MAMDANI, FisKind.TSUKAMOTO)
LAYERS = (
    "counts", "shapes", "mf_params", "angles", "rule_bits",
    "label_masks", "operators", "learning_rate", "fis_kind",
)


def angle_to_coeff(alpha):
    """Consequent coefficient ``tan(alpha)`` for an angle in degrees."""
    if not -90.0 < alpha < 90.0:
        raise AngleOutOfRange(f"angle {alpha} must lie strictly inside (-90, 90) degrees")
    return math.tan(math.radians(alpha))


def coeff_to_angle(p):
    return math.degrees(math.atan(p))


@dataclass(frozen=True)
class EncodingSpec:
    n_inputs: int
    universes: tuple = None
    max_mf: int = MAX_MF
    angle_limit: float = 89.9
    operator_range: tuple = (P_MIN, P_MAX)
    learning_rate_range: tuple = (0.05, 0.20)
    # MF width bounds as fractions of the universe width
    width_range: tuple = (0.02, 1.0)
    slope_range: tuple = (0.5, 5.0)
    fis_kind: FisKind = FisKind.TAKAGI_SUGENO
    evolve_masks: bool = True
    fixed_min: bool = False
    repair: bool = True

    def __post_init__(self):
        if self.n_inputs < 1:
            raise ValueError("need at least one input")
        universes = self.universes
        if universes is None:
            universes = ((0.0, 1.0),) * self.n_inputs
        universes = tuple((float(lo), float(hi)) for lo, hi in universes)
        if len(universes) != self.n_inputs or any(lo >= hi for lo, hi in universes):
            raise ValueError("one universe (lo < hi) per input is required")
        object.__setattr__(self, "universes", universes)
        if not MIN_MF <= self.max_mf <= MAX_MF:
            raise ValueError(f"max_mf must be in [{MIN_MF}, {MAX_MF}]")
        if not 0.0 < self.angle_limit < 90.0:
            raise ValueError("angle_limit must be inside (0, 90)")
        if self.fis_kind is not FisKind.TAKAGI_SUGENO:
            raise ValueError("only Takagi-Sugeno systems are decodable")

    @property
    def max_rules(self):
        return self.max_mf**self.n_inputs

    @functools.cached_property
    def sizes(self):
        n, m, r = self.n_inputs, self.max_mf, self.max_rules
        return {
            "counts": n,
            "shapes": n,
            "mf_params": n * m * 3,
            "angles": r * (n + 1),
            "rule_bits": r,
            "label_masks": r * n * m,
            "operators": 2,
            "learning_rate": 1,
            "fis_kind": 1,
        }

    @functools.cached_property
    def slices(self):
        out, pos = {}, 0
        for name in LAYERS:
            out[name] = slice(pos, pos + self.sizes[name])
            pos += self.sizes[name]
        return out

    @property
    def length(self):
        return sum(self.sizes.values())

    @functools.cached_property
    def gene_space(self):
        n, m = self.n_inputs, self.max_mf
        lower = np.empty(self.length)
        upper = np.empty(self.length)
        kinds = np.empty(self.length, dtype=np.int8)
        frozen = np.zeros(self.length, dtype=bool)

        def put(name, lo, hi, kind):
            sl = self.slices[name]
            lower[sl], upper[sl], kinds[sl] = lo, hi, kind

        put("counts", MIN_MF, m, GeneKind.INTEGER)
        put("shapes", 0, len(SHAPES) - 1, GeneKind.CATEGORICAL)
        lo = np.empty((n, m, 3))
        hi = np.empty((n, m, 3))
        for v, (a, b) in enumerate(self.universes):
            w = b - a
            lo[v, :, 0], hi[v, :, 0] = self.width_range[0] * w, self.width_range[1] * w
            lo[v, :, 1], hi[v, :, 1] = self.slope_range
            lo[v, :, 2], hi[v, :, 2] = a, b
        put("mf_params", lo.ravel(), hi.ravel(), GeneKind.REAL)
        put("angles", -self.angle_limit, self.angle_limit, GeneKind.REAL)
        put("rule_bits", 0, 1, GeneKind.BINARY)
        put("label_masks", 0, 1, GeneKind.BINARY)
        put("operators", self.operator_range[0], self.operator_range[1], GeneKind.REAL)
        put("learning_rate", *self.learning_rate_range, GeneKind.REAL)
        put("fis_kind", 0, len(KINDS) - 1, GeneKind.CATEGORICAL)
        frozen[self.slices["fis_kind"]] = True
        if self.fixed_min:
            frozen[self.slices["operators"]] = True
        if not self.evolve_masks:
            frozen[self.slices["label_masks"]] = True
        return GeneSpace(lower, upper, kinds, frozen)

    @functools.cached_property
    def grid_masks(self):
        """Label masks of the full ``max_mf`` grid, shape ``(R, n, M)``."""
        masks = np.zeros((self.max_rules, self.n_inputs, self.max_mf))
        for k, labels in enumerate(grid_rule_labels([self.max_mf] * self.n_inputs)):
            masks[k, np.arange(self.n_inputs), labels] = 1.0
        return masks

    def random_vector(self, rng):
        values = self.gene_space.random_vector(rng)
        values[self.slices["rule_bits"]] = 1.0
        values[self.slices["label_masks"]] = self.grid_masks.ravel()
        values[self.slices["fis_kind"]] = KINDS.index(self.fis_kind)
        if self.fixed_min:
            values[self.slices["operators"]] = 1.0
        return values

    def wrap(self, vector):
        return Genome(self, vector)

    def unwrap(self, genome):
        return genome.values


@dataclass(frozen=True, eq=False)
class Genome:
    spec: EncodingSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.spec.length,):
            raise ValueError(f"expected {self.spec.length} genes, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        return (
            isinstance(other, Genome)
            and self.spec == other.spec
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.spec, self.values.tobytes()))

    def layer(self, name):
        return self.values[self.spec.slices[name]]

    @property
    def counts(self):
        return self.layer("counts").astype(int)

    @property
    def shapes(self):
        return [SHAPES[int(s)] for s in self.layer("shapes")]

    @property
    def mf_params(self):
        s = self.spec
        return self.layer("mf_params").reshape(s.n_inputs, s.max_mf, 3)

    @property
    def angles(self):
        return self.layer("angles").reshape(self.spec.max_rules, self.spec.n_inputs + 1)

    @property
    def rule_bits(self):
        return self.layer("rule_bits").astype(bool)

    @property
    def label_masks(self):
        s = self.spec
        return self.layer("label_masks").reshape(s.max_rules, s.n_inputs, s.max_mf).astype(bool)

    @property
    def operators(self):
        return tuple(self.layer("operators"))

    @property
    def learning_rate(self):
        return float(self.layer("learning_rate")[0])

    @property
    def fis_kind(self):
        return KINDS[int(self.layer("fis_kind")[0])]

    def replace_layer(self, name, new_values):
        values = self.values.copy()
        values[self.spec.slices[name]] = np.asarray(new_values, dtype=float).ravel()
        return Genome(self.spec, values)

    def to_dict(self):
        s = self.spec
        return {
            "format": FORMAT,
            "n_inputs": s.n_inputs,
            "universes": [list(u) for u in s.universes],
            "max_mf": s.max_mf,
            "fixed_min": s.fixed_min,
            "evolve_masks": s.evolve_masks,
            "layers": {name: s.sizes[name] for name in LAYERS},
            "values": [float(v) for v in self.values],
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc, spec=None):
        if doc.get("format") != FORMAT:
            raise ValueError(f"not a {FORMAT} document")
        if spec is None:
            spec = EncodingSpec(
                n_inputs=doc["n_inputs"],
                universes=tuple(tuple(u) for u in doc["universes"]),
                max_mf=doc["max_mf"],
                fixed_min=doc.get("fixed_min", False),
                evolve_masks=doc.get("evolve_masks", True),
            )
        return cls(spec, np.asarray(doc["values"], dtype=float))

    @classmethod
    def from_json(cls, text, spec=None):
        return cls.from_dict(json.loads(text), spec)


def random_genome(spec, rng):
    """Uniform genes within bounds; the rule layer starts as the full grid."""
    return Genome(spec, spec.random_vector(rng))


def _decode_mf(shape, slot):
    width, slope, center = slot
    if shape is Shape.BELL:
        return BellMF(width, slope, center)
    return GaussianMF(center, width)


def decode(genome, spec=None):
    """Build the fuzzy inference system a genome describes.

    Only the first ``count`` MF slots of each input are used.  Rule slots
    that are switched off, reference a label beyond an input's count, or
    select nothing at all are dropped.  If no rule survives and repair is
    enabled, the first grid rule (label 0 on every input) is switched on.
    """
    spec = genome.spec if spec is None else spec
    counts = genome.counts
    shapes = genome.shapes
    params = genome.mf_params
    inputs = []
    for v in range(spec.n_inputs):
        parts = [_decode_mf(shapes[v], params[v, j]) for j in range(counts[v])]
        inputs.append(FuzzyVariable(f"x{v + 1}", spec.universes[v], parts))

    coeffs = np.tan(np.radians(genome.angles))
    bits = genome.rule_bits
    masks = genome.label_masks
    rules = []
    for k in np.flatnonzero(bits):
        mask = masks[k]
        if any(mask[v, counts[v]:].any() for v in range(spec.n_inputs)):
            continue
        if not mask.any():
            continue
        antecedent = tuple(tuple(int(b) for b in mask[v, : counts[v]]) for v in range(spec.n_inputs))
        rules.append(FuzzyRule(antecedent, tuple(coeffs[k])))
    if not rules:
        if not spec.repair:
            raise NoActiveRules("genome switches off every decodable rule")
        antecedent = tuple((1,) + (0,) * (counts[v] - 1) for v in range(spec.n_inputs))
        rules.append(FuzzyRule(antecedent, tuple(coeffs[0])))

    if spec.fixed_min:
        operators = OperatorParams(fixed_min=True)
    else:
        tp, sp = genome.operators
        operators = OperatorParams(tp, sp)
    return FuzzyInferenceSystem(inputs, rules, operators, genome.fis_kind)


def _grid_slot(rule, spec):
    labels = []
    for mask in rule.antecedent:
        if sum(mask) != 1:
            return None
        labels.append(mask.index(1))
    slot = 0
    for label in labels:
        slot = slot * spec.max_mf + label
    return slot


def encode(fis, spec, learning_rate=None):
    """Genome whose decoding reproduces the active part of ``fis``.

    Single-label rules are placed in their grid slot when that keeps the
    rule order; other rules take the next free slot.
    """
    if fis.n_inputs != spec.n_inputs:
        raise NotRepresentable(f"system has {fis.n_inputs} inputs, encoding expects {spec.n_inputs}")
    values = np.empty(spec.length)
    space = spec.gene_space
    # unused slots sit at the middle of their bounds
    values[:] = (space.lower + space.upper) / 2.0
    values[space.discrete] = np.floor(values[space.discrete])

    def put(name, arr):
        values[spec.slices[name]] = np.asarray(arr, dtype=float).ravel()

    counts, shapes = [], []
    params = ((space.lower + space.upper) / 2.0)[spec.slices["mf_params"]].reshape(
        spec.n_inputs, spec.max_mf, 3
    )
    for v, var in enumerate(fis.inputs):
        if tuple(var.universe) != spec.universes[v]:
            raise NotRepresentable(f"input {v} universe differs from the encoding")
        if len(var.partitions) > spec.max_mf:
            raise NotRepresentable(f"input {v} has more than {spec.max_mf} MFs")
        kinds = {mf.shape for mf in var.partitions}
        if len(kinds) != 1:
            raise NotRepresentable(f"input {v} mixes MF shapes")
        shape = kinds.pop()
        counts.append(len(var.partitions))
        shapes.append(SHAPES.index(shape))
        for j, mf in enumerate(var.partitions):
            if shape is Shape.BELL:
                params[v, j] = (mf.p, mf.q, mf.r)
            else:
                params[v, j, 0] = mf.sigma
                params[v, j, 2] = mf.mu
    put("counts", counts)
    put("shapes", shapes)
    put("mf_params", params)

    active = fis.active_rules
    if len(active) > spec.max_rules:
        raise NotRepresentable(f"{len(active)} rules exceed {spec.max_rules} slots")
    angles = np.zeros((spec.max_rules, spec.n_inputs + 1))
    bits = np.zeros(spec.max_rules)
    masks = spec.grid_masks.copy()
    slot = -1
    for i, rule in enumerate(active):
        remaining = len(active) - i
        preferred = _grid_slot(rule, spec)
        if preferred is not None and slot < preferred <= spec.max_rules - remaining:
            slot = preferred
        else:
            slot += 1
        mask = np.zeros((spec.n_inputs, spec.max_mf))
        for v, m in enumerate(rule.antecedent):
            mask[v, : len(m)] = m
        masks[slot] = mask
        bits[slot] = 1.0
        for c, coeff in enumerate(rule.consequent):
            angle = coeff_to_angle(coeff)
            if abs(angle) > spec.angle_limit:
                raise NotRepresentable(f"coefficient {coeff} exceeds the angle bound")
            angles[slot, c] = angle
    put("angles", angles)
    put("rule_bits", bits)
    put("label_masks", masks)

    if fis.operators.fixed_min and not spec.fixed_min:
        raise NotRepresentable("fixed min/max operators need a fixed-min encoding")
    if spec.fixed_min:
        put("operators", (1.0, 1.0))
    else:
        put("operators", (fis.operators.tnorm_p, fis.operators.tconorm_p))
    if learning_rate is not None:
        put("learning_rate", [learning_rate])
    put("fis_kind", [KINDS.index(fis.kind)])
    genome = Genome(spec, values)
    if not space.contains(genome.values):
        raise NotRepresentable("system parameters fall outside the gene bounds")
    return genome
