"""Learning regimes, fitness evaluation and multi-seed experiment runs.

Three regimes are supported:

* ``type1``: evolve MFs, rules, operators, consequents and the learning
  rate; every fitness evaluation fine-tunes the MFs by gradient descent.
* ``type2``: the same genome, evolution only (no gradient descent).
* ``type3``: like ``type1`` but with min/max operators held fixed.
"""

import enum
import json
import math
import statistics
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from evonf import datasets
from evonf.errors import ConfigError, EvoNFError
from evonf.evolution import EAConfig, evolve
from evonf.fuzzy_core import FuzzyInferenceSystem, FuzzyVariable, OperatorParams, Shape, rmse
from evonf.genome import EncodingSpec, decode, encode
from evonf.gradient import TrainSpec, gd_finetune, write_loss_trace
from evonf.rulegen import default_partition, grid_partition

PENALTY = sys.float_info.max

# generations per series and regime
ITERATIONS = {
    "mackey_glass": {"type1": 60, "type2": 90, "type3": 60},
    "gas_furnace": {"type1": 60, "type2": 135, "type3": 60},
    "waste_water": {"type1": 65, "type2": 180, "type3": 65},
}

# literature ANFIS baselines quoted in reports: (train, test)
ANFIS_RMSE = {
    "mackey_glass": (0.0019, 0.0018),
    "gas_furnace": (0.0137, 0.0570),
    "waste_water": (0.0530, 0.0810),
}


class LearningMode(enum.Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE3 = "type3"

    @property
    def uses_gradient(self):
        return self is not LearningMode.TYPE2

    @property
    def fixed_min(self):
        return self is LearningMode.TYPE3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; ``seeds`` are EA master seeds."""

    name: str = "experiment"
    series_name: str = "mackey_glass"
    series: datasets.SeriesSpec = field(default_factory=datasets.SeriesSpec)
    mode: LearningMode = LearningMode.TYPE1
    ea: EAConfig = field(default_factory=EAConfig)
    encoding: EncodingSpec = None
    initial_counts: tuple = (4, 4, 4, 4)
    initial_shape: Shape = Shape.GAUSSIAN
    epochs: int = 100
    seeds: tuple = (1, 2, 3)
    holdout: bool = False
    holdout_fraction: float = 0.25
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "initial_counts", tuple(int(c) for c in self.initial_counts))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        n_inputs = _n_inputs(self.series)
        if len(self.initial_counts) != n_inputs:
            raise ConfigError(
                f"initial_counts has {len(self.initial_counts)} entries for {n_inputs} inputs"
            )
        enc = self.encoding or EncodingSpec(n_inputs)
        if enc.n_inputs != n_inputs:
            raise ConfigError(f"encoding expects {enc.n_inputs} inputs, series gives {n_inputs}")
        if max(self.initial_counts) > enc.max_mf:
            raise ConfigError("initial_counts exceed the encoding's max_mf")
        # the regime decides the operator layer
        if enc.fixed_min != self.mode.fixed_min:
            enc = replace(enc, fixed_min=self.mode.fixed_min)
        object.__setattr__(self, "encoding", enc)


def _n_inputs(series):
    if isinstance(series.lags, dict):
        return sum(len(v) for v in series.lags.values())
    return len(series.lags)


@dataclass(frozen=True)
class ExperimentData:
    """Splits used by one run; ``fitness`` is ``test`` unless holding out."""

    train: datasets.WindowedDataset
    test: datasets.WindowedDataset
    fitness: datasets.WindowedDataset
    record: object
    protocol: str


def prepare_data(config):
    """Build, split and normalize the series of ``config``.

    With ``holdout`` the chronologically last part of the training split
    becomes a validation set for fitness, and the test split stays unseen.
    """
    train, test, record = datasets.build(config.series)
    if not config.holdout:
        return ExperimentData(train, test, test, record, "test")
    fit_train, valid = datasets.split(train, 1.0 - config.holdout_fraction)
    return ExperimentData(fit_train, test, valid, record, "holdout")


class PenaltyCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0
        self.last_error = None

    def hit(self, exc):
        with self._lock:
            self.count += 1
            self.last_error = repr(exc)


def tuned_system(genome, mode, train, epochs=100, learning_rate=None):
    """Decode a genome and, for gradient regimes, fine-tune it on ``train``.

    Returns ``(fis, loss_trace)``; the trace is empty without fine-tuning.
    ``learning_rate`` overrides the genome's rate (any value >= 0).
    """
    fis = decode(genome)
    if not mode.uses_gradient:
        return fis, []
    if learning_rate is None:
        spec = TrainSpec(genome.learning_rate, epochs)
    else:
        spec = TrainSpec(learning_rate, epochs, allow_any_rate=True)
    return gd_finetune(fis, train, spec)


def fitness_pipeline(genome, mode, data, epochs=100, learning_rate=None, penalties=None):
    """RMSE on the fitness split after decoding (and fine-tuning).

    Package errors and non-finite results map to ``PENALTY`` so evolution can
    carry on; they are tallied in ``penalties`` when given.
    """
    try:
        fis, _ = tuned_system(genome, mode, data.train, epochs, learning_rate)
        value = rmse(fis, data.fitness)
        if not math.isfinite(value):
            raise FloatingPointError("non-finite RMSE")
        return value
    except (EvoNFError, FloatingPointError, ValueError) as exc:
        if penalties is not None:
            penalties.hit(exc)
        return PENALTY


def grid_system(config):
    """Initial grid-partitioned system with zero consequents."""
    enc = config.encoding
    inputs = [
        FuzzyVariable(f"x{v + 1}", enc.universes[v], default_partition(enc.universes[v], m, config.initial_shape))
        for v, m in enumerate(config.initial_counts)
    ]
    ops = OperatorParams(fixed_min=config.mode.fixed_min)
    return FuzzyInferenceSystem(inputs, grid_partition(inputs), ops)


@dataclass
class SeedResult:
    seed: int
    train_rmse: float
    test_rmse: float
    fitness_rmse: float
    mf_counts: tuple
    active_rules: int
    generations: int
    penalties: int
    wall_time_s: float = None
    learning_rate: float = None
    operators: tuple = None


@dataclass
class RunReport:
    name: str
    series: str
    mode: str
    protocol: str
    initial_mf_counts: tuple
    initial_rules: int
    seeds: list

    def metric(self, key):
        return [getattr(s, key) for s in self.seeds]

    def median(self, key):
        return float(statistics.median(self.metric(key)))

    def worst(self, key):
        return float(max(self.metric(key)))

    def best(self, key):
        return float(min(self.metric(key)))

    def to_dict(self, timing=False):
        seeds = []
        for s in self.seeds:
            doc = asdict(s)
            doc["mf_counts"] = list(s.mf_counts)
            doc["operators"] = None if s.operators is None else list(s.operators)
            if not timing:
                doc.pop("wall_time_s")
            seeds.append(doc)
        aggregates = {}
        for key in ("train_rmse", "test_rmse", "fitness_rmse", "active_rules"):
            aggregates[key] = {
                "best": self.best(key),
                "median": self.median(key),
                "worst": self.worst(key),
            }
        return {
            "name": self.name,
            "series": self.series,
            "mode": self.mode,
            "protocol": self.protocol,
            "initial_mf_counts": list(self.initial_mf_counts),
            "initial_rules": self.initial_rules,
            "seeds": seeds,
            "aggregates": aggregates,
        }

    @classmethod
    def from_dict(cls, doc):
        seeds = []
        for s in doc["seeds"]:
            s = dict(s)
            s["mf_counts"] = tuple(s["mf_counts"])
            if s.get("operators") is not None:
                s["operators"] = tuple(s["operators"])
            seeds.append(SeedResult(**s))
        return cls(
            name=doc["name"],
            series=doc["series"],
            mode=doc["mode"],
            protocol=doc["protocol"],
            initial_mf_counts=tuple(doc["initial_mf_counts"]),
            initial_rules=doc["initial_rules"],
            seeds=seeds,
        )


def _active_rule_count(genome):
    try:
        return len(decode(genome).active_rules)
    except EvoNFError:
        return 0


def run_seed(config, data, seed, out_dir=None, timing=False):
    """One EA run; returns ``(SeedResult, history, best_genome)``."""
    start = time.perf_counter()
    enc = config.encoding
    grid = grid_system(config)
    seeded = encode(grid, enc, learning_rate=float(np.mean(enc.learning_rate_range)))
    penalties = PenaltyCounter()
    mode = config.mode

    def fitness(genome):
        return fitness_pipeline(genome, mode, data, config.epochs, penalties=penalties)

    ea = replace(config.ea, master_seed=seed)
    best, history = evolve(ea, enc, fitness, initial=[seeded], describe=_active_rule_count)
    fis, trace = tuned_system(best.genome, mode, data.train, config.epochs)
    result = SeedResult(
        seed=seed,
        train_rmse=rmse(fis, data.train),
        test_rmse=rmse(fis, data.test),
        fitness_rmse=float(best.fitness),
        mf_counts=fis.mf_counts,
        active_rules=len(fis.active_rules),
        generations=len(history) - 1,
        penalties=penalties.count,
        wall_time_s=time.perf_counter() - start,
        learning_rate=best.genome.learning_rate if mode.uses_gradient else None,
        operators=None if mode.fixed_min else (fis.operators.tnorm_p, fis.operators.tconorm_p),
    )
    if out_dir is not None:
        out = Path(out_dir)
        history.to_csv(out / f"history_seed{seed}.csv", timing=timing)
        (out / f"best_seed{seed}.json").write_text(best.genome.to_json() + "\n")
        if trace:
            write_loss_trace(trace, out / f"loss_seed{seed}.csv")
    return result, history, best.genome


def run_experiment(config, write=True, timing=False, log=None):
    """Run every seed of ``config``; writes per-seed files and the report.

    Configuration and data problems surface before any evolution starts.
    """
    data = prepare_data(config)
    grid = grid_system(config)
    out_dir = Path(config.output_dir) if write else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in config.seeds:
        result, _, _ = run_seed(config, data, seed, out_dir, timing)
        results.append(result)
        if log is not None:
            log(
                f"seed {seed}: train {result.train_rmse:.6f} test {result.test_rmse:.6f} "
                f"rules {result.active_rules} mfs {list(result.mf_counts)}"
            )
    report = RunReport(
        name=config.name,
        series=config.series_name,
        mode=config.mode.value,
        protocol=data.protocol,
        initial_mf_counts=grid.mf_counts,
        initial_rules=len(grid.active_rules),
        seeds=results,
    )
    if out_dir is not None:
        emit_report(report, out_dir, timing=timing)
    return report


def render_table(report):
    """Plain-text summary: structure before/after learning and RMSE per seed."""
    lines = [
        f"experiment: {report.name}",
        f"series: {report.series}   mode: {report.mode}   fitness split: {report.protocol}",
        "",
        f"{'seed':>6} {'MFs before':>14} {'MFs after':>14} {'rules before':>13} "
        f"{'rules after':>12} {'train RMSE':>12} {'test RMSE':>12}",
    ]
    before = "/".join(str(c) for c in report.initial_mf_counts)
    for s in report.seeds:
        after = "/".join(str(c) for c in s.mf_counts)
        lines.append(
            f"{s.seed:>6} {before:>14} {after:>14} {report.initial_rules:>13} "
            f"{s.active_rules:>12} {s.train_rmse:>12.6f} {s.test_rmse:>12.6f}"
        )
    lines.append("")
    for label, fn in (("median", report.median), ("worst", report.worst)):
        lines.append(
            f"{label:>6} train RMSE {fn('train_rmse'):.6f}   test RMSE {fn('test_rmse'):.6f}   "
            f"rules {fn('active_rules'):g}"
        )
    anfis = ANFIS_RMSE.get(report.series)
    if anfis is not None:
        lines.append("")
        lines.append(
            f"literature ANFIS baseline (not computed here): train {anfis[0]:.4f}  test {anfis[1]:.4f}"
        )
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir, timing=False):
    """Write ``report.json`` and ``report.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict(timing=timing)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_table(report))
    return [out / "report.json", out / "report.txt"]


def load_report(out_dir):
    doc = json.loads((Path(out_dir) / "report.json").read_text())
    return RunReport.from_dict(doc)


# ---- configuration files -------------------------------------------------

_SERIES_KEYS = {"source", "path", "columns", "target", "tau", "n", "dt", "x0", "washout",
                "lags", "horizon", "split", "normalize"}
_TOP_KEYS = {"name", "mode", "series", "ea", "encoding", "initial_counts", "initial_shape",
             "epochs", "seeds", "holdout", "holdout_fraction", "output_dir"}


def _check_keys(section, doc, allowed):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


def _series_from(doc, base_dir):
    doc = dict(doc or {})
    _check_keys("series", doc, _SERIES_KEYS)
    source = doc.get("source", "mackey_glass")
    common = {k: doc[k] for k in ("split", "normalize") if k in doc}
    if source == "mackey_glass":
        mg = {k: doc[k] for k in ("tau", "n", "dt", "x0", "washout") if k in doc}
        spec = datasets.SeriesSpec(
            source=datasets.MackeyGlassSource(**mg),
            lags=tuple(doc.get("lags", datasets.MACKEY_GLASS_LAGS)),
            horizon=int(doc.get("horizon", datasets.MACKEY_GLASS_HORIZON)),
            **common,
        )
        return source, spec
    if source in ("gas_furnace", "csv", "waste_water"):
        path = doc.get("path")
        if path is not None and not Path(path).is_absolute():
            path = str((base_dir / path).resolve())
        if source == "gas_furnace":
            lags = doc.get("lags", datasets.GAS_FURNACE_LAGS)
            columns = doc.get("columns", ("u", "y"))
            target = doc.get("target", "y")
            horizon = doc.get("horizon", datasets.GAS_FURNACE_HORIZON)
        else:
            if path is None:
                raise ConfigError(f"series source {source!r} needs a path")
            for key in ("lags", "target", "horizon"):
                if key not in doc:
                    raise ConfigError(f"series source {source!r} needs {key!r}")
            lags, target, horizon = doc["lags"], doc["target"], doc["horizon"]
            columns = doc.get("columns") or sorted(set(lags) | {target})
        if not isinstance(lags, dict):
            raise ConfigError("CSV series need lags as a {column: [lags]} mapping")
        spec = datasets.SeriesSpec(
            source=datasets.CsvSource(path, tuple(columns), target),
            lags={k: tuple(v) for k, v in lags.items()},
            horizon=int(horizon),
            **common,
        )
        return source, spec
    raise ConfigError(f"unknown series source {source!r}")


_EA_KEYS = {f for f in EAConfig.__dataclass_fields__ if f != "master_seed"}
_ENC_KEYS = {"max_mf", "angle_limit", "operator_range", "learning_rate_range", "width_range",
             "slope_range", "evolve_masks", "repair", "universes"}


def config_from_dict(doc, base_dir=".", overrides=None):
    """Build an :class:`ExperimentConfig` from a parsed YAML document.

    ``overrides`` (seeds, mode, holdout, output_dir, generations) win over
    the file.  Generations default to the per-series, per-regime table.
    """
    doc = dict(doc or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys("top-level", doc, _TOP_KEYS)
    base_dir = Path(base_dir)
    try:
        series_name, series = _series_from(doc.get("series"), base_dir)
        mode = LearningMode(overrides.get("mode", doc.get("mode", "type1")))
        ea_doc = dict(doc.get("ea") or {})
        _check_keys("ea", ea_doc, _EA_KEYS)
        if "generations" in overrides:
            ea_doc["generations"] = overrides["generations"]
        ea_doc.setdefault("generations", ITERATIONS.get(series_name, {}).get(mode.value, 60))
        ea = EAConfig(**ea_doc)
        enc_doc = dict(doc.get("encoding") or {})
        _check_keys("encoding", enc_doc, _ENC_KEYS)
        for key in ("operator_range", "learning_rate_range", "width_range", "slope_range"):
            if key in enc_doc:
                enc_doc[key] = tuple(enc_doc[key])
        if "universes" in enc_doc:
            enc_doc["universes"] = tuple(tuple(u) for u in enc_doc["universes"])
        n_inputs = _n_inputs(series)
        encoding = EncodingSpec(n_inputs, **enc_doc)
        default_counts = (4,) * n_inputs if series_name != "gas_furnace" else (3,) * n_inputs
        config = ExperimentConfig(
            name=doc.get("name", f"{series_name}_{mode.value}"),
            series_name=series_name,
            series=series,
            mode=mode,
            ea=ea,
            encoding=encoding,
            initial_counts=tuple(doc.get("initial_counts", default_counts)),
            initial_shape=Shape(doc.get("initial_shape", "gaussian")),
            epochs=int(doc.get("epochs", 100)),
            seeds=tuple(overrides.get("seeds", doc.get("seeds", (1, 2, 3)))),
            holdout=bool(overrides.get("holdout", doc.get("holdout", False))),
            holdout_fraction=float(doc.get("holdout_fraction", 0.25)),
            output_dir=str(overrides.get("output_dir", doc.get("output_dir", f"runs/{series_name}_{mode.value}"))),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, EvoNFError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return config


def load_config(path, overrides=None):
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, path.parent, overrides)
