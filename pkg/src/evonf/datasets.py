"""Benchmark series as lag-embedded, min-max normalized regression data.

Three sources are supported: the Mackey-Glass delay equation (integrated
here), the bundled Box-Jenkins gas furnace file and any CSV with a header.
A :class:`SeriesSpec` ties a source to its embedding and split, and
:func:`build` turns it into train/test :class:`WindowedDataset` objects with
normalization fitted on the training part only.
"""

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from evonf.errors import (
    ConstantColumn,
    DegenerateSplit,
    InsufficientLength,
    MissingColumn,
    ParseError,
)

MACKEY_GLASS_LAGS = (18, 12, 6, 0)
MACKEY_GLASS_HORIZON = 6
# gas furnace: u(t-4), y(t-1) -> y(t), written relative to y(t-1)
GAS_FURNACE_LAGS = {"u": (3,), "y": (0,)}
GAS_FURNACE_HORIZON = 1


@dataclass(frozen=True)
class MackeyGlassSource:
    """Delay equation ``dx/dt = a x(t-tau) / (1 + x(t-tau)^10) - b x(t)``.

    ``n`` counts unit-time samples *including* the ``washout`` prefix that
    is thrown away, so the series has ``n - washout`` values.
    """

    tau: float = 17.0
    n: int = 1224
    dt: float = 0.1
    x0: float = 1.2
    washout: int = 200
    a: float = 0.2
    b: float = 0.1

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if 0 < self.tau < self.dt:
            raise ValueError("a non-zero tau must be at least one integration step")
        if self.dt <= 0 or abs(1.0 / self.dt - round(1.0 / self.dt)) > 1e-9:
            raise ValueError("dt must divide the unit sampling interval")
        if self.washout < 0 or self.n <= self.washout:
            raise InsufficientLength(f"n={self.n} leaves no samples after washout {self.washout}")


@dataclass(frozen=True)
class CsvSource:
    """Columns of a headered CSV file; ``path=None`` means the bundled gas furnace."""

    path: str = None
    columns: tuple = ("u", "y")
    target: str = "y"

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.target not in self.columns:
            raise MissingColumn(f"target {self.target!r} is not among {self.columns}")


@dataclass(frozen=True)
class SeriesSpec:
    """Source plus embedding: ``lags`` is a sequence for one series or a
    ``{column: lags}`` mapping for CSV sources."""

    source: object = field(default_factory=MackeyGlassSource)
    lags: object = MACKEY_GLASS_LAGS
    horizon: int = MACKEY_GLASS_HORIZON
    split: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        lag_values = (
            [v for seq in self.lags.values() for v in seq]
            if isinstance(self.lags, dict)
            else list(self.lags)
        )
        if not lag_values:
            raise ValueError("at least one lag is required")
        if any(int(v) != v or v < 0 for v in lag_values):
            raise ValueError("lags must be non-negative integers")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise DegenerateSplit(f"split fraction {self.split} must lie in (0, 1)")


def gas_furnace_spec(path=None, split=0.5, normalize=True):
    return SeriesSpec(
        source=CsvSource(path, ("u", "y"), "y"),
        lags=dict(GAS_FURNACE_LAGS),
        horizon=GAS_FURNACE_HORIZON,
        split=split,
        normalize=normalize,
    )


@dataclass(frozen=True)
class NormRecord:
    """Per-column min/max; the last entry belongs to the target."""

    mins: tuple
    maxs: tuple

    def apply(self, values, column):
        lo, hi = self.mins[column], self.maxs[column]
        return (np.asarray(values, dtype=float) - lo) / (hi - lo)


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    record: NormRecord = None
    names: tuple = ()

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float, ndmin=2)
        y = np.array(self.targets, dtype=float).ravel()
        if x.shape[0] != y.shape[0] and not (y.size == 0 and x.size == 0):
            raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} targets")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_inputs(self):
        return self.inputs.shape[1]

    def subset(self, start, stop):
        return WindowedDataset(
            self.inputs[start:stop], self.targets[start:stop], self.record, self.names
        )


def _mackey_rate(a, b, x, delayed):
    return a * delayed / (1.0 + delayed**10) - b * x


def gen_mackey_glass(source=None):
    """Integrate the Mackey-Glass equation with classical RK4.

    History before t=0 is the constant ``x0``.  Delayed values that fall
    between grid points use cubic Hermite interpolation on the stored
    states and slopes, which keeps the scheme fourth order.  Returns the
    unit-time samples after the washout.
    """
    src = source if source is not None else MackeyGlassSource()
    if isinstance(src, SeriesSpec):
        src = src.source
    a, b, dt, tau = src.a, src.b, src.dt, src.tau
    per_unit = int(round(1.0 / dt))
    steps = src.n * per_unit
    xs = np.empty(steps + 1)
    fs = np.empty(steps + 1)
    xs[0] = src.x0

    if tau == 0:
        rate = lambda x: _mackey_rate(a, b, x, x)  # noqa: E731
        h = dt
        for i in range(steps):
            x = xs[i]
            k1 = rate(x)
            k2 = rate(x + 0.5 * h * k1)
            k3 = rate(x + 0.5 * h * k2)
            k4 = rate(x + h * k3)
            xs[i + 1] = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return xs[src.washout * per_unit :: per_unit][: src.n - src.washout].copy()

    x0 = src.x0

    def delayed(t):
        s = t - tau
        if s <= 0.0:
            return x0
        j = int(math.floor(s / dt + 1e-12))
        theta = s / dt - j
        if theta < 1e-9:
            return xs[j]
        # cubic Hermite between grid points j and j+1
        t2, t3 = theta * theta, theta * theta * theta
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + theta
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        return h00 * xs[j] + h10 * dt * fs[j] + h01 * xs[j + 1] + h11 * dt * fs[j + 1]

    fs[0] = _mackey_rate(a, b, x0, delayed(0.0))
    for i in range(steps):
        t = i * dt
        x = xs[i]
        d_mid = delayed(t + 0.5 * dt)
        k1 = fs[i]
        k2 = _mackey_rate(a, b, x + 0.5 * dt * k1, d_mid)
        k3 = _mackey_rate(a, b, x + 0.5 * dt * k2, d_mid)
        k4 = _mackey_rate(a, b, x + dt * k3, delayed(t + dt))
        xs[i + 1] = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        fs[i + 1] = _mackey_rate(a, b, xs[i + 1], delayed(t + dt))
    return xs[src.washout * per_unit :: per_unit][: src.n - src.washout].copy()


def bundled_gas_furnace():
    """Path-like handle to the bundled Box-Jenkins gas furnace CSV."""
    return resources.files("evonf").joinpath("data").joinpath("gas_furnace.csv")


def load_csv_series(path=None, columns=("u", "y")):
    """Read numeric ``columns`` from a headered CSV; returns ``{name: array}``.

    ``path=None`` reads the bundled gas furnace file.  Missing files raise
    OSError; bad cells raise ParseError with the 1-based file row.
    """
    if path is None:
        text = bundled_gas_furnace().read_text()
        origin = "gas_furnace.csv"
    else:
        with open(path, newline="") as fh:
            text = fh.read()
        origin = str(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise ParseError(f"{origin}: file is empty", row=1)
    header = [h.strip() for h in rows[0]]
    index = {}
    for name in columns:
        if name not in header:
            raise MissingColumn(f"{origin}: column {name!r} not found in header {header}")
        index[name] = header.index(name)
    values = {name: [] for name in columns}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        for name, col in index.items():
            if col >= len(row):
                raise ParseError(f"{origin}: row {lineno} has no {name!r} value", lineno, name)
            cell = row[col].strip()
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(
                    f"{origin}: row {lineno}, column {name!r}: {cell!r} is not a number",
                    lineno,
                    name,
                ) from None
            if not math.isfinite(value):
                raise ParseError(f"{origin}: row {lineno}, column {name!r} is not finite", lineno, name)
            values[name].append(value)
    if not values[columns[0]]:
        raise ParseError(f"{origin}: no data rows", row=2)
    return {name: np.asarray(v) for name, v in values.items()}


def embed(series, lags, horizon, target=None):
    """Lag-embed a series.

    Sample ``t`` has inputs ``x(t - lag)`` for each lag and target
    ``x(t + horizon)``.  ``series`` is a 1-D array with a lag sequence, or a
    ``{column: array}`` mapping with ``{column: lags}`` and a ``target``
    column name.
    """
    if isinstance(series, dict):
        if target is None:
            raise ValueError("a target column is required for multi-column series")
        if target not in series:
            raise MissingColumn(f"target column {target!r} not found")
        columns = {}
        for name, seq in lags.items():
            if name not in series:
                raise MissingColumn(f"lag column {name!r} not found")
            columns[name] = np.asarray(series[name], dtype=float)
        lengths = {len(np.asarray(v)) for v in series.values()}
        if len(lengths) != 1:
            raise ValueError("all columns must have the same length")
        tgt = np.asarray(series[target], dtype=float)
        pairs = [(name, int(k)) for name, seq in lags.items() for k in seq]
    else:
        tgt = np.asarray(series, dtype=float).ravel()
        columns = {"x": tgt}
        pairs = [("x", int(k)) for k in lags]
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not pairs or any(k < 0 for _, k in pairs):
        raise ValueError("lags must be non-empty and non-negative")
    length = tgt.shape[0]
    max_lag = max(k for _, k in pairs)
    count = length - max_lag - horizon
    if count <= 0:
        raise InsufficientLength(
            f"series of length {length} is too short for max lag {max_lag} and horizon {horizon}"
        )
    t = np.arange(max_lag, max_lag + count)
    inputs = np.column_stack([columns[name][t - k] for name, k in pairs])
    names = tuple(f"{name}(t-{k})" if k else f"{name}(t)" for name, k in pairs)
    return WindowedDataset(inputs, tgt[t + horizon], None, names)


def fit_minmax(dataset):
    data = np.column_stack([dataset.inputs, dataset.targets])
    lo, hi = data.min(axis=0), data.max(axis=0)
    flat = np.nonzero(~(lo < hi))[0]
    if flat.size:
        raise ConstantColumn(f"column {int(flat[0])} is constant; cannot normalize")
    return NormRecord(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def normalize_minmax(dataset, record=None):
    """Map every column to [0, 1]; ``record`` reuses an existing fit.

    Returns ``(normalized_dataset, record)``.
    """
    if record is None:
        record = fit_minmax(dataset)
    lo = np.asarray(record.mins)
    hi = np.asarray(record.maxs)
    n = dataset.n_inputs
    if lo.shape[0] != n + 1:
        raise ValueError(f"record has {lo.shape[0]} columns, dataset needs {n + 1}")
    inputs = (dataset.inputs - lo[:n]) / (hi[:n] - lo[:n])
    targets = (dataset.targets - lo[n]) / (hi[n] - lo[n])
    return WindowedDataset(inputs, targets, record, dataset.names), record


def denormalize(record, values, column=-1):
    """Invert the min-max map for one column (default: the target)."""
    lo, hi = record.mins[column], record.maxs[column]
    return np.asarray(values, dtype=float) * (hi - lo) + lo


def split(dataset, fraction=0.5):
    """Chronological split: the first ``floor(n * fraction)`` samples train."""
    if not 0.0 < fraction < 1.0:
        raise DegenerateSplit(f"split fraction {fraction} must lie in (0, 1)")
    n = len(dataset)
    cut = int(math.floor(n * fraction + 1e-9))
    if cut == 0 or cut == n:
        raise DegenerateSplit(f"splitting {n} samples at {fraction} leaves one side empty")
    return dataset.subset(0, cut), dataset.subset(cut, n)


def load_series(spec):
    """Raw data for a spec: an array (Mackey-Glass) or a column mapping."""
    src = spec.source
    if isinstance(src, MackeyGlassSource):
        return gen_mackey_glass(src)
    if isinstance(src, CsvSource):
        return load_csv_series(src.path, src.columns)
    raise TypeError(f"unknown source {type(src).__name__}")


def build(spec):
    """Embed, split and (optionally) normalize; returns ``(train, test, record)``.

    The normalization is fitted on the training part only and then applied
    to both parts, so test values may fall slightly outside [0, 1].
    """
    raw = load_series(spec)
    target = spec.source.target if isinstance(spec.source, CsvSource) else None
    data = embed(raw, spec.lags, spec.horizon, target)
    train, test = split(data, spec.split)
    if not spec.normalize:
        return train, test, None
    train, record = normalize_minmax(train)
    test, _ = normalize_minmax(test, record)
    return train, test, record
