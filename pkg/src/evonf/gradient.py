"""Gradient-descent fine-tuning of membership-function parameters.

The loss is ``L = 0.5 * mean((y_hat - y)^2)`` over a dataset.  Derivatives are
taken analytically: the reverse pass of the inference engine gives dL/d(mu)
for every label degree, and each membership function contributes its own
partial derivatives.  Only MF parameters (and, optionally, the two operator
parameters) move; consequents and rule structure are left alone.
"""

import csv
import math
import threading
from dataclasses import dataclass, replace

import numpy as np

from evonf import _engine
from evonf.errors import EmptyDataset, NonDifferentiablePoint, UnsupportedFisKind
from evonf.fuzzy_core import (
    P_MAX,
    P_MIN,
    PARAM_FLOOR,
    BellMF,
    FisKind,
    OperatorParams,
)

LR_RANGE = (0.05, 0.20)

_calls = 0
_calls_lock = threading.Lock()


def gd_call_count():
    """Number of gd_finetune invocations in this process."""
    return _calls


def reset_gd_call_count():
    global _calls
    with _calls_lock:
        _calls = 0


def _bump():
    global _calls
    with _calls_lock:
        _calls += 1


@dataclass(frozen=True)
class TrainSpec:
    """Settings for :func:`gd_finetune`.

    ``allow_any_rate`` lifts the usual [0.05, 0.20] restriction on the
    learning rate (tests use 0 to check that nothing moves).
    """

    learning_rate: float = 0.1
    epochs: int = 100
    tune_operators: bool = False
    floor: float = PARAM_FLOOR
    strict: bool = False
    allow_any_rate: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.floor <= 0:
            raise ValueError("parameter floor must be positive")
        lo, hi = LR_RANGE
        if self.allow_any_rate:
            if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
                raise ValueError("learning rate must be a finite non-negative number")
        elif not lo <= self.learning_rate <= hi:
            raise ValueError(
                f"learning rate {self.learning_rate} outside [{lo}, {hi}]; "
                "pass allow_any_rate=True to override"
            )


class _Bank:
    """All membership functions of a system as flat parameter arrays."""

    def __init__(self, fis):
        self.var = []
        self.bell = []
        self.sizes = []
        self.universe = []
        for v, variable in enumerate(fis.inputs):
            for mf in variable.partitions:
                self.var.append(v)
                self.bell.append(isinstance(mf, BellMF))
                self.sizes.append(len(mf.params))
                self.universe.append(variable.universe)
        self.var = np.asarray(self.var, dtype=np.intp)
        self.bell = np.asarray(self.bell, dtype=bool)
        self.universe = np.asarray(self.universe, dtype=float).reshape(-1, 2)
        self.n_cols = len(self.sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.intp)
        # padded (cols, 3) view: bell (p, q, r), gaussian (mu, sigma, -)
        self.padded = np.zeros((self.n_cols, 3))
        self.mask = np.zeros((self.n_cols, 3), dtype=bool)
        for c, size in enumerate(self.sizes):
            self.mask[c, :size] = True

    def set_flat(self, theta):
        self.padded[self.mask] = theta

    def flat(self):
        return self.padded[self.mask].copy()

    def evaluate(self, x):
        """Degrees ``(S, cols)`` and partials ``(S, cols, 3)``."""
        xs = x[:, self.var]
        mu = np.empty_like(xs)
        grads = np.zeros(xs.shape + (3,))
        b = self.bell
        if b.any():
            p, q, r = self.padded[b, 0], self.padded[b, 1], self.padded[b, 2]
            d = xs[:, b] - r
            z = np.abs(d) / p
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                log_z = np.log(z)
                u = np.exp(2.0 * q * log_z)
                m = 1.0 / (1.0 + u)
                m2u = m * m * u
                g = np.stack(
                    [
                        m2u * 2.0 * q / p,
                        np.where(z > 0, -2.0 * m2u * log_z, 0.0),
                        np.where(d != 0, 2.0 * q * m2u / np.where(d != 0, d, 1.0), 0.0),
                    ],
                    axis=-1,
                )
            mu[:, b] = m
            grads[:, b] = np.where(np.isfinite(g), g, 0.0)
        gs = ~b
        if gs.any():
            c, s = self.padded[gs, 0], self.padded[gs, 1]
            d = xs[:, gs] - c
            m = np.exp(-(d**2) / (2.0 * s**2))
            mu[:, gs] = m
            grads[:, gs, 0] = m * d / s**2
            grads[:, gs, 1] = m * d**2 / s**3
        return mu, grads

    def clamp(self, floor):
        """Project onto the feasible set: widths/slopes >= floor, centers in range."""
        b = self.bell
        lo, hi = self.universe[:, 0], self.universe[:, 1]
        self.padded[b, 0] = np.maximum(self.padded[b, 0], floor)
        self.padded[b, 1] = np.maximum(self.padded[b, 1], floor)
        self.padded[b, 2] = np.clip(self.padded[b, 2], lo[b], hi[b])
        g = ~b
        self.padded[g, 0] = np.clip(self.padded[g, 0], lo[g], hi[g])
        self.padded[g, 1] = np.maximum(self.padded[g, 1], floor)

    def partitions(self, fis):
        out = []
        c = 0
        for variable in fis.inputs:
            parts = []
            for mf in variable.partitions:
                parts.append(mf.with_params(tuple(self.padded[c, : self.sizes[c]])))
                c += 1
            out.append(parts)
        return out


def mf_parameters(fis):
    """Flat vector of every MF parameter, input by input, in ``params`` order."""
    return np.array(
        [v for var in fis.inputs for mf in var.partitions for v in mf.params], dtype=float
    )


def with_mf_parameters(fis, theta):
    """Copy of ``fis`` with MF parameters taken from a flat vector."""
    theta = np.asarray(theta, dtype=float)
    bank = _Bank(fis)
    if theta.shape != (int(bank.offsets[-1]),):
        raise ValueError(f"expected {int(bank.offsets[-1])} parameters, got {theta.shape}")
    bank.set_flat(theta)
    return fis.replace_partitions(bank.partitions(fis))


def _data_arrays(fis, data):
    targets = np.asarray(data.targets, dtype=float).ravel()
    if targets.size == 0:
        raise EmptyDataset("cannot differentiate over an empty dataset")
    x = np.asarray(data.inputs, dtype=float).reshape(targets.size, -1)
    if x.shape[1] != fis.n_inputs:
        raise ValueError(f"expected {fis.n_inputs} input columns, got {x.shape[1]}")
    return x, targets


def _check_strict(bank, plan, x, trace):
    b = bank.bell
    if b.any():
        at_center = x[:, bank.var[b]] == bank.padded[b, 2]
        kink = at_center & (bank.padded[b, 1] <= 0.5)
        if kink.any():
            raise NonDifferentiablePoint("sample lies on a bell center with q <= 0.5")
    if plan.fixed_min:
        cols = np.maximum(plan.rule_cols, 0)
        gathered = np.where(plan.rule_cols[None] >= 0, trace.deg[:, cols], np.inf)
        ties = (gathered == trace.w[:, :, None]).sum(axis=-1) > 1
        if ties.any():
            raise NonDifferentiablePoint("tie in the minimum of a rule's antecedent")
        for k, (_, chosen) in enumerate(plan.virtual):
            vals = trace.mu[:, list(chosen)]
            if ((vals == vals.max(axis=1, keepdims=True)).sum(axis=1) > 1).any():
                raise NonDifferentiablePoint("tie in the maximum of a label set")


def _loss_and_grad(bank, plan, x, targets, strict=False, operators=False):
    mu, partials = bank.evaluate(x)
    trace = _engine.forward(plan, x, keep=True, mu=mu)
    if strict:
        _check_strict(bank, plan, x, trace)
    resid = trace.y - targets
    dy = resid / targets.size
    dmu, d_tp, d_sp = _engine.backward(plan, trace, dy, operators=operators)
    # fixed accumulation order over samples keeps results reproducible
    g = np.einsum("sc,sck->ck", dmu, partials)
    return float(np.sqrt(np.mean(resid**2))), g[bank.mask], d_tp, d_sp


def _plan_for(fis):
    if fis.kind is not FisKind.TAKAGI_SUGENO:
        raise UnsupportedFisKind(f"{fis.kind.value} systems cannot be fine-tuned")
    return fis.plan


def mf_gradients(fis, data, strict=False):
    """Gradient of ``0.5 * mean((y_hat - y)^2)`` w.r.t. every MF parameter.

    The layout matches :func:`mf_parameters`.  In the default mode kinks get
    subgradient conventions; ``strict=True`` raises NonDifferentiablePoint.
    """
    plan = _plan_for(fis)
    x, targets = _data_arrays(fis, data)
    bank = _Bank(fis)
    bank.set_flat(mf_parameters(fis))
    return _loss_and_grad(bank, plan, x, targets, strict=strict)[1]


def operator_gradients(fis, data):
    """Loss gradient w.r.t. ``(tnorm_p, tconorm_p)``; zeros in fixed-min mode."""
    plan = _plan_for(fis)
    x, targets = _data_arrays(fis, data)
    bank = _Bank(fis)
    bank.set_flat(mf_parameters(fis))
    _, _, d_tp, d_sp = _loss_and_grad(bank, plan, x, targets, operators=True)
    return np.array([d_tp, d_sp])


def gd_finetune(fis, data, spec):
    """Full-batch gradient descent on the MF parameters of ``fis``.

    Returns ``(tuned_fis, trace)`` where ``trace[e]`` is the training RMSE
    after ``e`` updates (``trace[0]`` is the starting point).
    """
    _bump()
    plan = _plan_for(fis)
    x, targets = _data_arrays(fis, data)
    bank = _Bank(fis)
    bank.set_flat(mf_parameters(fis))
    lr = spec.learning_rate
    tune_ops = spec.tune_operators and not plan.fixed_min
    if tune_ops:
        # the compiled plan is private to this call once operators move
        plan = _engine.Plan(fis)
    trace = []
    for _ in range(spec.epochs):
        err, g, d_tp, d_sp = _loss_and_grad(
            bank, plan, x, targets, strict=spec.strict, operators=tune_ops
        )
        trace.append(err)
        if lr == 0.0:
            continue
        bank.set_flat(bank.flat() - lr * g)
        bank.clamp(spec.floor)
        if tune_ops:
            plan.tnorm_p = float(np.clip(plan.tnorm_p - lr * d_tp, P_MIN, P_MAX))
            plan.tconorm_p = float(np.clip(plan.tconorm_p - lr * d_sp, P_MIN, P_MAX))
    mu, _ = bank.evaluate(x)
    final = _engine.forward(plan, x, mu=mu).y
    trace.append(float(np.sqrt(np.mean((final - targets) ** 2))))
    if lr == 0.0:
        return fis, trace
    tuned = fis.replace_partitions(bank.partitions(fis))
    if tune_ops:
        tuned = _replace_operators(tuned, plan.tnorm_p, plan.tconorm_p)
    return tuned, trace


def _replace_operators(fis, tnorm_p, tconorm_p):
    return replace(fis, operators=OperatorParams(tnorm_p, tconorm_p, False))


def write_loss_trace(trace, path):
    """CSV with columns ``epoch,train_rmse``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rmse"])
        for epoch, value in enumerate(trace):
            writer.writerow([epoch, repr(float(value))])
