"""Vectorized Takagi-Sugeno forward pass and its reverse-mode derivatives.

A system is first compiled into a :class:`Plan`: every membership function of
every input becomes a *label column*, every multi-label antecedent
(``several bits set for one variable``) becomes an extra *virtual column*
holding the T-conorm of its labels, and the active rules become an incidence
matrix over those columns.

The Schweizer-Sklar T-norm of k degrees is

    T(a_1..a_k) = (sum_i a_i^-p - (k - 1)) ^ (-1/p)

so for moderate exponents the per-rule sums are a single matrix product of
``deg^-p`` with the incidence matrix.  Sample/rule pairs where ``deg^-p`` (or
its derivative) would overflow are recomputed exactly in log space; the two
paths agree to rounding.
"""

import os
from dataclasses import dataclass

import numpy as np

try:
    from evonf import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

FIRE_EPS = 1e-12
# exp() arguments above this are routed through the log-space path
_EXP_LIMIT = 690.0


def ss_reduce(a, p, grad=False):
    """Schweizer-Sklar T-norm reduced over the last axis of ``a``.

    Any zero argument makes the result exactly 0.  With ``grad=True`` also
    returns dT/da (same shape as ``a``) and dT/dp (shape of the result).
    """
    a = np.asarray(a, dtype=float)
    k = a.shape[-1]
    zero = a <= 0.0
    n_zero = zero.sum(axis=-1)
    with np.errstate(divide="ignore"):
        la = np.where(zero, 0.0, np.log(np.where(zero, 1.0, a)))
    big = -p * la
    top = big.max(axis=-1)
    scaled = np.exp(big - top[..., None]).sum(axis=-1) - (k - 1) * np.exp(-top)
    log_s = top + np.log(scaled)
    log_t = -log_s / p
    t = np.where(n_zero > 0, 0.0, np.exp(log_t))
    if not grad:
        return t
    da = np.exp((p + 1.0) * (log_t[..., None] - la))
    da = np.where(n_zero[..., None] > 0, 0.0, da)
    # a single zero argument: T(a, rest) ~ a near 0, so the slope there is 1
    da = np.where((n_zero[..., None] == 1) & zero, 1.0, da)
    weighted = (la * np.exp(big - log_s[..., None])).sum(axis=-1)
    dp = t * (log_s / p**2 + weighted / p)
    dp = np.where(n_zero > 0, 0.0, dp)
    return t, da, dp


def min_reduce(a):
    """Minimum over the last axis with the index receiving the subgradient.

    Ties go to the lowest index.
    """
    idx = np.argmin(a, axis=-1)
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0], idx


def max_reduce(a):
    idx = np.argmax(a, axis=-1)
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0], idx


class Plan:
    """Column/rule layout of one fuzzy inference system."""

    def __init__(self, fis):
        self.n_inputs = len(fis.inputs)
        self.mfs = []
        self.mf_var = []
        offsets = []
        for v, var in enumerate(fis.inputs):
            offsets.append(len(self.mfs))
            for mf in var.partitions:
                self.mfs.append(mf)
                self.mf_var.append(v)
        self.n_base = len(self.mfs)
        self.virtual = []  # (variable, tuple of base columns)
        virtual_index = {}
        rules = [r for r in fis.rules if r.active]
        cols = np.full((len(rules), self.n_inputs), -1, dtype=np.intp)
        for i, rule in enumerate(rules):
            for v, mask in enumerate(rule.antecedent):
                chosen = tuple(offsets[v] + j for j, bit in enumerate(mask) if bit)
                if not chosen:
                    continue
                if len(chosen) == 1:
                    cols[i, v] = chosen[0]
                    continue
                if chosen not in virtual_index:
                    virtual_index[chosen] = self.n_base + len(self.virtual)
                    self.virtual.append((v, chosen))
                cols[i, v] = virtual_index[chosen]
        self.n_cols = self.n_base + len(self.virtual)
        width = max((len(c) for _, c in self.virtual), default=1)
        self.vcols = np.full((len(self.virtual), width), -1, dtype=np.intp)
        for k, (_, chosen) in enumerate(self.virtual):
            self.vcols[k, : len(chosen)] = chosen
        self.rule_cols = cols
        self.n_rules = len(rules)
        incidence = np.zeros((self.n_cols, self.n_rules))
        for i in range(self.n_rules):
            used = cols[i][cols[i] >= 0]
            incidence[used, i] = 1.0
        self.incidence = incidence
        self.n_used = (cols >= 0).sum(axis=1).astype(float)
        self.coeffs = np.array([r.consequent for r in rules], dtype=float).reshape(
            self.n_rules, self.n_inputs + 1
        )
        ops = fis.operators
        self.fixed_min = ops.fixed_min
        self.tnorm_p = ops.tnorm_p
        self.tconorm_p = ops.tconorm_p


@dataclass
class Trace:
    x: np.ndarray
    mu: np.ndarray
    deg: np.ndarray
    w: np.ndarray
    f: np.ndarray
    total: np.ndarray
    fallback: np.ndarray
    y: np.ndarray
    # per virtual column: derivative of the aggregated degree wrt its labels
    virtual_da: list
    virtual_dp: list
    # T-norm bookkeeping
    log_deg: np.ndarray = None
    u: np.ndarray = None
    s: np.ndarray = None
    bad: np.ndarray = None
    bad_rows: np.ndarray = None
    bad_rules: np.ndarray = None
    bad_da: np.ndarray = None
    bad_dp: np.ndarray = None
    arg: np.ndarray = None
    # compiled route
    compiled: bool = False
    v: np.ndarray = None
    log_s: np.ndarray = None
    ratio: np.ndarray = None


def use_compiled():
    """Whether the numba kernels are active (``EVONF_PURE_NUMPY=1`` disables)."""
    return _kernels is not None and os.environ.get("EVONF_PURE_NUMPY", "") != "1"


def membership(plan, x):
    mu = np.empty((x.shape[0], plan.n_base))
    for c, mf in enumerate(plan.mfs):
        mu[:, c] = mf(x[:, plan.mf_var[c]])
    return mu


def _aggregate_labels(plan, mu, keep, compiled=False):
    """Degrees of every column (labels plus T-conorm aggregated label sets)."""
    deg = np.empty((mu.shape[0], plan.n_cols))
    deg[:, : plan.n_base] = mu
    if compiled and plan.virtual and not plan.fixed_min:
        n, v = mu.shape[0], len(plan.virtual)
        da = np.empty((n, v, plan.vcols.shape[1]) if keep else (0, 0, 0))
        dp = np.empty((n, v) if keep else (0, 0))
        q = plan.tconorm_p
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            la = np.log(1.0 - mu)
            bad = -(q + 1.0) * la > _EXP_LIMIT
            safe = np.where(bad, 0.0, la)
            u = np.exp(-q * safe)
            vv = np.exp(-(q + 1.0) * safe) if keep else u
        _kernels.conorm_columns(la, u, vv, plan.vcols, plan.n_base, q, deg, da, dp, keep)
        if not keep:
            return deg, [], []
        das = [da[:, k, : len(chosen)] for k, (_, chosen) in enumerate(plan.virtual)]
        dps = [dp[:, k] for k in range(v)]
        return deg, das, dps
    das, dps = [], []
    for k, (_, chosen) in enumerate(plan.virtual):
        vals = mu[:, list(chosen)]
        if plan.fixed_min:
            deg[:, plan.n_base + k], arg = max_reduce(vals)
            das.append(arg)
            dps.append(None)
        elif keep:
            t, da, dp = ss_reduce(1.0 - vals, plan.tconorm_p, grad=True)
            deg[:, plan.n_base + k] = 1.0 - t
            das.append(da)
            dps.append(dp)
        else:
            deg[:, plan.n_base + k] = 1.0 - ss_reduce(1.0 - vals, plan.tconorm_p)
    return deg, das, dps


def _forward_compiled(plan, deg, keep):
    n = deg.shape[0]
    w = np.empty((n, plan.n_rules))
    extra = {"compiled": True}
    if plan.fixed_min:
        arg = np.empty((n, plan.n_rules), dtype=np.intp)
        _kernels.min_forward(deg, plan.rule_cols, w, arg)
        extra["arg"] = arg
        return w, extra
    p = plan.tnorm_p
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ld = np.log(deg)
        bad = -(p + 1.0) * ld > _EXP_LIMIT
        safe = np.where(bad, 0.0, ld)
        u = np.where(bad, 0.0, np.exp(-p * safe))
    sval = np.empty_like(w)
    log_s = np.empty_like(w)
    _kernels.ss_sums(ld, u, plan.rule_cols, plan.n_used, p, sval, log_s)
    fast = sval > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        np.log(sval, out=log_s, where=fast)
    np.exp(-log_s / p, out=w)
    ratio = np.where(fast, w / np.where(fast, sval, 1.0), -1.0)
    if keep:
        v = np.where(bad, 0.0, np.exp(-(p + 1.0) * safe))
        extra.update(log_deg=ld, v=v, log_s=log_s, ratio=ratio)
    return w, extra


def forward(plan, x, keep=False, mu=None, compiled=None):
    """Evaluate the system on the rows of ``x``; ``keep`` stores backprop data.

    ``mu`` may carry precomputed label degrees (samples x label columns).
    ``compiled`` picks the numba or the pure numpy route (default: numba
    when available).
    """
    x = np.asarray(x, dtype=float)
    if mu is None:
        mu = membership(plan, x)
    if compiled is None:
        compiled = use_compiled()
    deg, das, dps = _aggregate_labels(plan, mu, keep, compiled)
    n = x.shape[0]
    extra = {}
    if compiled:
        w, extra = _forward_compiled(plan, deg, keep)
    elif plan.fixed_min:
        gathered = np.where(
            plan.rule_cols[None, :, :] >= 0,
            deg[:, np.maximum(plan.rule_cols, 0)],
            np.inf,
        )
        w, arg = min_reduce(gathered)
        extra["arg"] = arg
    else:
        p = plan.tnorm_p
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            log_deg = np.log(deg)
            bad = -(p + 1.0) * log_deg > _EXP_LIMIT
            u = np.where(bad, 0.0, np.exp(-p * np.where(bad, 0.0, log_deg)))
            s = u @ plan.incidence - (plan.n_used - 1.0)
            w = np.exp(-np.log(s) / p)
        bad_pair = (bad.astype(float) @ plan.incidence) > 0
        rows, rules = np.nonzero(bad_pair)
        if rows.size:
            cols = plan.rule_cols[rules]
            vals = np.where(cols >= 0, deg[rows[:, None], np.maximum(cols, 0)], 1.0)
            if keep:
                w_bad, da, dp = ss_reduce(vals, p, grad=True)
                extra.update(bad_da=da, bad_dp=dp)
            else:
                w_bad = ss_reduce(vals, p)
            w[rows, rules] = w_bad
        extra.update(log_deg=log_deg, u=u, s=s, bad=bad, bad_rows=rows, bad_rules=rules)
    f = plan.coeffs[:, 0][None, :] + x @ plan.coeffs[:, 1:].T
    total = w.sum(axis=1)
    fallback = total < FIRE_EPS
    safe_total = np.where(fallback, 1.0, total)
    y = np.where(fallback, f.mean(axis=1), (w * f).sum(axis=1) / safe_total)
    trace = Trace(
        x=x, mu=mu, deg=deg, w=w, f=f, total=total, fallback=fallback, y=y,
        virtual_da=das, virtual_dp=dps,
    )
    if keep:
        for key, val in extra.items():
            setattr(trace, key, val)
    return trace


def backward(plan, trace, dy, operators=False):
    """Propagate dL/dy back to the label membership degrees.

    Returns ``(dmu, dtnorm_p, dtconorm_p)``; the operator terms are 0.0 unless
    ``operators`` is set and the system uses the parameterized family.
    """
    n = trace.x.shape[0]
    safe_total = np.where(trace.fallback, 1.0, trace.total)
    dw = (dy[:, None] * (trace.f - trace.y[:, None])) / safe_total[:, None]
    dw[trace.fallback] = 0.0
    ddeg = np.zeros((n, plan.n_cols))
    d_tp = 0.0
    d_sp = 0.0
    if trace.compiled:
        if plan.fixed_min:
            _kernels.min_backward(plan.rule_cols, trace.arg, dw, ddeg)
        else:
            d_tp = _kernels.ss_backward(
                trace.log_deg, trace.v, plan.rule_cols, plan.tnorm_p, trace.w,
                trace.log_s, trace.ratio, dw, ddeg, bool(operators),
            )
    elif plan.fixed_min:
        rows = np.repeat(np.arange(n), plan.n_rules)
        target = plan.rule_cols[np.arange(plan.n_rules)[None, :], trace.arg].ravel()
        np.add.at(ddeg, (rows, target), dw.ravel())
    else:
        p = plan.tnorm_p
        good = dw.copy()
        if trace.bad_rows.size:
            good[trace.bad_rows, trace.bad_rules] = 0.0
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ratio = np.where(good != 0.0, trace.w / trace.s, 0.0)
            scale = np.exp(np.where(trace.bad, 0.0, -(p + 1.0) * trace.log_deg))
        ddeg += np.where(trace.bad, 0.0, ((good * ratio) @ plan.incidence.T) * scale)
        if trace.bad_rows.size:
            cols = plan.rule_cols[trace.bad_rules]
            contrib = dw[trace.bad_rows, trace.bad_rules][:, None] * trace.bad_da
            keep = cols >= 0
            np.add.at(
                ddeg,
                (np.broadcast_to(trace.bad_rows[:, None], cols.shape)[keep], cols[keep]),
                contrib[keep],
            )
        if operators:
            with np.errstate(invalid="ignore"):
                ld = np.where(trace.bad, 0.0, trace.log_deg)
                inner = (trace.u * ld) @ plan.incidence
                log_s = np.log(trace.s)
                dwdp = trace.w * (log_s / p**2 + inner / (p * trace.s))
            dwdp = np.where(good != 0.0, dwdp, 0.0)
            d_tp = float((good * dwdp).sum())
            if trace.bad_rows.size:
                d_tp += float((dw[trace.bad_rows, trace.bad_rules] * trace.bad_dp).sum())
    dmu = ddeg[:, : plan.n_base].copy()
    for k, (_, chosen) in enumerate(plan.virtual):
        g = ddeg[:, plan.n_base + k]
        chosen = np.asarray(chosen)
        if plan.fixed_min:
            np.add.at(dmu, (np.arange(n), chosen[trace.virtual_da[k]]), g)
        else:
            dmu[:, chosen] += g[:, None] * trace.virtual_da[k]
            if operators:
                d_sp -= float((g * trace.virtual_dp[k]).sum())
    return dmu, d_tp, d_sp
