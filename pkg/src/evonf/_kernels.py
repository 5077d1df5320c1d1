"""Compiled per-(sample, rule) loops for the T-norm stage of the engine.

Each pair is reduced over at most ``n_inputs`` columns.  Pairs whose
``deg^-(p+1)`` stays representable use the precomputed powers; the others
are evaluated in log space, so both routes are exact to rounding.
"""

import math

import numpy as np
from numba import njit

EXP_LIMIT = 690.0


@njit(cache=True)
def ss_sums(ld, u, cols, n_used, p, sval, log_s):
    """Per-pair ``s = sum deg^-p - (k - 1)``.

    ``ld`` is log(degree) per (sample, column) and ``u = deg^-p`` (only read
    where ``-(p + 1) * ld <= EXP_LIMIT``).  Pairs whose columns all pass
    that test get ``sval = s`` and are finished by the caller with
    vectorized log/exp.  The rest get ``sval = -1`` and ``log_s`` computed
    here in log space (``inf`` when a degree is exactly zero).
    """
    n_s = ld.shape[0]
    n_r, n_in = cols.shape
    for s in range(n_s):
        for r in range(n_r):
            zero = False
            ok = True
            top = -np.inf
            for j in range(n_in):
                c = cols[r, j]
                if c < 0:
                    continue
                x = ld[s, c]
                if x == -np.inf:
                    zero = True
                    break
                if -(p + 1.0) * x > EXP_LIMIT:
                    ok = False
                v = -p * x
                if v > top:
                    top = v
            k = n_used[r]
            if zero:
                sval[s, r] = -1.0
                log_s[s, r] = np.inf
            elif ok:
                tot = 0.0
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0:
                        tot += u[s, c]
                sval[s, r] = tot - (k - 1.0)
            else:
                tot = 0.0
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0:
                        tot += math.exp(-p * ld[s, c] - top)
                sval[s, r] = -1.0
                log_s[s, r] = top + math.log(tot - (k - 1.0) * math.exp(-top))


@njit(cache=True)
def ss_backward(ld, v, cols, p, w, log_s, ratio, g, ddeg, want_dp):
    """Accumulate ``g * dw/ddeg`` into ``ddeg``; returns ``sum g * dw/dp``.

    ``dw/ddeg_c = (w / deg_c)^(p + 1)`` and ``v = deg^-(p+1)`` where that
    is representable.
    """
    n_s = ld.shape[0]
    n_r, n_in = cols.shape
    dp = 0.0
    for s in range(n_s):
        for r in range(n_r):
            gw = g[s, r]
            if gw == 0.0:
                continue
            ls = log_s[s, r]
            if ls == np.inf:
                # zero degree: T(a, rest) ~ a near a = 0, so a lone zero gets slope 1
                n_zero = 0
                at = -1
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0 and ld[s, c] == -np.inf:
                        n_zero += 1
                        at = c
                if n_zero == 1:
                    ddeg[s, at] += gw
                continue
            lw = -ls / p
            if ratio[s, r] >= 0.0:
                # w^(p+1) = w / s
                scale = gw * ratio[s, r]
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0:
                        ddeg[s, c] += scale * v[s, c]
            else:
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0:
                        ddeg[s, c] += gw * math.exp((p + 1.0) * (lw - ld[s, c]))
            if want_dp:
                weighted = 0.0
                for j in range(n_in):
                    c = cols[r, j]
                    if c >= 0:
                        weighted += ld[s, c] * math.exp(-p * ld[s, c] - ls)
                dp += gw * w[s, r] * (ls / (p * p) + weighted / p)
    return dp


@njit(cache=True)
def min_forward(deg, cols, w, arg):
    """Minimum over each rule's columns; ties keep the lowest input index."""
    n_s = deg.shape[0]
    n_r, n_in = cols.shape
    for s in range(n_s):
        for r in range(n_r):
            best = np.inf
            at = 0
            for j in range(n_in):
                c = cols[r, j]
                if c >= 0 and deg[s, c] < best:
                    best = deg[s, c]
                    at = j
            w[s, r] = best
            arg[s, r] = at


@njit(cache=True)
def min_backward(cols, arg, g, ddeg):
    n_s, n_r = g.shape
    for s in range(n_s):
        for r in range(n_r):
            ddeg[s, cols[r, arg[s, r]]] += g[s, r]


@njit(cache=True)
def conorm_columns(la, u, v, vcols, n_base, p, deg, da, dp, want_grad):
    """Virtual columns ``1 - T(a_j)`` with ``a_j = 1 - mu_j`` over padded label sets.

    ``la = log(a)``; ``u = a^-p`` and ``v = a^-(p+1)`` are read only where
    ``-(p + 1) * la <= EXP_LIMIT`` (other sets go through log space).
    Writes ``deg[:, n_base + k]``; with ``want_grad`` also
    ``da[s, k, j] = dT/da_j`` and ``dp[s, k] = dT/dp``.
    """
    n_s = la.shape[0]
    n_v, width = vcols.shape
    for s in range(n_s):
        for k in range(n_v):
            n_zero = 0
            kk = 0
            ok = True
            top = -np.inf
            for j in range(width):
                c = vcols[k, j]
                if c < 0:
                    continue
                kk += 1
                x = la[s, c]
                if x == -np.inf:
                    n_zero += 1
                    continue
                if -(p + 1.0) * x > EXP_LIMIT:
                    ok = False
                if -p * x > top:
                    top = -p * x
            if n_zero > 0:
                deg[s, n_base + k] = 1.0
                if want_grad:
                    dp[s, k] = 0.0
                    for j in range(width):
                        c = vcols[k, j]
                        lone = n_zero == 1 and c >= 0 and la[s, c] == -np.inf
                        da[s, k, j] = 1.0 if lone else 0.0
                continue
            if ok:
                tot = 0.0
                for j in range(width):
                    c = vcols[k, j]
                    if c >= 0:
                        tot += u[s, c]
                sv = tot - (kk - 1.0)
                log_s = math.log(sv)
                t = math.exp(-log_s / p)
                deg[s, n_base + k] = 1.0 - t
                if want_grad:
                    weighted = 0.0
                    for j in range(width):
                        c = vcols[k, j]
                        if c >= 0:
                            # (t / a)^(p+1) = (t / s) * a^-(p+1)
                            da[s, k, j] = t / sv * v[s, c]
                            weighted += la[s, c] * u[s, c]
                        else:
                            da[s, k, j] = 0.0
                    dp[s, k] = t * (log_s / (p * p) + weighted / (sv * p))
                continue
            tot = 0.0
            for j in range(width):
                c = vcols[k, j]
                if c >= 0:
                    tot += math.exp(-p * la[s, c] - top)
            log_s = top + math.log(tot - (kk - 1.0) * math.exp(-top))
            log_t = -log_s / p
            t = math.exp(log_t)
            deg[s, n_base + k] = 1.0 - t
            if want_grad:
                weighted = 0.0
                for j in range(width):
                    c = vcols[k, j]
                    if c >= 0:
                        da[s, k, j] = math.exp((p + 1.0) * (log_t - la[s, c]))
                        weighted += la[s, c] * math.exp(-p * la[s, c] - log_s)
                    else:
                        da[s, k, j] = 0.0
                dp[s, k] = t * (log_s / (p * p) + weighted / p)
