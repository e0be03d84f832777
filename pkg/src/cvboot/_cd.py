"""Numba kernel for weighted coordinate descent on a penalized least-squares surrogate.

Minimizes (1 / (2 W)) * sum_i u_i (r_i)^2 + sum_j lam_j |beta_j| where the
residual r = y_c - X_c beta is kept up to date in place. Columns of X_c must
already be centered under the weights u, so the unpenalized intercept
decouples from the slopes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _kkt_violation(xt, u, r, beta, lam, xsq, inv_w):
    p, n = xt.shape
    worst = 0.0
    for j in range(p):
        if xsq[j] <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += u[i] * xt[j, i] * r[i]
        g = -g * inv_w
        if beta[j] != 0.0:
            v = abs(g + lam[j] * np.sign(beta[j]))
        else:
            v = abs(g) - lam[j]
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def cd_solve(xt, u, r, beta, lam, xsq, inv_w, tol, max_sweeps):
    """Run coordinate descent in place; returns (sweeps, kkt_violation)."""
    p, n = xt.shape
    active = np.zeros(p, dtype=np.bool_)
    sweeps = 0
    viol = np.inf
    while sweeps < max_sweeps:
        # full sweep over every coordinate
        max_delta = 0.0
        for j in range(p):
            if xsq[j] <= 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += u[i] * xt[j, i] * r[i]
            rho = rho * inv_w + xsq[j] * beta[j]
            new = _soft(rho, lam[j]) / xsq[j]
            d = new - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * xt[j, i]
                beta[j] = new
                dd = abs(d) * np.sqrt(xsq[j])
                if dd > max_delta:
                    max_delta = dd
            active[j] = new != 0.0
        sweeps += 1
        # iterate on the active set until it settles
        while sweeps < max_sweeps and max_delta > tol * 0.1:
            max_delta = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                rho = 0.0
                for i in range(n):
                    rho += u[i] * xt[j, i] * r[i]
                rho = rho * inv_w + xsq[j] * beta[j]
                new = _soft(rho, lam[j]) / xsq[j]
                d = new - beta[j]
                if d != 0.0:
                    for i in range(n):
                        r[i] -= d * xt[j, i]
                    beta[j] = new
                    dd = abs(d) * np.sqrt(xsq[j])
                    if dd > max_delta:
                        max_delta = dd
            sweeps += 1
        viol = _kkt_violation(xt, u, r, beta, lam, xsq, inv_w)
        if viol <= tol:
            break
    return sweeps, viol
