"""Compiled inner loop for SGD on the least-squares problem.

Randomness is drawn outside (numpy generators) and handed in per chunk, so the
kernel is a pure function of its inputs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MODE_PLAIN = 0
MODE_MASK = 1
MODE_PROJ = 2

FINITE_CHECK_EVERY = 1024

STATUS_OK = 0
STATUS_NONFINITE = 1


@njit(cache=True)
def _record(theta, theta_star, A, decay, reshuf, comp, decompose, out, row):
    d = theta.shape[0]
    err_sq = 0.0
    grad_sq = 0.0
    sub = 0.0
    for a in range(d):
        ea = theta[a] - theta_star[a]
        err_sq += ea * ea
        ga = 0.0
        for c in range(d):
            ga += A[a, c] * (theta[c] - theta_star[c])
        grad_sq += ga * ga
        sub += 0.5 * ea * ga
    out[row, 0] = err_sq
    out[row, 1] = grad_sq
    out[row, 2] = sub
    if decompose:
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for a in range(d):
            s0 += decay[a] * decay[a]
            s1 += reshuf[a] * reshuf[a]
            s2 += comp[a] * comp[a]
        out[row, 3] = s0
        out[row, 4] = s1
        out[row, 5] = s2
        resid = 0.0
        for a in range(d):
            r = decay[a] + reshuf[a] + comp[a] - (theta[a] - theta_star[a])
            resid += r * r
        out[row, 6] = np.sqrt(resid)


@njit(cache=True)
def _all_finite(v):
    for a in range(v.shape[0]):
        if not np.isfinite(v[a]):
            return False
    return True


@njit(cache=True)
def run_chunk(theta, X, y, A, theta_star, t0, sample_idx, eta, mode,
              masks, mask_row, proj, proj_row, proj_scale,
              decompose, decay, reshuf, comp,
              ck, ck_pos, out):
    """Advance ``theta`` in place through one chunk of steps.

    Returns ``(ck_pos, status, step)``; ``step`` is the global step at which a
    non-finite iterate was detected, or -1.
    """
    d = theta.shape[0]
    n = sample_idx.shape[0]
    n_ck = ck.shape[0]
    grad = np.empty(d)
    g = np.empty(d)
    e = np.empty(d)
    tmp = np.empty(proj.shape[2])
    ad = np.empty(d)
    ar = np.empty(d)
    ac = np.empty(d)
    fg = np.empty(d)
    for s in range(n):
        t = t0 + s
        while ck_pos < n_ck and ck[ck_pos] == t:
            _record(theta, theta_star, A, decay, reshuf, comp, decompose, out, ck_pos)
            ck_pos += 1
            if not _all_finite(theta):
                return ck_pos, STATUS_NONFINITE, t
        i = sample_idx[s]
        r = -y[i]
        for a in range(d):
            r += X[i, a] * theta[a]
        for a in range(d):
            grad[a] = 2.0 * r * X[i, a]
        m = mode[s]
        if m == MODE_MASK:
            row = mask_row[s]
            for a in range(d):
                g[a] = masks[row, a] * grad[a]
        elif m == MODE_PROJ:
            row = proj_row[s]
            k = proj.shape[2]
            for c in range(k):
                acc = 0.0
                for a in range(d):
                    acc += proj[row, a, c] * grad[a]
                tmp[c] = acc
            for a in range(d):
                acc = 0.0
                for c in range(k):
                    acc += proj[row, a, c] * tmp[c]
                g[a] = proj_scale * acc
        else:
            for a in range(d):
                g[a] = grad[a]
        h = eta[s]
        if decompose:
            for a in range(d):
                e[a] = theta[a] - theta_star[a]
            for a in range(d):
                s_d = 0.0
                s_r = 0.0
                s_c = 0.0
                s_f = 0.0
                for c in range(d):
                    s_d += A[a, c] * decay[c]
                    s_r += A[a, c] * reshuf[c]
                    s_c += A[a, c] * comp[c]
                    s_f += A[a, c] * e[c]
                ad[a] = s_d
                ar[a] = s_r
                ac[a] = s_c
                fg[a] = s_f
            for a in range(d):
                decay[a] -= h * ad[a]
                reshuf[a] += h * (fg[a] - grad[a]) - h * ar[a]
                comp[a] += h * (grad[a] - g[a]) - h * ac[a]
        for a in range(d):
            theta[a] -= h * g[a]
        if (t + 1) % FINITE_CHECK_EVERY == 0 and not _all_finite(theta):
            return ck_pos, STATUS_NONFINITE, t + 1
    return ck_pos, STATUS_OK, -1
