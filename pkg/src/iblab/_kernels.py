"""Compiled inner loops for long exponential-loss runs.

Each kernel reproduces the corresponding generic step function in
``optimizers`` and exists only because the runs need 10^6 to 10^8 steps.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def adagrad_exponential(Z, w, G, G_lo, eta, n_steps):
    """AdaGrad on ``sum_n exp(-<w, z_n>)`` with compensated accumulation.

    Also returns the partial sum of ``||G_t^{-1/2} grad L(w_t)||_2^2``.
    """
    N, d = Z.shape
    w = w.copy()
    G = G.copy()
    G_lo = G_lo.copy()
    g = np.empty(d)
    precond_sq = 0.0
    for _ in range(n_steps):
        g[:] = 0.0
        for n in range(N):
            m = 0.0
            for i in range(d):
                m += Z[n, i] * w[i]
            e = np.exp(-m)
            for i in range(d):
                g[i] -= e * Z[n, i]
        for i in range(d):
            x = g[i] * g[i]
            s = G[i] + x
            if abs(G[i]) >= abs(x):
                G_lo[i] += (G[i] - s) + x
            else:
                G_lo[i] += (x - s) + G[i]
            G[i] = s
        for i in range(d):
            scaled = g[i] / np.sqrt(G[i] + G_lo[i])
            precond_sq += scaled * scaled
            w[i] -= eta * scaled
    return w, G, G_lo, precond_sq


@numba.njit(cache=True)
def factored_exponential_damped(Z, U, c, B, n_steps):
    """Factorized GD on the exponential loss with step ``c / (B^2 L max(1, ||W||_F))``.

    ``Z`` holds the signed feature matrices ``y_n X_n``.
    """
    N, d, _ = Z.shape
    U = U.copy()
    m = np.empty(N)
    for _ in range(n_steps):
        W = U @ U.T
        for n in range(N):
            m[n] = np.sum(W * Z[n])
        weights = np.exp(-(m - m.min()))
        weights /= weights.sum()
        S = np.zeros((d, d))
        for n in range(N):
            S += weights[n] * Z[n]
        S = S + S.T
        eta = c / (B * B) / max(1.0, np.sqrt(np.sum(W * W)))
        U = U + eta * (S @ U)
    return U


LP, L1_AVERAGE, L1_FIRST, LINF = 0, 1, 2, 3


@numba.njit(cache=True)
def steepest_exponential_adaptive(Z, w, c, B, q, mode, n_steps):
    """Steepest descent on ``sum_n exp(-<w, z_n>)`` with step ``c / (B^2 L)``.

    Works with the loss-normalized gradient ``g / L``. ``mode`` selects the
    duality map: lp with dual exponent ``q``, l1 coordinate steps (average or
    first-index ties) or l-infinity sign steps. Returns the final iterate and
    run diagnostics: the sum of squared dual norms of the normalized
    gradient, the sum of ``eta_t ||grad L||_*^2`` divided by the starting
    loss (so it stays representable when ``L`` underflows), the largest
    one-step increase of ``log L`` and the final ``log L``.
    """
    N, d = Z.shape
    w = w.copy()
    m = np.empty(N)
    g = np.empty(d)
    step = c / (B * B)
    sum_sq = 0.0
    sum_eta_grad = 0.0
    max_increase = -np.inf
    log_prev = np.nan
    log_start = 0.0
    for k in range(n_steps + 1):
        for n in range(N):
            acc = 0.0
            for i in range(d):
                acc += Z[n, i] * w[i]
            m[n] = acc
        low = m.min()
        total = 0.0
        for n in range(N):
            total += np.exp(-(m[n] - low))
        log_L = np.log(total) - low
        if k == 0:
            log_start = log_L
        else:
            max_increase = max(max_increase, log_L - log_prev)
        log_prev = log_L
        if k == n_steps:
            break
        g[:] = 0.0
        for n in range(N):
            weight = np.exp(-(m[n] - low)) / total
            for i in range(d):
                g[i] -= weight * Z[n, i]
        if mode == LP:
            nrm = 0.0
            for i in range(d):
                nrm += abs(g[i]) ** q
            nrm = nrm ** (1.0 / q)
            dual = nrm
            if nrm > 0:
                for i in range(d):
                    w[i] -= step * np.sign(g[i]) * (abs(g[i]) / nrm) ** (q - 1) * nrm
        elif mode == LINF:
            dual = 0.0
            for i in range(d):
                dual += abs(g[i])
            for i in range(d):
                w[i] -= step * dual * np.sign(g[i])
        else:
            top = 0.0
            for i in range(d):
                top = max(top, abs(g[i]))
            dual = top
            count = 0
            for i in range(d):
                if abs(g[i]) >= top * (1 - 1e-12):
                    count += 1
                    if mode == L1_FIRST:
                        break
            seen = 0
            for i in range(d):
                if abs(g[i]) >= top * (1 - 1e-12) and seen < count:
                    w[i] -= step * g[i] / count
                    seen += 1
        sum_sq += dual * dual
        sum_eta_grad += step * np.exp(log_L - log_start) * dual * dual
    return w, sum_sq, sum_eta_grad, max_increase, log_prev
