"""numba-compiled kernels; loop-level twins of ``_numpy``."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    n, v = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(v):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_rows_backward(y, g):
    n, v = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(v):
            dot += g[i, j] * y[i, j]
        for j in range(v):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def layer_norm_rows(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_rows_backward(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gx = g[i, j] * gamma[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        k = rstd[i] / d
        for j in range(d):
            dx[i, j] = k * (d * g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx, dgamma, dbeta


@njit(cache=True)
def cross_entropy_rows(logits, targets, ignore_index, smoothing):
    n, v = logits.shape
    d = np.zeros_like(logits)
    loss = 0.0
    kept = 0
    for i in range(n):
        t = targets[i]
        if t == ignore_index:
            continue
        kept += 1
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        total = 0.0
        for j in range(v):
            e = math.exp(logits[i, j] - m)
            d[i, j] = e
            s += e
            total += logits[i, j]
        lse = math.log(s)
        inv = 1.0 / s
        for j in range(v):
            d[i, j] = d[i, j] * inv - smoothing / v
        mean_logp = total / v - m - lse
        nll = -(logits[i, t] - m - lse)
        loss += (1.0 - smoothing) * nll - smoothing * mean_logp
        d[i, t] -= 1.0 - smoothing
    return loss, kept, d


@njit(cache=True)
def scatter_add_rows(n_rows, ids, g):
    out = np.zeros((n_rows, g.shape[1]))
    for i in range(ids.shape[0]):
        r = ids[i]
        for j in range(g.shape[1]):
            out[r, j] += g[i, j]
    return out


@njit(cache=True)
def bootstrap_sums(stats, idx):
    r, n = idx.shape
    k = stats.shape[1]
    out = np.zeros((r, k))
    for a in range(r):
        for b in range(n):
            row = idx[a, b]
            for c in range(k):
                out[a, c] += stats[row, c]
    return out
