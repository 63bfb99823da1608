"""Vectorised numpy implementations of the hot kernels.

Every function here has a twin in ``_numba`` with the same signature and
semantics; the two are checked against each other in the test-suite.
All 2-D inputs are C-contiguous float64 with rows as the reduced axis.
"""
import numpy as np


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_rows_backward(g, xhat, rstd, gamma):
    d = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = (rstd[:, None] / d) * (
        d * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def cross_entropy_rows(logits, targets, ignore_index, smoothing):
    """Summed label-smoothed NLL over kept rows and its gradient w.r.t. logits.

    Returns ``(loss_sum, kept, dlogits)`` where ``dlogits`` is the gradient of
    ``loss_sum`` (not of the mean).
    """
    n, v = logits.shape
    keep = targets != ignore_index
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe_t = np.where(keep, targets, 0)
    nll = -logp[np.arange(n), safe_t]
    smooth = -logp.mean(axis=1)
    per_row = (1.0 - smoothing) * nll + smoothing * smooth
    loss_sum = float(per_row[keep].sum())
    p = np.exp(logp)
    d = p - smoothing / v
    d[np.arange(n), safe_t] -= 1.0 - smoothing
    d[~keep] = 0.0
    return loss_sum, int(keep.sum()), d


def scatter_add_rows(n_rows, ids, g):
    out = np.zeros((n_rows, g.shape[1]))
    np.add.at(out, ids, g)
    return out


def bootstrap_sums(stats, idx):
    """Sum per-sentence statistic rows for every resample (row of ``idx``)."""
    return stats[idx].sum(axis=1)
