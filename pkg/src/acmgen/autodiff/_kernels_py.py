"""Vectorised numpy implementations of the row kernels.

This is the fallback used when the compiled ``_kernels`` extension is not
available. Every function takes and returns C-contiguous float64 arrays and
mirrors the signature of its compiled counterpart exactly.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def softmax_fwd(x, causal_t=0):
    """Row softmax of a 2D array.

    With ``causal_t > 0`` the rows are treated as consecutive query positions
    of ``causal_t x causal_t`` score blocks, and entries right of the diagonal
    are excluded (output exactly 0).
    """
    if causal_t:
        t = causal_t
        rows = np.arange(x.shape[0]) % t
        keep = np.arange(t)[None, :] <= rows[:, None]
        z = np.where(keep, x, -np.inf)
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
    else:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    dot = (y * g).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def layernorm_bwd(g, xhat, rstd, gamma):
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    gx_hat = g * gamma
    m1 = gx_hat.mean(axis=1, keepdims=True)
    m2 = (gx_hat * xhat).mean(axis=1, keepdims=True)
    gx = (gx_hat - m1 - xhat * m2) * rstd[:, None]
    return gx, ggamma, gbeta


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_bwd(x, g):
    x2 = x * x
    th = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return g * d


def xent_fwd(logits, targets, mask):
    """Masked token cross-entropy.

    Returns ``(loss_sum, probs)`` where ``loss_sum`` is the sum over rows with
    nonzero mask of ``-log softmax(row)[target]`` weighted by the mask.
    """
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    nll = (np.log(s[:, 0]) + m[:, 0]) - logits[rows, targets]
    return float((nll * mask).sum()), probs


def xent_bwd(probs, targets, mask, scale):
    g = probs * (mask * scale)[:, None]
    rows = np.arange(probs.shape[0])
    g[rows, targets] -= mask * scale
    return g


def embedding_bwd(ids, g, n_rows):
    out = np.zeros((n_rows, g.shape[1]))
    np.add.at(out, ids, g)
    return out
