"""Independent reference computations used by the test-suite."""

import math

import numpy as np

from acmgen.autodiff import Tensor, backward, no_grad


def numeric_grad(fn, arrays, h=1e-5, richardson=False):
    """Central differences of scalar ``fn(*tensors)`` w.r.t. every array.

    With ``richardson`` the estimates at ``h`` and ``h/2`` are combined to
    cancel the O(h^2) term, which allows a large step and keeps roundoff
    small for losses built from many operations.
    """
    if richardson:
        coarse = numeric_grad(fn, arrays, h)
        fine = numeric_grad(fn, arrays, h / 2)
        return [(4 * f - c) / 3 for c, f in zip(coarse, fine)]
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [a.copy() for a in arrays]
                pert[k][idx] += sign * h
                with no_grad():
                    vals.append(float(fn(*[Tensor(p) for p in pert]).data))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def max_rel_err(a, n, floor=1e-6):
    a = np.asarray(a).ravel()
    n = np.asarray(n).ravel()
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def scalar_xent(logits, targets, mask):
    """Loop-by-loop masked cross-entropy."""
    total = 0.0
    count = 0.0
    for row, t, m in zip(logits, targets, mask):
        if not m:
            continue
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        total += m * (lse - row[t])
        count += m
    return total / count


def scalar_adamw(p, g, m, v, step, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    p = p - lr * wd * p - lr * mhat / (math.sqrt(vhat) + eps)
    return p, m, v


def scalar_gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def scalar_adapter(o, down_w, down_b, up_w, up_b):
    """``o + up(gelu(down(o)))`` with explicit loops, one row at a time."""
    d, b = down_w.shape
    out = np.zeros_like(o)
    for r in range(o.shape[0]):
        hid = [scalar_gelu(sum(o[r, i] * down_w[i, j] for i in range(d)) + down_b[j])
               for j in range(b)]
        for k in range(d):
            out[r, k] = o[r, k] + sum(hid[j] * up_w[j, k] for j in range(b)) + up_b[k]
    return out


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]
