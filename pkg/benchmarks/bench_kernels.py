"""Time the compiled row kernels against the numpy fallback.

Shapes follow one desk-scale training step (batch 16, length 32, d=64,
4 heads, vocabulary ~540), plus one full forward/backward of the backbone
under each backend.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import importlib
import time

import numpy as np

from acmgen.autodiff import _kernels_py
from acmgen.autodiff import tensor as tensor_mod


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng, B=16, T=32, D=64, H=4, V=540):
    rows = B * T
    scores = np.ascontiguousarray(rng.normal(size=(B * H * T, T)))
    probs = _kernels_py.softmax_fwd(scores, T)
    x = rng.normal(size=(rows, D))
    gamma, beta = np.ones(D), np.zeros(D)
    _, xhat, rstd = _kernels_py.layernorm_fwd(x, gamma, beta, 1e-5)
    ff = rng.normal(size=(rows, 4 * D))
    logits = rng.normal(size=(rows, V))
    targets = rng.integers(0, V, size=rows).astype(np.int64)
    mask = (rng.random(rows) < 0.7).astype(float)
    _, xprobs = _kernels_py.xent_fwd(logits, targets, mask)
    g_rows = rng.normal(size=(rows, D))
    return {
        "softmax_fwd (causal)": lambda K: K.softmax_fwd(scores, T),
        "softmax_bwd": lambda K: K.softmax_bwd(probs, scores),
        "layernorm_fwd": lambda K: K.layernorm_fwd(x, gamma, beta, 1e-5),
        "layernorm_bwd": lambda K: K.layernorm_bwd(g_rows, xhat, rstd, gamma),
        "gelu_fwd": lambda K: K.gelu_fwd(ff),
        "gelu_bwd": lambda K: K.gelu_bwd(ff, ff),
        "xent_fwd": lambda K: K.xent_fwd(logits, targets, mask),
        "xent_bwd": lambda K: K.xent_bwd(xprobs, targets, mask, 1.0 / rows),
        "embedding_bwd": lambda K: K.embedding_bwd(targets, g_rows, V),
    }


def model_step(rng):
    from acmgen.backbone import Backbone, BackboneConfig, lm_loss
    from acmgen.taskgen import Tokenizer

    tok = Tokenizer.universe()
    model = Backbone(BackboneConfig(vocab_size=len(tok), n_special=tok.n_special), tok)
    seqs = [list(rng.integers(tok.n_special, len(tok), size=32)) for _ in range(16)]

    def step():
        tensor_mod.backward(lm_loss(model, seqs))
        for p in model.params.values():
            p.tensor.grad = None

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    try:
        compiled = importlib.import_module("acmgen.autodiff._kernels")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng).items():
        tp = best_of(lambda: fn(_kernels_py), args.repeat) * 1e3
        tc = best_of(lambda: fn(compiled), args.repeat) * 1e3
        print(f"{name:24s} {tp:10.3f} {tc:12.3f} {tp / tc:7.1f}x")
    step = model_step(rng)
    res = {}
    for label, impl in (("python", _kernels_py), ("compiled", compiled)):
        tensor_mod.K = impl
        step()  # warm-up
        res[label] = best_of(step, max(3, args.repeat // 10)) * 1e3
    print(f"{'backbone fwd+bwd step':24s} {res['python']:10.1f} {res['compiled']:12.1f} "
          f"{res['python'] / res['compiled']:7.1f}x")


if __name__ == "__main__":
    main()
