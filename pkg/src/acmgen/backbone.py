"""Small post-norm decoder-only transformer with adapter hook points.

Each layer computes::

    a = attention(x);   x = LN1(x + hook_mh(a))
    f = feedforward(x); x = LN2(x + hook_ff(f))

so a hook sees the raw sublayer output before its residual Add & Norm. This
differs from GPT-2's pre-norm ordering on purpose. The output head is tied to
the token embedding. Special-token embedding rows are stored as separate
one-row params so each can be trained or frozen on its own.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import archive
from .autodiff import AdamW, NamedParam, Tensor, no_grad
from .autodiff import tensor as T
from .taskgen import Tokenizer

log = logging.getLogger(__name__)

Hook = Callable[[Tensor], Tensor]
LayerHooks = tuple[Hook | None, Hook | None] | None


class SequenceTooLong(ValueError):
    pass


@dataclass
class BackboneConfig:
    vocab_size: int
    n_special: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 < self.n_special < self.vocab_size:
            raise ValueError("n_special must be in (0, vocab_size)")


class Backbone:
    def __init__(self, config: BackboneConfig, tokenizer: Tokenizer, seed: int = 0):
        if tokenizer.n_special != config.n_special or len(tokenizer) != config.vocab_size:
            raise ValueError("tokenizer does not match backbone config")
        self.config = config
        self.tokenizer = tokenizer
        rng = np.random.default_rng([31, seed])
        c = config
        std = c.init_std
        self.params: dict[str, NamedParam] = {}

        def add(name, arr):
            self.params[name] = NamedParam(name, arr)

        self.special_names = []
        for tok in tokenizer.specials:
            name = f"wte/special/{tok}"
            self.special_names.append(name)
            add(name, rng.normal(0.0, std, size=(1, c.d_model)))
        add("wte/base", rng.normal(0.0, std, size=(c.vocab_size - c.n_special, c.d_model)))
        add("wpe", rng.normal(0.0, std, size=(c.max_seq_len, c.d_model)))
        proj_std = std / math.sqrt(2 * c.n_layers)
        for l in range(c.n_layers):
            p = f"h{l}/"
            for w in ("wq", "wk", "wv"):
                add(p + "attn/" + w, rng.normal(0.0, std, size=(c.d_model, c.d_model)))
                add(p + "attn/b" + w[1], np.zeros(c.d_model))
            add(p + "attn/wo", rng.normal(0.0, proj_std, size=(c.d_model, c.d_model)))
            add(p + "attn/bo", np.zeros(c.d_model))
            add(p + "ln1/g", np.ones(c.d_model))
            add(p + "ln1/b", np.zeros(c.d_model))
            add(p + "ff/w1", rng.normal(0.0, std, size=(c.d_model, c.d_ff)))
            add(p + "ff/b1", np.zeros(c.d_ff))
            add(p + "ff/w2", rng.normal(0.0, proj_std, size=(c.d_ff, c.d_model)))
            add(p + "ff/b2", np.zeros(c.d_model))
            add(p + "ln2/g", np.ones(c.d_model))
            add(p + "ln2/b", np.zeros(c.d_model))
        add("lnf/g", np.ones(c.d_model))
        add("lnf/b", np.zeros(c.d_model))

    # -- parameter management -------------------------------------------------

    def special_param(self, token: str) -> NamedParam:
        return self.params[f"wte/special/{token}"]

    def core_params(self) -> list[NamedParam]:
        """Every param except the special-token rows."""
        return [p for n, p in self.params.items() if not n.startswith("wte/special/")]

    def freeze(self) -> None:
        for p in self.params.values():
            p.frozen = True

    def set_trainable(self, names: Sequence[str] = ()) -> None:
        """Freeze everything, then unfreeze exactly ``names``."""
        keep = set(names)
        for n, p in self.params.items():
            p.frozen = n not in keep

    def n_params(self, include_special: bool = True) -> int:
        return sum(p.data.size for n, p in self.params.items()
                   if include_special or not n.startswith("wte/special/"))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing backbone params: {sorted(missing)[:5]}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.tensor.data = np.array(state[n], dtype=np.float64)

    # -- forward ---------------------------------------------------------------

    def embedding_matrix(self) -> Tensor:
        rows = [self.params[n].tensor for n in self.special_names]
        return T.concat(rows + [self.params["wte/base"].tensor], axis=0)

    def forward(self, tokens, hooks: Sequence[LayerHooks] | None = None) -> Tensor:
        """Logits ``[B, T, V]`` (or ``[T, V]`` for a 1D token array).

        ``hooks[l] = (mh, ff)`` replaces the layer-``l`` sublayer outputs by
        ``mh(o_mh)`` / ``ff(o_ff)`` before their Add & Norm; ``None`` entries
        are identity.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        c = self.config
        B, L = tokens.shape
        if L > c.max_seq_len:
            raise SequenceTooLong(f"sequence length {L} exceeds max_seq_len={c.max_seq_len}")
        if hooks is not None and len(hooks) != c.n_layers:
            raise ValueError(f"expected {c.n_layers} layer hooks, got {len(hooks)}")
        P = self.params
        emb = self.embedding_matrix()
        x = T.embedding(emb, tokens) + T.getitem(P["wpe"].tensor, slice(0, L))
        for l in range(c.n_layers):
            mh, ff = (hooks[l] if hooks is not None and hooks[l] is not None else (None, None))
            p = f"h{l}/"
            a = self._attention(x, l, B, L)
            if mh is not None:
                a = mh(a)
            x = T.layer_norm(x + a, P[p + "ln1/g"].tensor, P[p + "ln1/b"].tensor)
            f = T.linear(T.gelu(T.linear(x, P[p + "ff/w1"].tensor, P[p + "ff/b1"].tensor)),
                         P[p + "ff/w2"].tensor, P[p + "ff/b2"].tensor)
            if ff is not None:
                f = ff(f)
            x = T.layer_norm(x + f, P[p + "ln2/g"].tensor, P[p + "ln2/b"].tensor)
        x = T.layer_norm(x, P["lnf/g"].tensor, P["lnf/b"].tensor)
        logits = T.linear(x, T.transpose(emb, (1, 0)))
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    def forward_cached(self, tokens, cache: list, hooks: Sequence[LayerHooks] | None = None) -> np.ndarray:
        """Inference-only forward that reuses keys/values of earlier positions.

        ``cache`` starts as ``[]`` and is filled in place. The first call
        feeds the whole prompt ``[B, L]``; later calls feed one token per
        row ``[B, 1]``. Returns the logits of the last fed position ``[B, V]``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        c = self.config
        B, n = tokens.shape
        start = cache[0][0].shape[2] if cache else 0
        if start and n != 1:
            raise ValueError("after the prompt, feed one token at a time")
        if start + n > c.max_seq_len:
            raise SequenceTooLong(f"sequence length {start + n} exceeds max_seq_len={c.max_seq_len}")
        P = self.params
        H, dh = c.n_heads, c.d_model // c.n_heads
        with no_grad():
            emb = self.embedding_matrix()
            x = T.embedding(emb, tokens) + T.getitem(P["wpe"].tensor, slice(start, start + n))
            for l in range(c.n_layers):
                mh, ff = (hooks[l] if hooks is not None and hooks[l] is not None else (None, None))
                p = f"h{l}/"

                def proj(w, b):
                    return (x.data @ P[p + "attn/" + w].data + P[p + "attn/" + b].data
                            ).reshape(B, n, H, dh).transpose(0, 2, 1, 3)

                q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
                if start:
                    k = np.concatenate([cache[l][0], k], axis=2)
                    v = np.concatenate([cache[l][1], v], axis=2)
                    cache[l] = (k, v)
                else:
                    cache.append((k, v))
                scores = Tensor(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
                att = T.softmax(scores, causal=not start).data
                y = Tensor((att @ v).transpose(0, 2, 1, 3).reshape(B, n, c.d_model))
                a = T.linear(y, P[p + "attn/wo"].tensor, P[p + "attn/bo"].tensor)
                if mh is not None:
                    a = mh(a)
                x = T.layer_norm(x + a, P[p + "ln1/g"].tensor, P[p + "ln1/b"].tensor)
                f = T.linear(T.gelu(T.linear(x, P[p + "ff/w1"].tensor, P[p + "ff/b1"].tensor)),
                             P[p + "ff/w2"].tensor, P[p + "ff/b2"].tensor)
                if ff is not None:
                    f = ff(f)
                x = T.layer_norm(x + f, P[p + "ln2/g"].tensor, P[p + "ln2/b"].tensor)
            last = T.getitem(x, (slice(None), slice(n - 1, n)))
            last = T.layer_norm(last, P["lnf/g"].tensor, P["lnf/b"].tensor)
            return (last.data @ emb.data.T)[:, 0, :]

    def _attention(self, x: Tensor, l: int, B: int, L: int) -> Tensor:
        c = self.config
        P = self.params
        H, dh = c.n_heads, c.d_model // c.n_heads
        p = f"h{l}/attn/"

        def heads(w, b, axes):
            return T.transpose(T.reshape(T.linear(x, P[p + w].tensor, P[p + b].tensor),
                                         (B, L, H, dh)), axes)

        q = heads("wq", "bq", (0, 2, 1, 3))
        k = heads("wk", "bk", (0, 2, 3, 1))
        v = heads("wv", "bv", (0, 2, 1, 3))
        att = T.softmax(T.scale(q @ k, 1.0 / math.sqrt(dh)), causal=True)
        y = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, L, c.d_model))
        return T.linear(y, P[p + "wo"].tensor, P[p + "bo"].tensor)

    # -- persistence -------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "tokenizer": self.tokenizer.to_dict(),
            "frozen": {n: p.frozen for n, p in self.params.items()},
        }

    def save(self, directory, extra: dict | None = None) -> None:
        tensors = {f"backbone/{n}": p.data for n, p in self.params.items()}
        man = {"kind": "backbone", "backbone": self.manifest()}
        if extra:
            man.update(extra)
        archive.save(directory, tensors, man)

    @classmethod
    def from_archive(cls, tensors: dict[str, np.ndarray], manifest: dict) -> "Backbone":
        bm = manifest["backbone"]
        model = cls(BackboneConfig(**bm["config"]), Tokenizer.from_dict(bm["tokenizer"]))
        model.load_state_dict({n[len("backbone/"):]: a for n, a in tensors.items()
                               if n.startswith("backbone/")})
        for n, fr in bm["frozen"].items():
            model.params[n].frozen = fr
        return model

    @classmethod
    def load(cls, directory) -> "Backbone":
        tensors, manifest = archive.load(directory)
        return cls.from_archive(tensors, manifest)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def lm_loss(model: Backbone, seqs: Sequence[Sequence[int]]) -> Tensor:
    """Mean next-token loss over the non-pad positions of a batch."""
    batch = pad_batch(seqs, model.tokenizer.pad_id)
    mask = np.zeros(batch.shape)
    for i, s in enumerate(seqs):
        mask[i, 1:len(s)] = 1.0
    logits = model.forward(batch[:, :-1])
    return T.cross_entropy_masked(logits, batch[:, 1:], mask[:, 1:])


def heldout_loss(model: Backbone, seqs: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    total = count = 0.0
    with no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            n = sum(len(s) - 1 for s in chunk)
            total += lm_loss(model, chunk).item() * n
            count += n
    return total / count


@dataclass
class PretrainResult:
    model: Backbone
    initial_loss: float
    final_loss: float
    steps: int


def pretrain_backbone(corpus: Sequence[Sequence[str]], heldout: Sequence[Sequence[str]],
                      config: BackboneConfig, tokenizer: Tokenizer, steps: int = 3000,
                      batch_size: int = 32, lr: float = 3e-3, seed: int = 0) -> PretrainResult:
    """Train a fresh backbone on ``corpus`` with next-token loss, then freeze it.

    Pad, [QSEP], [ASEP] and [EOS] rows train with the rest; the [GEN] rows
    are never seen here.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    model = Backbone(config, tokenizer, seed=seed)
    enc = [tokenizer.encode(s) for s in corpus]
    held = [tokenizer.encode(s) for s in heldout] if heldout else enc[:256]
    initial = heldout_loss(model, held)
    opt = AdamW(model.params.values(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng([37, seed])
    for step in range(steps):
        idx = rng.integers(0, len(enc), size=batch_size)
        warm = min(1.0, (step + 1) / 100)
        opt.state.lr = lr * warm * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / steps)))
        loss = lm_loss(model, [enc[i] for i in idx])
        T.backward(loss)
        opt.step()
        if step % 250 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    model.freeze()
    final = heldout_loss(model, held)
    log.info("pretrain held-out loss %.4f (initial %.4f, ln V = %.4f)",
             final, initial, math.log(config.vocab_size))
    return PretrainResult(model, initial, final, steps)
