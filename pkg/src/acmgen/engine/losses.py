"""Finetune, generation and combined training losses over routed batches.

A batch may mix examples of several tasks (current data plus pseudo
examples); each group is run through its own task's architecture and the
per-position losses are pooled, so every loss is a mean over all supervised
positions in the batch.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Callable, Sequence

import numpy as np

from ..autodiff import Tensor
from ..autodiff import tensor as T
from ..backbone import Backbone, pad_batch
from .formatting import FormattedExample, finetune_window, gen_window

HooksFor = Callable[[str], object]


def _weights(batch: Sequence[FormattedExample], w_ft: float, w_gen: float) -> list[np.ndarray]:
    ft = [finetune_window(ex) for ex in batch]
    gen = [gen_window(ex) for ex in batch]
    n_ft = sum(m.sum() for m in ft)
    n_gen = sum(m.sum() for m in gen)
    out = []
    for f, g in zip(ft, gen):
        w = np.zeros_like(f)
        if w_ft:
            if n_ft == 0:
                raise ValueError("empty supervision window")
            w += f * (w_ft / n_ft)
        if w_gen:
            w += g * (w_gen / n_gen)
        out.append(w)
    return out


def weighted_loss(model: Backbone, batch: Sequence[FormattedExample], hooks_for: HooksFor,
                  w_ft: float, w_gen: float) -> Tensor:
    """``w_ft * L_finetune + w_gen * L_gen`` with batch-mean normalisation."""
    if not batch:
        raise ValueError("empty batch")
    weights = _weights(batch, w_ft, w_gen)
    groups: dict[str, list[int]] = defaultdict(list)
    for i, ex in enumerate(batch):
        groups[ex.origin].append(i)
    total = None
    pad = model.tokenizer.pad_id
    for origin in sorted(groups):
        idx = groups[origin]
        toks = pad_batch([batch[i].tokens for i in idx], pad)
        w = np.zeros((len(idx), toks.shape[1] - 1))
        for r, i in enumerate(idx):
            w[r, :len(weights[i])] = weights[i]
        logits = model.forward(toks[:, :-1], hooks_for(origin))
        part = T.cross_entropy_masked(logits, toks[:, 1:], w, normalizer=1.0)
        total = part if total is None else total + part
    return total


def loss_finetune(model, batch, hooks_for) -> Tensor:
    return weighted_loss(model, batch, hooks_for, 1.0, 0.0)


def loss_gen(model, batch, hooks_for) -> Tensor:
    return weighted_loss(model, batch, hooks_for, 0.0, 1.0)


def loss_train(model, batch, hooks_for, eta: float) -> Tensor:
    """``L_finetune + eta * L_gen``."""
    return weighted_loss(model, batch, hooks_for, 1.0, eta)
