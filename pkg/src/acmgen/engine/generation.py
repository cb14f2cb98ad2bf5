"""Autoregressive decoding: top-k pseudo-example sampling and greedy scoring decode.

There is no key/value cache; every step reruns the prefix. Sequences here
are short (under ~50 tokens) so this stays cheap, and it keeps decoding on
exactly the same code path as training.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..backbone import Backbone
from .formatting import FormattedExample, TaskDescriptor, format_example, parse_generated

log = logging.getLogger(__name__)


def top_k_choice(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one id per row among the ``k`` highest logits.

    Candidates are ordered by a stable sort, so ties resolve to the lower id
    and ``k=1`` reproduces ``argmax``.
    """
    if k < 1:
        raise ValueError("top_k must be >= 1")
    logits = np.atleast_2d(logits)
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    if k == 1:
        return order[:, 0]
    top = np.take_along_axis(logits, order, axis=1)
    p = np.exp(top - top[:, :1])
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(p))
    pick = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return order[np.arange(len(p)), np.minimum(pick, k - 1)]


def sample_sequences(model: Backbone, hooks, prefix: Sequence[int], n: int, max_len: int,
                     top_k: int, rng: np.random.Generator) -> list[list[int]]:
    """Draw ``n`` continuations of ``prefix`` (returned without it).

    Each stops after [EOS] or when the full sequence reaches ``max_len``.
    """
    eos = model.tokenizer.eos_id
    seqs = np.tile(np.asarray(prefix, dtype=np.int64), (n, 1))
    done = np.zeros(n, dtype=bool)
    cache: list = []
    feed = seqs
    while seqs.shape[1] < max_len and not done.all():
        nxt = top_k_choice(model.forward_cached(feed, cache, hooks), top_k, rng)
        nxt[done] = eos
        feed = nxt[:, None]
        seqs = np.concatenate([seqs, feed], axis=1)
        done |= nxt == eos
    out = []
    p = len(prefix)
    for row in seqs:
        cont = row[p:].tolist()
        if eos in cont:
            cont = cont[:cont.index(eos) + 1]
        out.append(cont)
    return out


def greedy_decode(model: Backbone, hooks, prompts: Sequence[Sequence[int]], max_new: int,
                  batch_size: int = 64) -> list[list[int]]:
    """Greedy continuation of each prompt, without the terminal [EOS].

    Prompts of equal length are decoded together; results come back in
    input order and do not depend on the batching.
    """
    eos = model.tokenizer.eos_id
    limit = model.config.max_seq_len
    results: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        by_len[len(p)].append(i)
    for L in sorted(by_len):
        idx_all = by_len[L]
        for s in range(0, len(idx_all), batch_size):
            idx = idx_all[s:s + batch_size]
            seqs = np.array([prompts[i] for i in idx], dtype=np.int64)
            done = np.zeros(len(idx), dtype=bool)
            steps = 0
            cache: list = []
            feed = seqs
            while steps < max_new and seqs.shape[1] < limit and not done.all():
                nxt = model.forward_cached(feed, cache, hooks).argmax(axis=1)
                nxt[done] = eos
                feed = nxt[:, None]
                seqs = np.concatenate([seqs, feed], axis=1)
                done |= nxt == eos
                steps += 1
            for r, i in enumerate(idx):
                cont = seqs[r, L:].tolist()
                results[i] = cont[:cont.index(eos)] if eos in cont else cont
    return results  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Pseudo replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayBuffer:
    examples: dict[str, list[FormattedExample]] = field(default_factory=dict)
    targets: dict[str, int] = field(default_factory=dict)
    attempts: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(v) for v in self.examples.values())

    def is_empty(self) -> bool:
        return len(self) == 0

    def all_examples(self) -> list[FormattedExample]:
        return [ex for name in self.examples for ex in self.examples[name]]

    def stats(self) -> dict:
        return {"target": sum(self.targets.values()), "kept": len(self),
                "per_task": {n: {"target": self.targets[n], "kept": len(self.examples.get(n, [])),
                                 "attempts": self.attempts.get(n, 0)} for n in self.targets},
                "warnings": list(self.warnings)}


def split_budget(total: int, n_tasks: int) -> list[int]:
    """Even split of ``total``; the remainder goes to the earliest tasks."""
    if n_tasks == 0:
        return []
    base, rem = divmod(total, n_tasks)
    return [base + (1 if i < rem else 0) for i in range(n_tasks)]


def generate_pseudo(model: Backbone, old_tasks: Sequence[tuple[TaskDescriptor, object]],
                    n_current: int, sample_rate: float, top_k: int, rng: np.random.Generator,
                    max_len: int | None = None, attempt_factor: int = 20,
                    chunk: int = 32) -> ReplayBuffer:
    """Sample pseudo examples for each qualifying old task.

    ``old_tasks`` pairs each descriptor with the hooks of that task's own
    architecture. The total budget ``round(sample_rate * n_current)`` is
    split evenly; sampling for a task stops once its share is met or after
    ``attempt_factor`` times its share in attempts.
    """
    buf = ReplayBuffer()
    if not old_tasks:
        return buf
    tok = model.tokenizer
    max_len = min(max_len or model.config.max_seq_len, model.config.max_seq_len)
    shares = split_budget(int(round(sample_rate * n_current)), len(old_tasks))
    for (task, hooks), target in zip(old_tasks, shares):
        kept: list[FormattedExample] = []
        attempts = 0
        cap = attempt_factor * target
        while len(kept) < target and attempts < cap:
            n = min(cap - attempts, max(chunk, 2 * (target - len(kept))))
            for cont in sample_sequences(model, hooks, [tok.gen_id(task.index)], n, max_len,
                                         top_k, rng):
                attempts += 1
                raw = parse_generated(tok, task, cont)
                if raw is None:
                    continue
                ex = format_example(tok, task, raw)
                if ex is None or len(ex) > max_len:
                    continue
                kept.append(ex)
                if len(kept) == target:
                    break
        buf.examples[task.name] = kept
        buf.targets[task.name] = target
        buf.attempts[task.name] = attempts
        if len(kept) < 0.5 * target:
            msg = (f"pseudo replay for {task.name}: kept {len(kept)} of {target} "
                   f"after {attempts} attempts")
            log.warning(msg)
            buf.warnings.append(msg)
        elif len(kept) < target:
            log.info("pseudo replay for %s: kept %d of %d", task.name, len(kept), target)
    return buf
