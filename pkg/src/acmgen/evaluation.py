"""Scores, aggregate metrics, parameter accounting and the module-swap probe."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import ArchitectureMap, LayerRegistry, fixed_hooks
from .backbone import Backbone
from .engine.formatting import TaskDescriptor, prompt_ids
from .engine.generation import greedy_decode
from .taskgen import RawExample, cosine, word_counts


class MetricError(ValueError):
    pass


class ScoreMatrix:
    """Lower-triangular ``R[i, j]``: score on task ``j`` after training task ``i``.

    Indices are 0-based here; the CSV and reports label tasks by name.
    """

    def __init__(self, n_tasks: int):
        self.n = n_tasks
        self.R = np.full((n_tasks, n_tasks), np.nan)

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise MetricError(f"R[{i},{j}] is above the diagonal")
        if not 0.0 <= value <= 100.0:
            raise MetricError(f"score {value} outside [0, 100]")
        self.R[i, j] = value

    def row(self, i: int) -> np.ndarray:
        return self.R[i, :i + 1]

    def final_scores(self) -> np.ndarray:
        return self.R[self.n - 1].copy()

    def filled_rows(self) -> int:
        return int(sum(1 for i in range(self.n) if not np.isnan(self.R[i, :i + 1]).any()))

    def to_list(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.R]

    @classmethod
    def from_list(cls, rows) -> "ScoreMatrix":
        sm = cls(len(rows))
        sm.R = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=float)
        return sm

    def to_csv(self, names: Sequence[str]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + list(names))
        for i, name in enumerate(names):
            w.writerow([name] + [_fmt(self.R[i, j]) if j <= i else "" for j in range(self.n)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.4f}"


def bwt(R, k: int) -> float:
    """Mean over ``i < k`` of ``R[k, i] - R[i, i]`` (``k`` counts tasks, 1-based).

    Accepts a :class:`ScoreMatrix` or an array.
    """
    R = R.R if isinstance(R, ScoreMatrix) else np.asarray(R, dtype=float)
    if k < 2:
        raise MetricError("BWT undefined for single task")
    if k > R.shape[0]:
        raise MetricError(f"k={k} exceeds the {R.shape[0]} tasks in R")
    diffs = [R[k - 1, i] - R[i, i] for i in range(k - 1)]
    if any(np.isnan(d) for d in diffs):
        raise MetricError(f"row {k} or the diagonal is not filled")
    return float(np.mean(diffs))


def aggregate(scores: Sequence[float]) -> tuple[float, float | None]:
    """Arithmetic mean and geometric mean; the latter is ``None`` if any score is 0."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise MetricError("no scores to aggregate")
    mean = float(s.mean())
    if (s <= 0).any():
        return mean, None
    return mean, float(math.exp(np.log(s).mean()))


def format_mean_bwt(mean: float, bwt_value: float) -> str:
    """Report cell like ``66.1 (+2.1)``."""
    return f"{mean:.1f} ({bwt_value:+.1f})"


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def decode_outputs(model: Backbone, hooks, task: TaskDescriptor, inputs: Sequence[Sequence[str]],
                   max_new: int = 48) -> list[list[str]]:
    tok = model.tokenizer
    prompts = [prompt_ids(tok, task, inp) for inp in inputs]
    return [tok.decode(ids) for ids in greedy_decode(model, hooks, prompts, max_new)]


def exact_match(preds: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    if not refs:
        raise MetricError("empty test set")
    hits = sum(tuple(p) == tuple(r) for p, r in zip(preds, refs))
    return 100.0 * hits / len(refs)


def token_f1(preds: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Mean bag-of-tokens F1 (percent). Diagnostic only."""
    total = 0.0
    for p, r in zip(preds, refs):
        common = sum((Counter(p) & Counter(r)).values())
        if common == 0:
            continue
        prec, rec = common / len(p), common / len(r)
        total += 2 * prec * rec / (prec + rec)
    return 100.0 * total / len(refs)


def score_task(model: Backbone, hooks, task: TaskDescriptor, test: Sequence[RawExample],
               max_new: int = 48, with_f1: bool = False):
    """Exact-match percentage of greedy outputs on ``test``."""
    preds = decode_outputs(model, hooks, task, [ex.input for ex in test], max_new)
    refs = [ex.output for ex in test]
    em = exact_match(preds, refs)
    return (em, token_f1(preds, refs)) if with_f1 else em


# ---------------------------------------------------------------------------
# Learnable parameters
# ---------------------------------------------------------------------------


def count_learnable_params(created: Sequence[Sequence[object]], backbone_params: int | None = None,
                           method: str | None = None) -> tuple[list[int], float]:
    """Per-task count of parameters created for and trained on that task.

    ``created[i]`` lists the modules (anything with ``n_params()``) first
    made for task ``i``. For the full-finetuning methods every task counts
    the whole backbone. Special-token rows and mixing coefficients are not
    counted.
    """
    if method in ("finetune", "lamol"):
        if backbone_params is None:
            raise MetricError("backbone_params needed for full-finetuning methods")
        counts = [int(backbone_params)] * len(created)
    else:
        counts = [int(sum(m.n_params() for m in mods)) for mods in created]
    avg = float(np.mean(counts)) if counts else 0.0
    return counts, avg


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    seed: int
    task_names: list[str]
    scores: ScoreMatrix
    params_per_task: list[int]
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.scores.final_scores()

    def summary(self) -> dict:
        mean, geo = aggregate(self.final)
        k = len(self.task_names)
        return {
            "method": self.method, "seed": self.seed, "mean": mean, "geomean": geo,
            "bwt": bwt(self.scores, k) if k >= 2 else None,
            "bwt_by_prefix": {str(j): bwt(self.scores, j) for j in range(2, k + 1)},
            "avg_learnable_params": float(np.mean(self.params_per_task)),
        }

    def to_csv(self) -> str:
        s = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "task", "final_score", "diag_score", "learnable_params",
                    "mean", "geomean", "bwt"])
        for j, name in enumerate(self.task_names):
            w.writerow([self.method, self.seed, name, _fmt(self.final[j]),
                        _fmt(self.scores.R[j, j]), self.params_per_task[j], "", "", ""])
        w.writerow([self.method, self.seed, "summary", "", "",
                    f"{s['avg_learnable_params']:.1f}", _fmt(s["mean"]), _fmt(s["geomean"]),
                    _fmt(s["bwt"])])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {"format_version": "v1", **self.summary(), "tasks": self.task_names,
             "final_scores": [float(x) for x in self.final],
             "score_matrix": self.scores.to_list(),
             "params_per_task": self.params_per_task, **self.extra}
        return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Module-swap probe
# ---------------------------------------------------------------------------


def module_swap_probe(model: Backbone, registry: LayerRegistry, arch_a: ArchitectureMap,
                      arch_b: ArchitectureMap, task_b: TaskDescriptor,
                      test_b: Sequence[RawExample], corpus_a: Sequence[Sequence[str]],
                      corpus_b: Sequence[Sequence[str]], layer: int,
                      max_new: int = 48) -> dict[str, float]:
    """Cosine similarity of task B's outputs to both corpora, before/after a swap.

    ``O`` decodes with B's own architecture; ``M`` replaces B's module at
    ``layer`` (0-based) by A's. Returns ``{"O_A", "M_A", "O_B", "M_B"}``.
    """
    a_id, b_id = arch_a.layers[layer], arch_b.layers[layer]
    if a_id is None or b_id is None:
        raise MetricError(f"layer {layer + 1}: both tasks need a module there")
    if a_id == b_id:
        raise MetricError(f"layer {layer + 1}: task B reuses A's module, nothing to swap")
    swapped = ArchitectureMap(arch_b.task, list(arch_b.layers))
    swapped.layers[layer] = a_id
    ca, cb = word_counts(corpus_a), word_counts(corpus_b)
    inputs = [ex.input for ex in test_b]
    out = {}
    for tag, arch in (("O", arch_b), ("M", swapped)):
        preds = word_counts(decode_outputs(model, fixed_hooks(registry, arch), task_b, inputs,
                                           max_new))
        out[f"{tag}_A"] = cosine(preds, ca)
        out[f"{tag}_B"] = cosine(preds, cb)
    return out


def probe_table(model, registry, arch_a, arch_b, task_b, test_b, corpus_a, corpus_b,
                max_new: int = 48) -> list[dict]:
    """One probe row per layer where B has its own module and A has one too."""
    rows = []
    for l in range(registry.n_layers):
        a_id, b_id = arch_a.layers[l], arch_b.layers[l]
        if a_id is None or b_id is None or a_id == b_id:
            continue
        r = module_swap_probe(model, registry, arch_a, arch_b, task_b, test_b, corpus_a,
                              corpus_b, l, max_new)
        rows.append({"layer": l + 1, **r})
    return rows


def probe_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "O_A", "M_A", "O_B", "M_B"])
    for r in rows:
        w.writerow([r["layer"]] + [f"{r[k]:.6f}" for k in ("O_A", "M_A", "O_B", "M_B")])
    return buf.getvalue()
