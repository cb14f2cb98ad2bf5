"""Sequence layout for one example and the two supervision windows.

    x' = [GEN_i] input [QSEP] question [ASEP] output [EOS]

Position ``j`` of the logits predicts token ``j + 1``. The finetune window
covers predictions of the output tokens and the final [EOS]; the generation
window covers every prediction, including the first input token from
[GEN_i].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..taskgen import RawExample, TaskSpec, Tokenizer, gen_token

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskDescriptor:
    index: int  # 1-based position in the stream; selects [GEN_index]
    spec: TaskSpec

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def question(self) -> tuple[str, ...]:
        return self.spec.question

    @property
    def gen_token(self) -> str:
        return gen_token(self.index)


@dataclass(frozen=True)
class FormattedExample:
    tokens: tuple[int, ...]
    answer_start: int
    origin: str  # task name the example is routed through

    def __len__(self) -> int:
        return len(self.tokens)


def format_example(tok: Tokenizer, task: TaskDescriptor, ex: RawExample) -> FormattedExample | None:
    if not ex.output:
        log.warning("%s: skipping example with empty output", task.name)
        return None
    prefix = ([tok.gen_id(task.index)] + tok.encode(ex.input) + [tok.qsep_id]
              + tok.encode(task.question) + [tok.asep_id])
    ids = tuple(prefix + tok.encode(ex.output) + [tok.eos_id])
    return FormattedExample(ids, len(prefix), task.name)


def format_all(tok: Tokenizer, task: TaskDescriptor, examples: Sequence[RawExample]) -> list[FormattedExample]:
    out = [format_example(tok, task, ex) for ex in examples]
    return [f for f in out if f is not None]


def prompt_ids(tok: Tokenizer, task: TaskDescriptor, inp: Sequence[str]) -> list[int]:
    """Decoding prefix ``[GEN_i] input [QSEP] question [ASEP]``."""
    return ([tok.gen_id(task.index)] + tok.encode(inp) + [tok.qsep_id]
            + tok.encode(task.question) + [tok.asep_id])


def finetune_window(ex: FormattedExample) -> np.ndarray:
    """0/1 mask over the ``len - 1`` prediction positions."""
    m = np.zeros(len(ex) - 1)
    m[ex.answer_start - 1:] = 1.0
    return m


def gen_window(ex: FormattedExample) -> np.ndarray:
    return np.ones(len(ex) - 1)


def parse_generated(tok: Tokenizer, task: TaskDescriptor, ids: Sequence[int]) -> RawExample | None:
    """Recover (input, output) from a sampled continuation of [GEN_i].

    ``ids`` excludes the leading [GEN_i]. Returns ``None`` for malformed
    samples: no terminal [EOS], missing or repeated delimiters, wrong
    question, empty input or output, or stray special tokens.
    """
    ids = list(ids)
    if tok.eos_id not in ids:
        return None
    body = ids[:ids.index(tok.eos_id)]
    if body.count(tok.qsep_id) != 1 or body.count(tok.asep_id) != 1:
        return None
    q, a = body.index(tok.qsep_id), body.index(tok.asep_id)
    if not q < a:
        return None
    inp, question, out = body[:q], body[q + 1:a], body[a + 1:]
    if not inp or not out:
        return None
    if any(tok.is_special(i) for i in inp + out):
        return None
    if tuple(tok.decode(question)) != task.question:
        return None
    return RawExample(tuple(tok.decode(inp)), tuple(tok.decode(out)))
