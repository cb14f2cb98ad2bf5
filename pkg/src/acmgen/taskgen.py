"""Synthetic task families and the word-level tokenizer.

Four families stand in for real generation datasets:

``slot2text``
    ``name = aria , type = cafe`` -> ``aria is a cafe .`` (data-to-text).
    Every domain shares the templates and slot names; value vocabularies are
    disjoint between domains.
``query``
    ``which team has pick 13 in round 2 ?`` ->
    ``select team from table where pick = 13 and round = 2``.
``extract``
    Three to five sentences in, the lead sentence out.
``state``
    A two-turn dialogue snippet in, ``<dom> zone <z> ; <dom> <slot> <v> ;``
    out.

Examples are a pure function of ``(family, domain_seed, seed, index)``.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

FAMILIES = ("slot2text", "query", "extract", "state")
N_DOMAINS = {"slot2text": 6, "query": 3, "extract": 3, "state": 3}

PAD, EOS, QSEP, ASEP = "[PAD]", "[EOS]", "[QSEP]", "[ASEP]"
BASE_SPECIALS = (PAD, EOS, QSEP, ASEP)
DEFAULT_GEN_TOKENS = 8

QUESTIONS = {
    "slot2text": "what is the natural language form ?",
    "query": "what is the sql query ?",
    "extract": "summarize this article",
    "state": "track dialogue state",
}

# words fixed by each family's templates
STRUCTURE = {
    "slot2text": ("name", "type", "area", "food", "price", "=", ",", "is", "a", "in", "the",
                  "serving", "with", "prices", "."),
    "query": ("which", "has", "in", "?", "select", "from", "table", "where", "=", "and"),
    "extract": (".",),
    "state": ("user", ":", "need", "at", "|", "agent", "pick", "zone", ";"),
}

SLOT2TEXT_SIZES = {"name": 16, "type": 4, "area": 4, "food": 6, "price": 3}
QUERY_SIZES = {"target": 6, "cond": 4}
QUERY_NUMBERS = tuple(str(i) for i in range(1, 31))
EXTRACT_SIZES = {"subj": 10, "verb": 8, "obj": 10}
STATE_SIZES = {"dom": 4, "zone": 8, "slot": 4, "value": 6}
N_FILLERS = 24

# query domain 0 keeps familiar column names
QUERY_DOMAIN0 = {"target": ("team", "player", "school", "position", "nation", "coach"),
                 "cond": ("pick", "round", "year", "number")}


class TaskError(ValueError):
    pass


@lru_cache(maxsize=1)
def _word_pool() -> tuple[str, ...]:
    """Deterministic pool of pronounceable two-syllable pseudo-words."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    syl = [c + v for c in consonants for v in vowels]
    words = [a + b for a, b in itertools.product(syl, syl)]
    rng = np.random.default_rng(20220522)
    order = rng.permutation(len(words))
    reserved = set(itertools.chain.from_iterable(STRUCTURE.values()))
    reserved |= {w for q in QUESTIONS.values() for w in q.split()}
    reserved |= set(itertools.chain.from_iterable(QUERY_DOMAIN0.values()))
    return tuple(words[i] for i in order if words[i] not in reserved)


@lru_cache(maxsize=1)
def _allocation() -> dict[tuple[str, int, str], tuple[str, ...]]:
    """Assign disjoint pool slices to every (family, domain, category)."""
    pool = _word_pool()
    alloc: dict[tuple[str, int, str], tuple[str, ...]] = {}
    pos = 0

    def take(key, n):
        nonlocal pos
        alloc[key] = pool[pos:pos + n]
        pos += n

    for d in range(N_DOMAINS["slot2text"]):
        for cat, n in SLOT2TEXT_SIZES.items():
            take(("slot2text", d, cat), n)
    for d in range(N_DOMAINS["query"]):
        for cat, n in QUERY_SIZES.items():
            if d == 0:
                alloc[("query", d, cat)] = QUERY_DOMAIN0[cat]
            else:
                take(("query", d, cat), n)
    for d in range(N_DOMAINS["extract"]):
        for cat, n in EXTRACT_SIZES.items():
            take(("extract", d, cat), n)
    for d in range(N_DOMAINS["state"]):
        for cat, n in STATE_SIZES.items():
            if cat == "value":
                for s in range(STATE_SIZES["slot"]):
                    take(("state", d, f"value{s}"), n)
            else:
                take(("state", d, cat), n)
    take(("filler", 0, "filler"), N_FILLERS)
    return alloc


def domain_words(family: str, domain_seed: int, category: str) -> tuple[str, ...]:
    return _allocation()[(family, domain_seed, category)]


def filler_words() -> tuple[str, ...]:
    return _allocation()[("filler", 0, "filler")]


# ---------------------------------------------------------------------------
# Task specs and examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawExample:
    input: tuple[str, ...]
    output: tuple[str, ...]

    def to_json(self, question: Sequence[str]) -> str:
        return json.dumps({"input": " ".join(self.input), "question": " ".join(question),
                           "output": " ".join(self.output)}, ensure_ascii=False)


@dataclass(frozen=True)
class TaskSpec:
    family: str
    domain_seed: int
    name: str
    question: tuple[str, ...]
    n_train: int = 500
    n_test: int = 200

    def vocabulary(self) -> set[str]:
        """Every word an example of this task can contain (question included)."""
        words = set(STRUCTURE[self.family]) | set(self.question)
        for (fam, dom, _), ws in _allocation().items():
            if fam == self.family and dom == self.domain_seed:
                words.update(ws)
        if self.family == "query":
            words.update(QUERY_NUMBERS)
        return words

    def to_dict(self) -> dict:
        return {"family": self.family, "domain_seed": self.domain_seed, "name": self.name,
                "n_train": self.n_train, "n_test": self.n_test}


def make_task(family: str, domain_seed: int, name: str | None = None,
              n_train: int = 500, n_test: int = 200) -> TaskSpec:
    if family not in FAMILIES:
        raise TaskError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    if not 0 <= domain_seed < N_DOMAINS[family]:
        raise TaskError(f"{family} has domains 0..{N_DOMAINS[family] - 1}, got {domain_seed}")
    if n_train < 1 or n_test < 0:
        raise TaskError("n_train must be positive and n_test non-negative")
    return TaskSpec(family, domain_seed, name or f"{family}{domain_seed}",
                    tuple(QUESTIONS[family].split()), n_train, n_test)


def realize_slot2text(slots: dict[str, str]) -> list[str]:
    """Template realisation shared by every slot2text domain."""
    out = [slots["name"], "is", "a", slots["type"]]
    if "area" in slots:
        out += ["in", "the", slots["area"]]
    if "food" in slots:
        out += ["serving", slots["food"], "food"]
    if "price" in slots:
        out += ["with", slots["price"], "prices"]
    return out + ["."]


def _sample_slot2text(spec: TaskSpec, rng: np.random.Generator) -> RawExample:
    d = spec.domain_seed
    slots = {s: _pick(rng, domain_words("slot2text", d, s)) for s in ("name", "type")}
    optional = ["area", "food", "price"]
    n_opt = int(rng.integers(0, 3))
    chosen = sorted(rng.choice(3, size=n_opt, replace=False)) if n_opt else []
    for i in chosen:
        slots[optional[i]] = _pick(rng, domain_words("slot2text", d, optional[i]))
    inp: list[str] = []
    for key, val in slots.items():
        if inp:
            inp.append(",")
        inp += [key, "=", val]
    return RawExample(tuple(inp), tuple(realize_slot2text(slots)))


def _sample_query(spec: TaskSpec, rng: np.random.Generator) -> RawExample:
    d = spec.domain_seed
    target = _pick(rng, domain_words("query", d, "target"))
    n_cond = int(rng.integers(1, 3))
    conds = [domain_words("query", d, "cond")[i]
             for i in rng.choice(QUERY_SIZES["cond"], size=n_cond, replace=False)]
    vals = [_pick(rng, QUERY_NUMBERS) for _ in conds]
    inp = ["which", target, "has", conds[0], vals[0]]
    out = ["select", target, "from", "table", "where", conds[0], "=", vals[0]]
    if n_cond == 2:
        inp += ["in", conds[1], vals[1]]
        out += ["and", conds[1], "=", vals[1]]
    return RawExample(tuple(inp + ["?"]), tuple(out))


def _sample_extract(spec: TaskSpec, rng: np.random.Generator) -> RawExample:
    d = spec.domain_seed
    sentences = []
    for _ in range(int(rng.integers(3, 6))):
        sentences.append([_pick(rng, domain_words("extract", d, c)) for c in ("subj", "verb", "obj")]
                         + ["."])
    return RawExample(tuple(itertools.chain.from_iterable(sentences)), tuple(sentences[0]))


def _sample_state(spec: TaskSpec, rng: np.random.Generator) -> RawExample:
    d = spec.domain_seed
    dom = _pick(rng, domain_words("state", d, "dom"))
    zone = _pick(rng, domain_words("state", d, "zone"))
    s = int(rng.integers(STATE_SIZES["slot"]))
    slot = domain_words("state", d, "slot")[s]
    val = _pick(rng, domain_words("state", d, f"value{s}"))
    inp = ["user", ":", "need", dom, "at", zone, "|", "agent", ":", "pick", slot, "|",
           "user", ":", val]
    out = [dom, "zone", zone, ";", dom, slot, val, ";"]
    return RawExample(tuple(inp), tuple(out))


_SAMPLERS = {"slot2text": _sample_slot2text, "query": _sample_query,
             "extract": _sample_extract, "state": _sample_state}


def _pick(rng: np.random.Generator, items: Sequence[str]) -> str:
    return items[int(rng.integers(len(items)))]


_FAMILY_IDS = {f: i for i, f in enumerate(FAMILIES)}


def sample_example(spec: TaskSpec, seed: int, index: int) -> RawExample:
    """The ``index``-th draw of the task's generator; pure in its arguments."""
    rng = np.random.default_rng([_FAMILY_IDS[spec.family], spec.domain_seed, seed, index])
    return _SAMPLERS[spec.family](spec, rng)


def _unique_stream(spec: TaskSpec, seed: int, count: int) -> list[RawExample]:
    seen: set[RawExample] = set()
    out: list[RawExample] = []
    index = stall = 0
    # a run of draws as long as the haul so far with nothing new means the
    # space is (nearly) used up
    while stall < max(1000, len(out)):
        ex = sample_example(spec, seed, index)
        index += 1
        stall += 1
        if ex not in seen:
            seen.add(ex)
            out.append(ex)
            stall = 0
            if len(out) == count:
                return out
    raise TaskError(f"{spec.name}: cannot draw {count} distinct examples "
                    f"(combinatorial space exhausted at {len(out)} after {index} draws)")


def generate_split(spec: TaskSpec, split: str, seed: int = 0) -> list[RawExample]:
    """Deterministic, duplicate-free split; train and test never overlap.

    Both splits are cut from one de-duplicated draw stream: the first
    ``n_train`` distinct examples form ``train``, the next ``n_test`` form
    ``test``.
    """
    if split not in ("train", "test"):
        raise TaskError(f"split must be 'train' or 'test', got {split!r}")
    stream = _unique_stream(spec, seed, spec.n_train + spec.n_test)
    return stream[:spec.n_train] if split == "train" else stream[spec.n_train:]


def export_jsonl(spec: TaskSpec, examples: Iterable[RawExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json(spec.question) + "\n")


# ---------------------------------------------------------------------------
# Rule-based solvers (ground truth from the input text alone)
# ---------------------------------------------------------------------------


def solve(family: str, inp: Sequence[str]) -> list[str]:
    """Map an input to its unique reference output by parsing the text."""
    inp = list(inp)
    if family == "slot2text":
        slots = {}
        for chunk in " ".join(inp).split(" , "):
            key, _, val = chunk.split(" ")
            slots[key] = val
        return realize_slot2text(slots)
    if family == "query":
        words = inp[:-1]  # drop '?'
        target = words[1]
        conds = [(words[3], words[4])]
        if len(words) > 5:
            conds.append((words[6], words[7]))
        out = ["select", target, "from", "table", "where"]
        for i, (c, v) in enumerate(conds):
            out += (["and"] if i else []) + [c, "=", v]
        return out
    if family == "extract":
        end = inp.index(".")
        return inp[:end + 1]
    if family == "state":
        dom, zone = inp[3], inp[5]
        slot, val = inp[10], inp[14]
        return [dom, "zone", zone, ";", dom, slot, val, ";"]
    raise TaskError(f"unknown task family {family!r}")


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def gen_token(i: int) -> str:
    """Special token opening examples of the ``i``-th task (1-based)."""
    return f"[GEN_{i}]"


@dataclass
class Tokenizer:
    """Closed word-level vocabulary; special tokens occupy the lowest ids."""

    words: list[str]
    n_gen: int = DEFAULT_GEN_TOKENS
    specials: list[str] = field(init=False)
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.specials = list(BASE_SPECIALS) + [gen_token(i + 1) for i in range(self.n_gen)]
        vocab = self.specials + list(self.words)
        if len(set(vocab)) != len(vocab):
            raise ValueError("tokenizer vocabulary has duplicates")
        self._index = {w: i for i, w in enumerate(vocab)}
        self.vocab = vocab

    @classmethod
    def universe(cls, n_gen: int = DEFAULT_GEN_TOKENS) -> "Tokenizer":
        """Tokenizer over every word any task family/domain can produce."""
        words: set[str] = set(filler_words()) | set(QUERY_NUMBERS)
        for s in STRUCTURE.values():
            words.update(s)
        for q in QUESTIONS.values():
            words.update(q.split())
        for ws in _allocation().values():
            words.update(ws)
        return cls(sorted(words), n_gen)

    @property
    def n_special(self) -> int:
        return len(self.specials)

    def __len__(self) -> int:
        return len(self.vocab)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def qsep_id(self) -> int:
        return self._index[QSEP]

    @property
    def asep_id(self) -> int:
        return self._index[ASEP]

    def gen_id(self, task_index: int) -> int:
        if not 1 <= task_index <= self.n_gen:
            raise ValueError(f"task index {task_index} has no [GEN] token (have {self.n_gen})")
        return self._index[gen_token(task_index)]

    def is_special(self, token_id: int) -> bool:
        return token_id < self.n_special

    def to_dict(self) -> dict:
        return {"words": self.words, "n_gen": self.n_gen}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(list(d["words"]), int(d["n_gen"]))


# ---------------------------------------------------------------------------
# Corpora and similarity
# ---------------------------------------------------------------------------


def word_counts(texts: Iterable[Sequence[str]]) -> Counter:
    c: Counter = Counter()
    for t in texts:
        c.update(w for w in t if not (w.startswith("[") and w.endswith("]")))
    return c


def task_corpus(spec: TaskSpec, seed: int = 0, split: str = "train") -> list[tuple[str, ...]]:
    """Input and output texts of a split (questions excluded)."""
    out = []
    for ex in generate_split(spec, split, seed):
        out.append(ex.input)
        out.append(ex.output)
    return out


def cosine(a: Counter, b: Counter) -> float:
    dot = sum(v * b.get(k, 0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def similarity_matrix(tasks: Sequence[TaskSpec], seed: int = 0) -> np.ndarray:
    """Cosine similarity between the tasks' word-frequency distributions."""
    if len(tasks) < 2:
        raise TaskError("similarity_matrix needs at least two tasks")
    counts = [word_counts(task_corpus(t, seed)) for t in tasks]
    n = len(tasks)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = min(1.0, max(0.0, cosine(counts[i], counts[j])))
    return sim


def pretrain_corpus(n_sequences: int, seed: int = 0,
                    families: Sequence[str] = FAMILIES) -> list[list[str]]:
    """Unpaired text from every domain of every family, plus fillers.

    About 30% of items are ``w [QSEP] w`` for a random word string ``w``,
    which is what makes the backbone learn to copy from its prefix quickly.
    The rest are one of: a filler sentence mixing filler words with random
    vocabulary; a single input or output text; or a delimited item
    ``text [QSEP] question [ASEP] text2``, where ``text2`` is either an
    unrelated draw or an ordered random subsequence of ``text``. No item
    pairs a task input with its output. Every item ends with ``[EOS]``.
    """
    if n_sequences <= 0:
        raise TaskError("pretraining corpus must be non-empty")
    rng = np.random.default_rng([9001, seed])
    specs = [make_task(f, d) for f in families for d in range(N_DOMAINS[f])]
    fillers = filler_words()
    vocab_words = sorted(Tokenizer.universe().words)

    def text(i, j):
        spec = specs[int(rng.integers(len(specs)))]
        ex = sample_example(spec, 10_000 + seed, 2 * i + j)
        return list(ex.input if rng.random() < 0.5 else ex.output)

    out: list[list[str]] = []
    for i in range(n_sequences):
        if rng.random() < 0.3:
            w = [vocab_words[j] for j in rng.integers(len(vocab_words), size=int(rng.integers(3, 10)))]
            out.append(w + [QSEP] + w + [EOS])
            continue
        r = rng.random()
        if r < 0.1:
            n = int(rng.integers(4, 12))
            sent = [fillers[int(rng.integers(len(fillers)))] if rng.random() < 0.6
                    else vocab_words[int(rng.integers(len(vocab_words)))] for _ in range(n)]
        elif r < 0.3:
            sent = text(i, 0)
        else:
            question = QUESTIONS[FAMILIES[int(rng.integers(len(FAMILIES)))]].split()
            first = text(i, 0)
            if r < 0.8:
                # ordered subsequence of the first text: teaches copying, not any task rule
                keep = rng.random(len(first)) < rng.uniform(0.5, 1.0)
                second = [w for w, k in zip(first, keep) if k] or first[:1]
            else:
                second = text(i, 1)
            sent = first + [QSEP] + question + [ASEP] + second
        out.append(sent + [EOS])
    return out
