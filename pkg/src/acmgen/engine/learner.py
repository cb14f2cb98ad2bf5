"""Task-stream training for the compositional method and its baselines.

``run_method`` walks a task sequence. Per task it fixes an architecture
(decision stage for ``acm``, a fixed rule for the baselines), optionally
samples pseudo examples of earlier tasks, trains, then scores every task
seen so far to fill one row of the score matrix.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from ..adapters import (AdapterModule, ArchitectureMap, LayerRegistry, entropy_penalty,
                        fixed_hooks, init_coefficients, mixing_hooks, mixing_weights)
from ..autodiff import AdamW, NamedParam
from ..autodiff import tensor as T
from ..backbone import Backbone
from .. import evaluation as ev
from ..taskgen import RawExample, TaskSpec, generate_split
from .formatting import FormattedExample, TaskDescriptor, format_all
from .generation import ReplayBuffer, generate_pseudo
from .losses import loss_train

log = logging.getLogger(__name__)

METHODS = ("finetune", "lamol", "adapter_cl", "adapter_drop", "adapter_lamol", "acm")
ADAPTER_METHODS = ("adapter_cl", "adapter_drop", "adapter_lamol", "acm")
REPLAY_METHODS = ("lamol", "adapter_lamol", "acm")

# purpose codes for the hierarchical RNG split
_RNG_SHUFFLE, _RNG_INIT, _RNG_SAMPLE, _RNG_DECISION = 1, 2, 3, 4


class EngineError(ValueError):
    pass


@dataclass
class Hyper:
    lr: float = 1.75e-4
    decision_epochs: int = 6
    train_epochs: int = 9
    c_prior: float = 0.05
    gamma: float = 0.05
    eta: float = 0.25
    top_k: int = 20
    sample_rate: float = 0.2
    pseudo_batch_fraction: float = 0.5
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    decision_lr: float | None = None  # defaults to lr
    max_new_tokens: int = 48
    max_pseudo_len: int = 64
    drop_layers: tuple[int, ...] = (1, 2, 3)  # 1-based, adapter_drop only

    def __post_init__(self):
        self.drop_layers = tuple(int(x) for x in self.drop_layers)
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "decision_epochs", "train_epochs", "c_prior", "top_k", "batch_size",
                     "max_new_tokens", "max_pseudo_len"):
            if not getattr(self, name) > 0:
                raise EngineError(f"hyper.{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma", "eta", "sample_rate", "weight_decay"):
            if getattr(self, name) < 0:
                raise EngineError(f"hyper.{name} must be non-negative")
        if not 0.0 <= self.pseudo_batch_fraction <= 1.0:
            raise EngineError("hyper.pseudo_batch_fraction must be in [0, 1]")
        if self.decision_lr is not None and not self.decision_lr > 0:
            raise EngineError("hyper.decision_lr must be positive")
        if self.seed < 0:
            raise EngineError("hyper.seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_layers"] = list(self.drop_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise EngineError(f"unknown hyper fields: {sorted(unknown)}")
        return cls(**d)


def _rng(seed: int, purpose: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *more])


def make_batches(examples: Sequence, batch_size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(examples))
    return [[examples[i] for i in order[s:s + batch_size]]
            for s in range(0, len(examples), batch_size)]


def interleave(current: list, pseudo_pool: Sequence, fraction: float, batch_size: int,
               rng: np.random.Generator) -> list[list]:
    """Mix pseudo batches into ``current`` so they make up ``fraction`` of all batches.

    Pseudo batches are cut from a shuffled, cycled pool and spread evenly:
    at 0.5 the schedule alternates current, pseudo, current, ...
    """
    if not pseudo_pool or fraction == 0.0 or not current:
        return list(current)
    n_cur = len(current)
    if fraction >= 1.0:
        n_ps, n_cur = n_cur, 0
    else:
        n_ps = int(round(n_cur * fraction / (1.0 - fraction)))
    order = rng.permutation(len(pseudo_pool))
    flat = [pseudo_pool[order[i % len(order)]] for i in range(n_ps * batch_size)]
    ps = [flat[s:s + batch_size] for s in range(0, len(flat), batch_size)]
    total = n_cur + n_ps
    out, ci, pi = [], 0, 0
    for j in range(total):
        if (j + 1) * n_ps // total > j * n_ps // total:
            out.append(ps[pi])
            pi += 1
        else:
            out.append(current[ci])
            ci += 1
    return out


@dataclass
class TaskData:
    descriptor: TaskDescriptor
    train: list[FormattedExample]
    test: list[RawExample]


def load_tasks(specs: Sequence[TaskSpec], model: Backbone, data_seed: int = 0) -> list[TaskData]:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise EngineError(f"task names must be unique: {names}")
    if len(specs) > model.tokenizer.n_gen:
        raise EngineError(f"{len(specs)} tasks but only {model.tokenizer.n_gen} [GEN] tokens")
    out = []
    for i, spec in enumerate(specs):
        d = TaskDescriptor(i + 1, spec)
        train = format_all(model.tokenizer, d, generate_split(spec, "train", data_seed))
        if not train:
            raise EngineError(f"{spec.name}: no training data")
        out.append(TaskData(d, train, generate_split(spec, "test", data_seed)))
    return out


@dataclass
class RunState:
    """Everything a resumed run needs besides the backbone weights."""

    method: str
    hyper: Hyper
    specs: list[TaskSpec]
    registry: LayerRegistry
    archs: list[ArchitectureMap | None] = field(default_factory=list)
    scores: "ev.ScoreMatrix | None" = None
    growth: list[dict] = field(default_factory=list)
    replay: list[dict] = field(default_factory=list)
    created: list[list[int]] = field(default_factory=list)  # module ids first made per task
    notes: list[str] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return len(self.archs)

    @property
    def task_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def params_per_task(self, model: Backbone) -> list[int]:
        mods = {m.module_id: m for m in self.registry.all_modules()}
        counts, _ = ev.count_learnable_params([[mods[i] for i in ids] for ids in self.created],
                                           model.n_params(), self.method)
        return counts


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _train_loop(model: Backbone, params: Sequence[NamedParam], batches_for_epoch: Callable,
                epochs: int, lr: float, wd: float, loss_fn: Callable, extra_params=()) -> list[float]:
    opt = AdamW(list(params), lr=lr, weight_decay=wd)
    extra = list(extra_params)
    extra_opt = AdamW(extra, lr=lr, weight_decay=0.0) if extra else None
    history = []
    for epoch in range(epochs):
        total, n = 0.0, 0
        for batch in batches_for_epoch(epoch):
            loss = loss_fn(batch)
            T.backward(loss)
            opt.step()
            if extra_opt is not None:
                extra_opt.step()
            total += loss.item()
            n += 1
        history.append(total / max(n, 1))
    return history


def decision_stage(model: Backbone, registry: LayerRegistry, data: TaskData, hyper: Hyper,
                   task_idx: int) -> tuple[ArchitectureMap, list[AdapterModule], dict]:
    """Pick, per layer, an existing module or a fresh one via hidden-state mixing.

    Only the mixing coefficients and the fresh candidates are trained. The
    winner in each layer is the argmax of the mixing weights, ties going to
    the oldest module. Winning candidates keep their trained weights and are
    registered; losers are dropped.
    """
    if not data.train:
        raise EngineError(f"{data.descriptor.name}: no training data")
    L = registry.n_layers
    for m in registry.all_modules():
        m.set_frozen(True)
    model.freeze()
    cands, coeff_params = [], []
    for l in range(L):
        fresh = registry.new_module(l, rng=_rng(hyper.seed, _RNG_INIT, task_idx, l))
        cands.append(list(registry.layers[l]) + [fresh])
        coeff_params.append(NamedParam(f"mixing/{l}",
                                       init_coefficients(len(registry.layers[l]), hyper.c_prior)))
    coeffs = [p.tensor for p in coeff_params]
    fresh_mods = [c[-1] for c in cands]
    trained = any(len(c) > 1 for c in cands)
    history: list[float] = []
    if trained:
        def loss_fn(batch):
            w = [mixing_weights(c) for c in coeffs]
            hooks = mixing_hooks(cands, w)
            return loss_train(model, batch, lambda _o: hooks, hyper.eta) + entropy_penalty(w, hyper.gamma)

        params = [p for m in fresh_mods for p in m.params.values()]
        history = _train_loop(
            model, params,
            lambda e: make_batches(data.train, hyper.batch_size,
                                   _rng(hyper.seed, _RNG_DECISION, task_idx, e)),
            hyper.decision_epochs, hyper.decision_lr or hyper.lr, hyper.weight_decay, loss_fn,
            extra_params=coeff_params)
    layers, kept, decisions = [], [], []
    for l in range(L):
        lam = mixing_weights(coeffs[l]).data
        win = int(np.argmax(lam))  # first maximum: oldest module on ties
        mod = cands[l][win]
        if mod is fresh_mods[l]:
            registry.register(mod)
            kept.append(mod)
            action = "new"
        else:
            action = "reuse"
        mod.set_frozen(True)
        layers.append(mod.module_id)
        decisions.append({"layer": l + 1, "action": action, "module": mod.module_id,
                          "lambda": [float(x) for x in lam]})
    arch = ArchitectureMap(data.descriptor.name, layers)
    record = {"task": data.descriptor.name, "decisions": decisions,
              "decision_loss": history, "decision_trained": trained}
    return arch, kept, record


def train_stage(model: Backbone, data: TaskData, hooks_for: Callable, trainable: Sequence[NamedParam],
                replay: ReplayBuffer, hyper: Hyper, task_idx: int, eta: float) -> list[float]:
    """Train ``trainable`` on current data interleaved with replayed pseudo examples."""
    pool = replay.all_examples()

    def batches(epoch):
        cur = make_batches(data.train, hyper.batch_size, _rng(hyper.seed, _RNG_SHUFFLE, task_idx, epoch))
        return interleave(cur, pool, hyper.pseudo_batch_fraction, hyper.batch_size,
                          _rng(hyper.seed, _RNG_SHUFFLE, task_idx, epoch, 1))

    return _train_loop(model, trainable, batches, hyper.train_epochs, hyper.lr,
                       hyper.weight_decay, lambda b: loss_train(model, b, hooks_for, eta))


# ---------------------------------------------------------------------------
# Method dispatch
# ---------------------------------------------------------------------------


class ContinualRun:
    def __init__(self, method: str, specs: Sequence[TaskSpec], model: Backbone, hyper: Hyper,
                 data_seed: int = 0, adapter_reduce: int = 16, state: RunState | None = None):
        if method not in METHODS:
            raise EngineError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        self.method = method
        self.model = model
        self.hyper = hyper
        self.tasks = load_tasks(specs, model, data_seed)
        c = model.config
        if method == "adapter_drop":
            bad = [x for x in hyper.drop_layers if not 1 <= x <= c.n_layers]
            if bad:
                raise EngineError(f"drop_layers {bad} outside 1..{c.n_layers}")
        if state is None:
            state = RunState(method, hyper, list(specs),
                             LayerRegistry(c.n_layers, c.d_model, adapter_reduce))
            state.scores = ev.ScoreMatrix(len(specs))
        elif state.method != method or state.task_names != [s.name for s in specs]:
            raise EngineError("resume state does not match this run's method and tasks")
        self.state = state
        self.name_to_idx = {t.descriptor.name: i for i, t in enumerate(self.tasks)}

    # -- routing ---------------------------------------------------------------

    def hooks_for_task(self, i: int):
        arch = self.state.archs[i] if i < len(self.state.archs) else None
        return fixed_hooks(self.state.registry, arch)

    def _hooks_by_name(self, archs: dict[str, ArchitectureMap | None]):
        reg = self.state.registry
        cache = {n: fixed_hooks(reg, a) for n, a in archs.items()}
        return lambda origin: cache[origin]

    # -- one task ----------------------------------------------------------------

    def _fixed_arch(self, i: int) -> tuple[ArchitectureMap, list[AdapterModule], dict]:
        reg, hp, name = self.state.registry, self.hyper, self.tasks[i].descriptor.name
        layers, kept, decisions = [], [], []
        if self.method == "adapter_lamol" and i > 0:
            first = self.state.archs[0]
            for l, mid in enumerate(first.layers):
                layers.append(mid)
                decisions.append({"layer": l + 1, "action": "reuse", "module": mid, "lambda": []})
        else:
            drop = set(hp.drop_layers) if self.method == "adapter_drop" else set()
            for l in range(reg.n_layers):
                if l + 1 in drop:
                    layers.append(None)
                    decisions.append({"layer": l + 1, "action": "pass", "module": None, "lambda": []})
                    continue
                mod = reg.new_module(l, rng=_rng(hp.seed, _RNG_INIT, i, l))
                reg.register(mod)
                kept.append(mod)
                layers.append(mod.module_id)
                decisions.append({"layer": l + 1, "action": "new", "module": mod.module_id,
                                  "lambda": []})
        return ArchitectureMap(name, layers), kept, {"task": name, "decisions": decisions}

    def learn_task(self, i: int) -> None:
        st, hp, model = self.state, self.hyper, self.model
        data = self.tasks[i]
        desc = data.descriptor
        gen_row = model.special_param(desc.gen_token)
        log.info("[%s] task %d/%d: %s", self.method, i + 1, len(self.tasks), desc.name)

        if self.method in ("finetune", "lamol"):
            arch, kept, record = None, [], {"task": desc.name, "decisions": []}
        elif self.method == "acm":
            arch, kept, record = decision_stage(model, st.registry, data, hp, i)
        else:
            arch, kept, record = self._fixed_arch(i)

        # which earlier tasks get pseudo examples
        if self.method in ("lamol", "adapter_lamol"):
            qualifying = list(range(i))
        elif self.method == "acm":
            qualifying = [j for j in range(i) if st.archs[j].shares_with(arch)]
        else:
            qualifying = []
        if qualifying:
            old = [(self.tasks[j].descriptor, self.hooks_for_task(j)) for j in qualifying]
            replay = generate_pseudo(model, old, len(data.train), hp.sample_rate, hp.top_k,
                                     _rng(hp.seed, _RNG_SAMPLE, i), max_len=hp.max_pseudo_len)
        else:
            replay = ReplayBuffer()
        st.replay.append({"task": desc.name, "qualifying": [self.tasks[j].descriptor.name
                                                             for j in qualifying], **replay.stats()})

        # trainable set
        if self.method in ("finetune", "lamol"):
            model.set_trainable(list(model.params))
            trainable = list(model.params.values())
        else:
            model.freeze()
            for m in st.registry.all_modules():
                m.set_frozen(True)
            mods = [st.registry.get(l, mid) for l, mid in enumerate(arch.layers) if mid is not None]
            for m in mods:
                m.set_frozen(False)
            gen_row.frozen = False
            trainable = [p for m in mods for p in m.params.values()] + [gen_row]

        eta = hp.eta if self.method in REPLAY_METHODS else 0.0
        archs = {self.tasks[j].descriptor.name: st.archs[j] for j in range(i)}
        archs[desc.name] = arch
        history = train_stage(model, data, self._hooks_by_name(archs), trainable, replay, hp, i, eta)
        record["train_loss"] = history

        model.freeze()
        for m in st.registry.all_modules():
            m.set_frozen(True)
        st.archs.append(arch)
        st.created.append([m.module_id for m in kept])
        st.growth.append(record)
        self.evaluate_row(i)

    def evaluate_row(self, i: int) -> None:
        for j in range(i + 1):
            t = self.tasks[j]
            s = ev.score_task(self.model, self.hooks_for_task(j), t.descriptor, t.test,
                           self.hyper.max_new_tokens)
            self.state.scores.set(i, j, s)
        log.info("[%s] after %s: %s", self.method, self.tasks[i].descriptor.name,
                 " ".join(f"{x:.1f}" for x in self.state.scores.row(i)))

    def run(self, on_task_done: Callable[["ContinualRun"], None] | None = None) -> RunState:
        for i in range(self.state.completed, len(self.tasks)):
            self.learn_task(i)
            if on_task_done is not None:
                on_task_done(self)
        return self.state


def run_method(method: str, specs: Sequence[TaskSpec], model: Backbone, hyper: Hyper,
               data_seed: int = 0, on_task_done=None, state: RunState | None = None) -> RunState:
    """Train ``model`` (mutated in place) over ``specs`` with ``method``."""
    return ContinualRun(method, specs, model, hyper, data_seed, state=state).run(on_task_done)
