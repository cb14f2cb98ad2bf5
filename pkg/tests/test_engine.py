import logging
import math

import numpy as np
import pytest

from acmgen.adapters import AdapterModule, LayerRegistry, mixing_weights
from acmgen.autodiff import Tensor, backward, no_grad
from acmgen.engine import (ContinualRun, EngineError, FormattedExample, Hyper, ReplayBuffer,
                           TaskDescriptor, decision_stage, finetune_window, format_example,
                           gen_window, generate_pseudo, greedy_decode, interleave, load_tasks,
                           loss_finetune, loss_gen, loss_train, make_batches, parse_generated,
                           prompt_ids, run_method, sample_sequences, split_budget, top_k_choice)
from acmgen.taskgen import RawExample, make_task

from conftest import RecomputeCache, make_tiny_backbone
from oracles import max_rel_err, scalar_xent


def _desc(i=1, family="slot2text", domain=0, name=None):
    return TaskDescriptor(i, make_task(family, domain, name=name, n_train=20, n_test=5))


def _ex(tok, out=("kata", "is"), d=None):
    d = d or _desc()
    return format_example(tok, d, RawExample(("name", "=", "kata"), tuple(out)))


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------


def test_layout(tok):
    ex = _ex(tok)
    ids = list(ex.tokens)
    assert ids[0] == tok.gen_id(1)
    assert ids.count(tok.qsep_id) == 1 and ids.count(tok.asep_id) == 1
    assert ids[-1] == tok.eos_id and ids.count(tok.eos_id) == 1
    assert ex.answer_start < len(ex)
    assert ids[ex.answer_start - 1] == tok.asep_id
    assert tok.decode(ids[ex.answer_start:-1]) == ["kata", "is"]
    assert list(prompt_ids(tok, _desc(), ("name", "=", "kata"))) == ids[:ex.answer_start]


def test_windows(tok):
    ex = _ex(tok, out=("kata",))
    ft, gen = finetune_window(ex), gen_window(ex)
    assert len(gen) == len(ex) - 1 and gen.all()
    # predictions of the output token and of [EOS]
    assert ft.sum() == 2 and ft[-2:].all()
    assert set(np.flatnonzero(ft)) < set(np.flatnonzero(gen))


def test_empty_output_skipped_with_warning(tok, caplog):
    with caplog.at_level(logging.WARNING):
        assert format_example(tok, _desc(), RawExample(("a",), ())) is None
    assert "empty output" in caplog.text


def test_parse_generated(tok):
    d = _desc()
    ex = _ex(tok, d=d)
    assert parse_generated(tok, d, ex.tokens[1:]) == RawExample(("name", "=", "kata"), ("kata", "is"))
    body = list(ex.tokens[1:])
    bad = [body[:-1],                                      # no [EOS]
           [tok.qsep_id] + body,                           # two [QSEP]
           body[:body.index(tok.asep_id) + 1] + [tok.eos_id],  # empty output
           [t if t != tok.id("form") else tok.id("sql") for t in body],  # wrong question
           body[:1] + [tok.gen_id(2)] + body[1:]]          # stray special in input
    for b in bad:
        assert parse_generated(tok, d, b) is None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _logprobs(model, ex):
    with no_grad():
        return model.forward(np.array(ex.tokens[:-1])).data


def test_finetune_loss_matches_scalar_oracle(tiny, tok):
    ex = _ex(tok)  # two output tokens + [EOS] -> three supervised positions
    assert finetune_window(ex).sum() == 3
    logits = _logprobs(tiny, ex)
    tg = list(ex.tokens[1:])
    ref = scalar_xent(logits.tolist(), tg, finetune_window(ex).tolist())
    got = loss_finetune(tiny, [ex], lambda _: None).item()
    assert abs(got - ref) < 1e-12
    gen_ref = scalar_xent(logits.tolist(), tg, gen_window(ex).tolist())
    assert abs(loss_gen(tiny, [ex], lambda _: None).item() - gen_ref) < 1e-12


def test_duplicate_batch_and_eta(tiny, tok):
    a = _ex(tok)
    b = _ex(tok, out=("kata", "is", "a", "bozo", "."))
    h = lambda _: None
    assert loss_finetune(tiny, [a], h).item() == pytest.approx(loss_finetune(tiny, [a, a], h).item(), abs=1e-12)
    ft, gen = loss_finetune(tiny, [a, b], h).item(), loss_gen(tiny, [a, b], h).item()
    assert loss_train(tiny, [a, b], h, 0.0).item() == pytest.approx(ft, abs=1e-12)
    assert loss_train(tiny, [a, b], h, 0.25).item() == pytest.approx(ft + 0.25 * gen, abs=1e-12)
    assert gen >= 0


def test_loss_train_gradient_is_sum_of_parts(tiny, tok):
    tiny.special_param("[GEN_1]").frozen = False
    tiny.params["lnf/g"].frozen = False
    batch = [_ex(tok), _ex(tok, out=("kata", "is", "a", "bozo"))]
    h = lambda _: None

    def grads(fn):
        backward(fn())
        out = {n: p.tensor.grad.copy() for n, p in tiny.params.items() if p.tensor.grad is not None}
        for p in tiny.params.values():
            p.tensor.grad = None
        return out
    gt = grads(lambda: loss_train(tiny, batch, h, 0.25))
    gf = grads(lambda: loss_finetune(tiny, batch, h))
    gg = grads(lambda: loss_gen(tiny, batch, h))
    for n in gt:
        assert np.allclose(gt[n], gf[n] + 0.25 * gg[n], atol=1e-12)
    # finite differences on the [GEN_1] row
    p = tiny.special_param("[GEN_1]").tensor
    num = np.zeros(p.shape)
    for idx in np.ndindex(p.shape):
        old = p.data[idx]
        vals = []
        for s in (1e-5, -1e-5):
            p.data[idx] = old + s
            with no_grad():
                vals.append(loss_train(tiny, batch, h, 0.25).item())
        p.data[idx] = old
        num[idx] = (vals[0] - vals[1]) / 2e-5
    assert max_rel_err(gt["wte/special/[GEN_1]"], num) < 1e-4


def test_uniform_head_gives_log_vocab(tok):
    model = make_tiny_backbone(tok)
    for n in model.special_names + ["wte/base"]:
        model.params[n].tensor.data[:] = 0.0
    ex = _ex(tok)
    assert loss_finetune(model, [ex], lambda _: None).item() == pytest.approx(math.log(len(tok)), abs=1e-9)


def test_mixed_origin_batch_routes_each_group(tiny, tok):
    d1, d2 = _desc(1, name="a"), _desc(2, name="b")
    e1, e2 = _ex(tok, d=d1), _ex(tok, d=d2)
    m = AdapterModule(0, 0, 16, 16, rng=np.random.default_rng(0))
    for p in m.params.values():
        p.tensor.data = np.random.default_rng(1).normal(0, 0.5, p.shape)
    from acmgen.adapters import adapter_apply
    hooks = {"a": None, "b": [(lambda o: adapter_apply(m, "mh", o), None), None]}
    both = loss_finetune(tiny, [e1, e2], hooks.__getitem__).item()
    n1, n2 = finetune_window(e1).sum(), finetune_window(e2).sum()
    l1 = loss_finetune(tiny, [e1], hooks.__getitem__).item()
    l2 = loss_finetune(tiny, [e2], hooks.__getitem__).item()
    assert both == pytest.approx((n1 * l1 + n2 * l2) / (n1 + n2), abs=1e-12)


# ---------------------------------------------------------------------------
# decoding and replay
# ---------------------------------------------------------------------------


class ScriptModel(RecomputeCache):
    """Deterministic stand-in whose next token follows a fixed script."""

    def __init__(self, model, script, noise=0.0):
        self.tokenizer = model.tokenizer
        self.config = model.config
        self.script = list(script)
        self.noise = noise

    def forward(self, tokens, hooks=None):
        tokens = np.atleast_2d(tokens)
        B, L = tokens.shape
        out = np.zeros((B, L, len(self.tokenizer)))
        for t in range(L):
            nxt = self.script[min(t, len(self.script) - 1)]
            out[:, t, nxt] = 5.0
        return Tensor(out)


def test_top_k_choice():
    rng = np.random.default_rng(0)
    logits = np.array([[0.1, 2.0, 2.0, -1.0], [3.0, 0.0, 0.0, 0.0]])
    assert top_k_choice(logits, 1, rng).tolist() == [1, 0]
    draws = np.array([top_k_choice(logits, 2, rng) for _ in range(300)])
    assert set(draws[:, 0]) == {1, 2}
    assert set(draws[:, 1]) <= {0, 1}
    with pytest.raises(ValueError):
        top_k_choice(logits, 0, rng)


def test_top_k_one_equals_greedy(tiny, tok):
    rng = np.random.default_rng(3)
    prefix = [tok.gen_id(1), tok.id("name")]
    samp = sample_sequences(tiny, None, prefix, 3, 12, 1, rng)
    greedy = greedy_decode(tiny, None, [prefix], max_new=10)[0]
    for s in samp:
        body = s[:-1] if s and s[-1] == tok.eos_id else s
        assert body == greedy


def test_greedy_decode_is_batch_independent(tiny, tok):
    prompts = [prompt_ids(tok, _desc(), ("name", "=", w)) for w in ("kata", "peme", "ruki")]
    prompts.append(prompt_ids(tok, _desc(), ("name", "=", "kata", ",", "type", "=", "bozo")))
    together = greedy_decode(tiny, None, prompts, max_new=6)
    alone = [greedy_decode(tiny, None, [p], max_new=6)[0] for p in prompts]
    assert together == alone
    assert all(len(x) <= 6 for x in together)


def test_split_budget():
    assert split_budget(20, 1) == [20]
    assert split_budget(20, 3) == [7, 7, 6]
    assert split_budget(5, 0) == []


def _well_formed_script(tok, d):
    ex = _ex(tok, d=d)
    return list(ex.tokens[1:])


def test_generate_pseudo_hits_target(tiny, tok):
    d = _desc(1, name="old")
    fake = ScriptModel(tiny, _well_formed_script(tok, d))
    buf = generate_pseudo(fake, [(d, None)], 100, 0.2, 20, np.random.default_rng(0), max_len=40)
    assert buf.targets == {"old": 20} and len(buf) == 20
    for ex in buf.all_examples():
        assert ex.origin == "old"
        assert parse_generated(tok, d, ex.tokens[1:]) is not None


def test_generate_pseudo_shortfall_warns(tiny, tok, caplog):
    d = _desc(1, name="old")
    fake = ScriptModel(tiny, [tok.id("name")] * 50)  # never emits [EOS]
    with caplog.at_level(logging.WARNING):
        buf = generate_pseudo(fake, [(d, None)], 50, 0.2, 1, np.random.default_rng(0), max_len=20)
    assert len(buf) == 0 and buf.attempts["old"] == 200
    assert buf.warnings and "kept 0 of 10" in caplog.text


def test_no_old_tasks_means_empty_buffer(tiny):
    assert generate_pseudo(tiny, [], 100, 0.2, 20, np.random.default_rng(0)).is_empty()


def test_interleave_alternates_and_cycles():
    cur = [[("c", i)] for i in range(40)]
    pool = [("p", i) for i in range(5)]
    out = interleave(cur, pool, 0.5, 2, np.random.default_rng(0))
    assert len(out) == 80
    assert [b[0][0] for b in out] == ["c", "p"] * 40
    assert [b for b in out if b[0][0] == "c"] == cur
    assert interleave(cur, pool, 0.0, 2, np.random.default_rng(0)) == cur
    assert interleave(cur, [], 0.5, 2, np.random.default_rng(0)) == cur
    third = interleave(cur[:6], pool, 0.25, 2, np.random.default_rng(0))
    assert sum(b[0][0] == "p" for b in third) == 2


def test_make_batches_covers_everything():
    b = make_batches(list(range(37)), 8, np.random.default_rng(1))
    assert sorted(x for batch in b for x in batch) == list(range(37))
    assert [len(x) for x in b] == [8, 8, 8, 8, 5]


# ---------------------------------------------------------------------------
# stages and methods
# ---------------------------------------------------------------------------

FAST = dict(lr=3e-3, decision_epochs=1, train_epochs=1, batch_size=8, max_new_tokens=12,
            max_pseudo_len=40)


def _specs(*fams, n_train=16, n_test=4):
    return [make_task(f, d, name=f"{f}{d}_{i}", n_train=n_train, n_test=n_test)
            for i, (f, d) in enumerate(fams)]


def test_hyper_validation():
    Hyper()
    for bad in (dict(lr=0), dict(pseudo_batch_fraction=1.5), dict(gamma=-1), dict(top_k=0)):
        with pytest.raises(EngineError):
            Hyper(**bad)
    with pytest.raises(EngineError):
        Hyper.from_dict({"nope": 1})
    h = Hyper(drop_layers=[2])
    assert Hyper.from_dict(h.to_dict()) == h


def test_decision_stage_first_task_all_new_and_old_modules_untouched(tok):
    model = make_tiny_backbone(tok, n_layers=3)
    hp = Hyper(**FAST)
    tasks = load_tasks(_specs(("slot2text", 0), ("slot2text", 1)), model)
    reg = LayerRegistry(3, 16, 16)
    arch, kept, rec = decision_stage(model, reg, tasks[0], hp, 0)
    assert [d["action"] for d in rec["decisions"]] == ["new"] * 3
    assert len(kept) == 3 and arch.layers == [m.module_id for m in kept]
    assert all(d["lambda"] == [1.0] for d in rec["decisions"])
    for m in kept:  # give the old modules non-trivial weights
        for p in m.params.values():
            p.tensor.data = p.data + 0.1
    before = {n: a.copy() for n, a in reg.tensors().items()}
    bb_before = {n: p.data.copy() for n, p in model.params.items()}
    arch2, kept2, rec2 = decision_stage(model, reg, tasks[1], hp, 1)
    assert rec2["decision_trained"]
    for n, a in before.items():
        assert reg.tensors()[n].tobytes() == a.tobytes()
    for n, p in model.params.items():
        assert p.data.tobytes() == bb_before[n].tobytes()
    for d in rec2["decisions"]:
        lam = np.array(d["lambda"])
        assert len(lam) == 2 and abs(lam.sum() - 1) <= 1e-9 and (lam > 0).all()
        expect = "reuse" if lam[0] >= lam[1] else "new"
        assert d["action"] == expect
    assert reg.count() == 3 + len(kept2)
    assert reg.next_id == 6  # discarded candidates still consumed their ids


def test_decision_stage_needs_data(tok):
    from acmgen.engine.learner import TaskData
    model = make_tiny_backbone(tok)
    with pytest.raises(EngineError):
        decision_stage(model, LayerRegistry(2, 16, 16), TaskData(_desc(), [], []), Hyper(**FAST), 0)


def test_argmax_tie_goes_to_oldest():
    lam = mixing_weights(Tensor(np.array([0.3, 0.3, 0.3]))).data
    assert int(np.argmax(lam)) == 0


def test_adapter_cl_module_count(tok):
    model = make_tiny_backbone(tok, n_layers=4)
    specs = _specs(*[("slot2text", d) for d in range(5)], n_train=8, n_test=2)
    st = run_method("adapter_cl", specs, model, Hyper(**FAST))
    assert st.registry.count() == 20
    assert st.params_per_task(model) == [4 * AdapterModule(0, 0, 16, 16).n_params()] * 5
    assert all(r["kept"] == 0 for r in st.replay)


def test_adapter_drop_passes_layers(tok):
    model = make_tiny_backbone(tok, n_layers=4)
    st = run_method("adapter_drop", _specs(("slot2text", 0), ("state", 0), n_train=8, n_test=2),
                    model, Hyper(**FAST))
    for arch, rec in zip(st.archs, st.growth):
        assert arch.layers[:3] == [None] * 3 and arch.layers[3] is not None
        assert [d["action"] for d in rec["decisions"]] == ["pass"] * 3 + ["new"]


def test_adapter_lamol_shares_first_task_modules(tok):
    model = make_tiny_backbone(tok, n_layers=2)
    st = run_method("adapter_lamol", _specs(("slot2text", 0), ("state", 0), n_train=10, n_test=2),
                    model, Hyper(**FAST))
    assert st.archs[0].layers == st.archs[1].layers
    assert st.registry.count() == 2
    assert st.replay[1]["qualifying"] == [st.archs[0].task]
    assert st.replay[1]["target"] == 2


def test_unknown_method(tok):
    with pytest.raises(EngineError):
        ContinualRun("ewc", _specs(("slot2text", 0)), make_tiny_backbone(tok), Hyper(**FAST))


def test_finetune_updates_backbone(tok):
    model = make_tiny_backbone(tok, n_layers=1)
    before = model.params["h0/ff/w1"].data.copy()
    st = run_method("finetune", _specs(("slot2text", 0), n_train=8, n_test=2), model, Hyper(**FAST))
    assert not np.array_equal(before, model.params["h0/ff/w1"].data)
    assert st.registry.count() == 0 and st.archs == [None]
    assert st.params_per_task(model) == [model.n_params()]


def test_acm_run_properties(tok):
    model = make_tiny_backbone(tok, n_layers=3)
    ref = {n: p.data.copy() for n, p in model.params.items()}
    specs = _specs(("slot2text", 0), ("slot2text", 1), ("state", 0), n_train=12, n_test=3)
    st = run_method("acm", specs, model, Hyper(**FAST))
    # backbone untouched except the [GEN] rows
    for n, p in model.params.items():
        if not n.startswith("wte/special/[GEN_"):
            assert p.data.tobytes() == ref[n].tobytes(), n
    assert st.registry.count() <= 3 * len(specs)
    assert st.scores.filled_rows() == 3
    for i, (arch, rep) in enumerate(zip(st.archs, st.replay)):
        shares = any(st.archs[j].shares_with(arch) for j in range(i))
        if rep["kept"] > 0:
            assert shares
        if not shares:
            assert rep["target"] == 0 and rep["kept"] == 0
        else:
            assert rep["target"] == round(0.2 * 12)
    counts = st.params_per_task(model)
    assert all(c <= 3 * AdapterModule(0, 0, 16, 16).n_params() for c in counts)


def test_same_seed_same_scores(tok):
    specs = _specs(("slot2text", 0), ("slot2text", 0 + 1), n_train=8, n_test=3)
    a = run_method("acm", specs, make_tiny_backbone(tok), Hyper(**FAST))
    b = run_method("acm", specs, make_tiny_backbone(tok), Hyper(**FAST))
    assert a.scores.to_list() == b.scores.to_list()
    assert a.growth == b.growth


def test_replay_buffer_stats():
    buf = ReplayBuffer()
    assert buf.is_empty() and buf.stats()["target"] == 0
