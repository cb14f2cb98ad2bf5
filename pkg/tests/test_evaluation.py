import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acmgen.adapters import ArchitectureMap, LayerRegistry
from acmgen.engine import TaskDescriptor
from acmgen.evaluation import (MetricError, MetricsReport, ScoreMatrix, aggregate, bwt,
                               count_learnable_params, exact_match, format_mean_bwt,
                               module_swap_probe, probe_csv, probe_table, score_task, token_f1)
from acmgen.taskgen import generate_split, make_task, solve, task_corpus

from conftest import RecomputeCache, make_tiny_backbone


def test_bwt_worked_example():
    R = ScoreMatrix(2)
    R.set(0, 0, 90.0)
    R.set(1, 0, 80.0)
    R.set(1, 1, 70.0)
    assert bwt(R, 2) == -10.0
    assert bwt([[90, np.nan], [80, 70]], 2) == -10.0


def test_bwt_errors_and_no_forgetting():
    with pytest.raises(MetricError, match="BWT undefined for single task"):
        bwt(ScoreMatrix(3), 1)
    with pytest.raises(MetricError):
        bwt(ScoreMatrix(3), 2)  # nothing filled
    R = np.array([[50, 0, 0], [50, 60, 0], [50, 60, 10.0]])
    assert bwt(R, 3) == 0.0


@given(st.lists(st.floats(0, 50), min_size=6, max_size=6), st.floats(0, 50))
@settings(max_examples=60, deadline=None)
def test_bwt_translation_covariant(vals, shift):
    R = np.zeros((3, 3))
    R[np.tril_indices(3)] = vals
    assert bwt(R + shift, 3) == pytest.approx(bwt(R, 3), abs=1e-9)
    assert -100 <= bwt(R, 3) <= 100


def test_aggregate_examples():
    assert aggregate([50, 50, 50]) == (50.0, pytest.approx(50.0))
    mean, geo = aggregate([40, 90])
    assert mean == 65.0 and geo == pytest.approx(60.0, abs=1e-12)
    assert aggregate([0, 90])[1] is None
    with pytest.raises(MetricError):
        aggregate([])


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=8))
@settings(max_examples=60, deadline=None)
def test_am_gm(scores):
    mean, geo = aggregate(scores)
    assert geo <= mean + 1e-9


def test_format_mean_bwt():
    assert format_mean_bwt(66.1, 2.1) == "66.1 (+2.1)"
    assert format_mean_bwt(50.04, -3.26) == "50.0 (-3.3)"


def test_score_matrix_bounds_and_csv():
    R = ScoreMatrix(2)
    with pytest.raises(MetricError):
        R.set(0, 1, 10)
    with pytest.raises(MetricError):
        R.set(0, 0, 101)
    R.set(0, 0, 90)
    R.set(1, 0, 80)
    R.set(1, 1, 70)
    assert R.to_csv(["a", "b"]).splitlines() == ["after_task,a,b", "a,90.0000,", "b,80.0000,70.0000"]
    assert ScoreMatrix.from_list(R.to_list()).to_list() == R.to_list()


def test_exact_match_and_f1():
    refs = [["a", "b"], ["c"]]
    assert exact_match(refs, refs) == 100.0
    assert exact_match([[], []], refs) == 0.0
    assert exact_match([["a", "b"], ["x"]], refs) == 50.0
    assert token_f1(refs, refs) == pytest.approx(100.0)
    assert token_f1([["a"], ["x"]], refs) == pytest.approx(100 * (2 / 3) / 2)


class OracleModel(RecomputeCache):
    """Emits the family oracle's output for whatever prompt it is given."""

    def __init__(self, base, family, immediate_eos=False):
        self.tokenizer = base.tokenizer
        self.config = base.config
        self.family = family
        self.immediate_eos = immediate_eos

    def forward(self, tokens, hooks=None):
        from acmgen.autodiff import Tensor
        tok = self.tokenizer
        tokens = np.atleast_2d(tokens)
        out = np.zeros(tokens.shape + (len(tok),))
        for b, row in enumerate(tokens):
            row = list(row)
            q, a = row.index(tok.qsep_id), row.index(tok.asep_id)
            target = [] if self.immediate_eos else tok.encode(solve(self.family, tok.decode(row[1:q])))
            target.append(tok.eos_id)
            done = len(row) - a - 1
            out[b, -1, target[min(done, len(target) - 1)]] = 1.0
        return Tensor(out)


def test_score_task_oracle_and_eos(tok):
    base = make_tiny_backbone(tok)
    spec = make_task("query", 1, n_train=5, n_test=20)
    d = TaskDescriptor(1, spec)
    test = generate_split(spec, "test")
    assert score_task(OracleModel(base, "query"), None, d, test) == 100.0
    assert score_task(OracleModel(base, "query", True), None, d, test) == 0.0


def test_score_task_deterministic_and_permutation_invariant(tok):
    model = make_tiny_backbone(tok)
    spec = make_task("slot2text", 0, n_train=5, n_test=12)
    d = TaskDescriptor(1, spec)
    test = generate_split(spec, "test")
    em, f1 = score_task(model, None, d, test, max_new=8, with_f1=True)
    assert score_task(model, None, d, test, max_new=8) == em
    assert score_task(model, None, d, test[::-1], max_new=8) == em
    assert 0 <= f1 <= 100


def test_count_learnable_params():
    class M:
        def n_params(self):
            return 1160
    counts, avg = count_learnable_params([[M()] * 4, [M()], []])
    assert counts == [4640, 1160, 0] and avg == pytest.approx(5800 / 3)
    assert count_learnable_params([[], []], 999, "finetune") == ([999, 999], 999.0)
    with pytest.raises(MetricError):
        count_learnable_params([[]], None, "lamol")


def test_metrics_report_outputs():
    R = ScoreMatrix(2)
    R.set(0, 0, 90)
    R.set(1, 0, 80)
    R.set(1, 1, 0)
    rep = MetricsReport("acm", 3, ["a", "b"], R, [4640, 1160])
    s = rep.summary()
    assert s["mean"] == 40.0 and s["geomean"] is None and s["bwt"] == -10.0
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("method,seed,task")
    assert len(lines) == 4 and lines[-1].startswith("acm,3,summary")
    d = json.loads(rep.to_json())
    assert d["format_version"] == "v1" and d["geomean"] is None
    R.set(1, 1, 50)
    s = MetricsReport("acm", 3, ["a", "b"], R, [1, 1]).summary()
    assert s["geomean"] == pytest.approx(math.sqrt(80 * 50))


def _probe_setup(tok):
    model = make_tiny_backbone(tok, n_layers=2)
    reg = LayerRegistry(2, 16, 16)
    mods = [reg.new_module(l % 2, rng=np.random.default_rng(l)) for l in range(4)]
    for m in mods:
        reg.register(m)
    arch_a = ArchitectureMap("a", [0, 1])
    arch_b = ArchitectureMap("b", [2, 3])
    sa, sb = make_task("slot2text", 0, n_test=10), make_task("slot2text", 1, n_test=10)
    return model, reg, mods, arch_a, arch_b, sa, sb


def test_probe_identity_swap_and_constant_O(tok):
    model, reg, mods, arch_a, arch_b, sa, sb = _probe_setup(tok)
    d = TaskDescriptor(2, sb)
    test = generate_split(sb, "test")
    ca, cb = task_corpus(sa), task_corpus(sb)
    # every module is an untrained identity: swapping changes nothing
    r = module_swap_probe(model, reg, arch_a, arch_b, d, test, ca, cb, 0, max_new=6)
    assert r["O_A"] == r["M_A"] and r["O_B"] == r["M_B"]
    # train-like perturbation of B's modules: O stays the same across layers
    for m in mods[2:]:
        for n, p in m.params.items():
            p.tensor.data = np.random.default_rng(len(n)).normal(0, 0.5, p.shape)
    rows = probe_table(model, reg, arch_a, arch_b, d, test, ca, cb, max_new=6)
    assert [r["layer"] for r in rows] == [1, 2]
    assert rows[0]["O_A"] == rows[1]["O_A"] and rows[0]["O_B"] == rows[1]["O_B"]
    text = probe_csv(rows)
    assert text.splitlines()[0] == "layer,O_A,M_A,O_B,M_B" and len(text.splitlines()) == 3


def test_probe_errors(tok):
    model, reg, mods, arch_a, arch_b, sa, sb = _probe_setup(tok)
    d = TaskDescriptor(2, sb)
    with pytest.raises(MetricError):
        module_swap_probe(model, reg, arch_a, ArchitectureMap("b", [None, 3]), d, [], [], [], 0)
    with pytest.raises(MetricError):
        module_swap_probe(model, reg, arch_a, ArchitectureMap("b", [0, 3]), d, [], [], [], 0)
