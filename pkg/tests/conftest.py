import importlib
import sys

import numpy as np
import pytest

from acmgen.autodiff import _kernels_py
from acmgen.autodiff import tensor as tensor_mod

BACKENDS = ["python"]
try:
    _compiled = importlib.import_module("acmgen.autodiff._kernels")
    BACKENDS.append("compiled")
except ImportError:  # extension not built
    _compiled = None


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    impl = _kernels_py if request.param == "python" else _compiled
    monkeypatch.setattr(tensor_mod, "K", impl)
    return request.param


@pytest.fixture
def tok():
    from acmgen.taskgen import Tokenizer
    return Tokenizer.universe()


def make_tiny_backbone(tok, seed=0, n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64):
    from acmgen.backbone import Backbone, BackboneConfig
    cfg = BackboneConfig(vocab_size=len(tok), n_special=tok.n_special, n_layers=n_layers,
                         d_model=d_model, n_heads=n_heads, d_ff=d_ff, max_seq_len=max_seq_len,
                         init_std=0.1)
    model = Backbone(cfg, tok, seed=seed)
    model.freeze()
    return model


@pytest.fixture
def tiny(tok):
    return make_tiny_backbone(tok)


class RecomputeCache:
    """Gives a fake model the cached-decode interface by re-running ``forward``."""

    def forward_cached(self, tokens, cache, hooks=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        if cache:
            cache[0] = np.concatenate([cache[0], tokens], axis=1)
        else:
            cache.append(tokens)
        return self.forward(cache[0], hooks).data[:, -1, :]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
