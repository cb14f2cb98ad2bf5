"""Backend selection for the row kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Setting ``ACMGEN_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("ACMGEN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
xent_fwd = _impl.xent_fwd
xent_bwd = _impl.xent_bwd
embedding_bwd = _impl.embedding_bwd

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "xent_fwd",
    "xent_bwd",
    "embedding_bwd",
]
