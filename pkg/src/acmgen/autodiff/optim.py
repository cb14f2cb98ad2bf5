"""Named parameters and the AdamW optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NamedParam:
    """A trainable leaf with a stable name and a freeze flag.

    Freezing clears ``requires_grad`` so the tensor never enters a tape.
    """

    __slots__ = ("name", "tensor", "_frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(data)
        self._frozen = False
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen
        if self._frozen:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"NamedParam({self.name!r}, shape={self.shape}, frozen={self.frozen})"


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    ``p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p)``. Frozen params and
    params without a gradient are skipped; all grads are cleared after a step.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: list[NamedParam] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names given to AdamW")
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for p in self.params:
            g = p.tensor.grad
            if p.frozen or g is None:
                p.tensor.grad = None
                continue
            m = st.m.get(p.name)
            if m is None:
                m = st.m[p.name] = np.zeros_like(p.data)
                st.v[p.name] = np.zeros_like(p.data)
            v = st.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.data
            p.tensor.data -= st.lr * update
            p.tensor.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None
