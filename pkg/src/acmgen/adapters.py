"""Adapter modules, the per-layer registry, and hidden-state mixing.

An adapter module holds two bottleneck MLPs, one applied to the attention
output (site ``"mh"``) and one to the feed-forward output (site ``"ff"``)::

    adapter(o) = o + up(gelu(down(o)))

Up-projections start at zero, so a fresh module is an exact identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NamedParam, Tensor
from .autodiff import tensor as T

SITES = ("mh", "ff")


class AdapterError(ValueError):
    pass


def bottleneck_dim(d_model: int, reduce_factor: int) -> int:
    return max(1, d_model // reduce_factor)


def module_param_count(d_model: int, reduce_factor: int) -> int:
    """Parameters in one module: two MLPs of ``d*b + b + b*d + d`` each."""
    b = bottleneck_dim(d_model, reduce_factor)
    return 2 * (d_model * b + b + b * d_model + d_model)


class AdapterModule:
    def __init__(self, module_id: int, layer: int, d_model: int, reduce_factor: int = 16,
                 rng: np.random.Generator | None = None, init_std: float = 0.02):
        self.module_id = module_id
        self.layer = layer
        self.d_model = d_model
        self.reduce_factor = reduce_factor
        b = bottleneck_dim(d_model, reduce_factor)
        rng = rng if rng is not None else np.random.default_rng([module_id])
        self.params: dict[str, NamedParam] = {}
        for site in SITES:
            for key, arr in (
                ("down.w", rng.normal(0.0, init_std, size=(d_model, b))),
                ("down.b", np.zeros(b)),
                ("up.w", np.zeros((b, d_model))),
                ("up.b", np.zeros(d_model)),
            ):
                name = f"adapters/{layer}/{module_id}/{site}.{key}"
                self.params[name] = NamedParam(name, arr)

    @property
    def bottleneck(self) -> int:
        return bottleneck_dim(self.d_model, self.reduce_factor)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def site_params(self, site: str) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if site not in SITES:
            raise AdapterError(f"unknown adapter site {site!r}")
        pre = f"adapters/{self.layer}/{self.module_id}/{site}."
        p = self.params
        return (p[pre + "down.w"].tensor, p[pre + "down.b"].tensor,
                p[pre + "up.w"].tensor, p[pre + "up.b"].tensor)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.params.values():
            p.frozen = frozen

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.tensor.data = np.array(state[n], dtype=np.float64)

    def __repr__(self) -> str:
        return f"AdapterModule(id={self.module_id}, layer={self.layer}, b={self.bottleneck})"


def adapter_apply(module: AdapterModule, site: str, o: Tensor, layer: int | None = None) -> Tensor:
    """``o + up(gelu(down(o)))`` with the MLP for ``site``."""
    if layer is not None and layer != module.layer:
        raise AdapterError(f"module {module.module_id} lives in layer {module.layer}, not {layer}")
    if o.shape[-1] != module.d_model:
        raise AdapterError(f"adapter expects last dim {module.d_model}, got {o.shape}")
    dw, db, uw, ub = module.site_params(site)
    return o + T.linear(T.gelu(T.linear(o, dw, db)), uw, ub)


def init_coefficients(k: int, c: float) -> np.ndarray:
    """Raw mixing logits: ``c`` for each of ``k`` old modules, ``-c`` for the new one."""
    if k < 0:
        raise AdapterError("k must be non-negative")
    if not c > 0:
        raise AdapterError(f"coefficient prior c must be > 0, got {c}")
    return np.array([c] * k + [-c], dtype=np.float64)


def mixing_weights(coeffs: Tensor) -> Tensor:
    return T.softmax(coeffs)


def mix_apply(layer: int, candidates: Sequence[AdapterModule], weights: Tensor, site: str,
              o: Tensor) -> Tensor:
    """``sum_t weights[t] * adapter_apply(candidates[t], site, o)``.

    ``weights`` is the softmax of a layer's mixing coefficients; the same
    vector is used at both sites of the layer.
    """
    if weights.shape != (len(candidates),):
        raise AdapterError(f"{len(candidates)} candidates but weights of shape {weights.shape}")
    out = None
    for t, mod in enumerate(candidates):
        term = T.mul(T.getitem(weights, t), adapter_apply(mod, site, o, layer))
        out = term if out is None else out + term
    return out


def entropy_penalty(weights: Sequence[Tensor], gamma: float) -> Tensor:
    """``gamma * sum_l sum_i -w_il log w_il`` over the per-layer weight vectors."""
    total = None
    for w in weights:
        h = T.neg(T.tsum(T.mul(w, T.log(w))))
        total = h if total is None else total + h
    if total is None:
        return Tensor(0.0)
    return T.scale(total, gamma)


# ---------------------------------------------------------------------------
# Registry and architecture maps
# ---------------------------------------------------------------------------


@dataclass
class LayerRegistry:
    """Append-only store of adapter modules, indexed by layer."""

    n_layers: int
    d_model: int
    reduce_factor: int = 16
    layers: list[list[AdapterModule]] = field(default_factory=list)
    next_id: int = 0

    def __post_init__(self):
        if not self.layers:
            self.layers = [[] for _ in range(self.n_layers)]

    def new_module(self, layer: int, rng: np.random.Generator | None = None) -> AdapterModule:
        """Create a module with a fresh id; it is not registered yet."""
        mod = AdapterModule(self.next_id, layer, self.d_model, self.reduce_factor, rng=rng)
        self.next_id += 1
        return mod

    def register(self, mod: AdapterModule) -> None:
        if any(m.module_id == mod.module_id for m in self.layers[mod.layer]):
            raise AdapterError(f"module {mod.module_id} already registered")
        self.layers[mod.layer].append(mod)

    def get(self, layer: int, module_id: int) -> AdapterModule:
        for m in self.layers[layer]:
            if m.module_id == module_id:
                return m
        raise AdapterError(f"no module {module_id} in layer {layer}")

    def all_modules(self) -> list[AdapterModule]:
        return [m for layer in self.layers for m in layer]

    def count(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.all_modules():
            out.update({n: p.data for n, p in m.params.items()})
        return out

    def manifest(self) -> dict:
        return {"n_layers": self.n_layers, "d_model": self.d_model,
                "reduce_factor": self.reduce_factor, "next_id": self.next_id,
                "layers": [[m.module_id for m in layer] for layer in self.layers]}

    @classmethod
    def from_archive(cls, tensors: dict[str, np.ndarray], man: dict) -> "LayerRegistry":
        reg = cls(man["n_layers"], man["d_model"], man["reduce_factor"])
        for l, ids in enumerate(man["layers"]):
            for mid in ids:
                mod = AdapterModule(mid, l, reg.d_model, reg.reduce_factor)
                mod.load_state_dict(tensors)
                reg.layers[l].append(mod)
        reg.next_id = man["next_id"]
        return reg


PASS = None


@dataclass
class ArchitectureMap:
    """Per-layer module id (or ``None`` for pass-through) used by one task."""

    task: str
    layers: list[int | None]

    def module_ids(self) -> set[int]:
        return {m for m in self.layers if m is not None}

    def shares_with(self, other: "ArchitectureMap") -> bool:
        return bool(self.module_ids() & other.module_ids())

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "layers": self.layers})

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureMap":
        d = json.loads(text)
        return cls(d["task"], list(d["layers"]))

    def validate(self, registry: LayerRegistry, allow_pass: bool = True) -> None:
        if len(self.layers) != registry.n_layers:
            raise AdapterError(f"{self.task}: map has {len(self.layers)} layers, "
                               f"registry {registry.n_layers}")
        for l, mid in enumerate(self.layers):
            if mid is None:
                if not allow_pass:
                    raise AdapterError(f"{self.task}: pass-through at layer {l} not allowed")
                continue
            registry.get(l, mid)


def fixed_hooks(registry: LayerRegistry, arch: ArchitectureMap | None):
    """Backbone hooks routing every layer through the mapped module."""
    if arch is None:
        return None
    hooks = []
    for l, mid in enumerate(arch.layers):
        if mid is None:
            hooks.append(None)
            continue
        mod = registry.get(l, mid)
        hooks.append((lambda o, m=mod: adapter_apply(m, "mh", o),
                      lambda o, m=mod: adapter_apply(m, "ff", o)))
    return hooks


def mixing_hooks(candidates: Sequence[Sequence[AdapterModule]], weights: Sequence[Tensor]):
    """Backbone hooks mixing all candidates of each layer with its weights."""
    hooks = []
    for l, (cands, w) in enumerate(zip(candidates, weights)):
        hooks.append((lambda o, l=l, c=cands, w=w: mix_apply(l, c, w, "mh", o),
                      lambda o, l=l, c=cands, w=w: mix_apply(l, c, w, "ff", o)))
    return hooks
