"""YAML run and pretraining configs with ``--set key=value`` overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .engine.learner import METHODS, EngineError, Hyper
from .taskgen import TaskError, TaskSpec, make_task


class ConfigError(ValueError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get("ACM_OUT", "runs"))


def _read_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_overrides(items) -> dict[str, object]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {key}: cannot parse value {raw!r}") from e
    return out


def _task_specs(items) -> list[TaskSpec]:
    if not isinstance(items, list) or not items:
        raise ConfigError("'tasks' must be a non-empty list")
    specs = []
    for t in items:
        if not isinstance(t, dict) or "family" not in t:
            raise ConfigError(f"task entry needs at least 'family': {t!r}")
        try:
            specs.append(make_task(t["family"], int(t.get("domain", 0)), t.get("name"),
                                   int(t.get("n_train", 500)), int(t.get("n_test", 200))))
        except TaskError as e:
            raise ConfigError(str(e)) from e
    names = [s.name for s in specs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ConfigError(f"task names must be unique, repeated: {sorted(dup)}")
    return specs


@dataclass
class RunConfig:
    method: str
    tasks: list[TaskSpec]
    hyper: Hyper
    backbone: Path
    output: Path
    seed: int = 0
    data_seed: int = 0
    adapter_reduce: int = 16

    @property
    def run_dir(self) -> Path:
        return self.output / self.method / str(self.seed)

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "data_seed": self.data_seed,
                "backbone": str(self.backbone), "adapter_reduce": self.adapter_reduce,
                "tasks": [s.to_dict() for s in self.tasks], "hyper": self.hyper.to_dict()}


def load_run_config(path, overrides: dict | None = None, check_backbone: bool = True) -> RunConfig:
    data = _read_yaml(path)
    hyper_d = dict(data.get("hyper") or {})
    top = {k: data.get(k) for k in ("method", "seed", "backbone", "output", "data_seed",
                                    "adapter_reduce")}
    hyper_names = {f.name for f in fields(Hyper)}
    for key, val in (overrides or {}).items():
        key = key[len("hyper."):] if key.startswith("hyper.") else key
        if key in top:
            top[key] = val
        elif key in hyper_names:
            hyper_d[key] = val
        else:
            raise ConfigError(f"--set: unknown key {key!r}")
    method = top["method"]
    if method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {method!r}")
    seed = int(top["seed"] or 0)
    hyper_d["seed"] = seed
    try:
        hyper = Hyper.from_dict(hyper_d)
    except (EngineError, TypeError) as e:
        raise ConfigError(f"hyper: {e}") from e
    if not top["backbone"]:
        raise ConfigError("'backbone' checkpoint path is required")
    base = Path(path).resolve().parent
    backbone = Path(top["backbone"])
    if not backbone.is_absolute() and not backbone.exists():
        backbone = base / backbone
    if check_backbone and not (backbone / "manifest.json").exists():
        raise ConfigError(f"backbone checkpoint not found: {backbone}")
    out = Path(top["output"]) if top["output"] else default_out_root()
    return RunConfig(method, _task_specs(data.get("tasks")), hyper, backbone, out, seed,
                     int(top["data_seed"] or 0), int(top["adapter_reduce"] or 16))


@dataclass
class PretrainConfig:
    arch: dict = field(default_factory=dict)
    n_sequences: int = 20000
    n_heldout: int = 500
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    output: Path = Path("backbone")


def load_pretrain_config(path, overrides: dict | None = None) -> PretrainConfig:
    data = _read_yaml(path)
    pre = dict(data.get("pretrain") or {})
    arch = dict(data.get("backbone") or {})
    for key, val in (overrides or {}).items():
        if key.startswith("backbone."):
            arch[key[len("backbone."):]] = val
        else:
            pre[key[len("pretrain."):] if key.startswith("pretrain.") else key] = val
    allowed = {f.name for f in fields(PretrainConfig)} - {"arch"}
    unknown = set(pre) - allowed
    if unknown:
        raise ConfigError(f"pretrain: unknown keys {sorted(unknown)}")
    arch_allowed = {f.name for f in fields(BackboneConfig)} - {"vocab_size", "n_special"}
    if set(arch) - arch_allowed:
        raise ConfigError(f"backbone: unknown keys {sorted(set(arch) - arch_allowed)}")
    cfg = PretrainConfig(arch=arch, **pre)
    cfg.output = Path(cfg.output)
    for name in ("n_sequences", "steps", "batch_size"):
        if int(getattr(cfg, name)) <= 0:
            raise ConfigError(f"pretrain.{name} must be positive")
    return cfg
