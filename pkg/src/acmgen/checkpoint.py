"""Per-task run checkpoints: backbone, adapter registry and run bookkeeping."""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import archive
from .adapters import ArchitectureMap, LayerRegistry
from .backbone import Backbone
from .engine.learner import Hyper, RunState
from .evaluation import ScoreMatrix
from .taskgen import TaskSpec, make_task

LATEST = "latest.json"


class CheckpointError(RuntimeError):
    pass


def _spec_from_dict(d: dict) -> TaskSpec:
    return make_task(d["family"], d["domain_seed"], d["name"], d["n_train"], d["n_test"])


def state_manifest(state: RunState) -> dict:
    return {
        "method": state.method,
        "hyper": state.hyper.to_dict(),
        "specs": [s.to_dict() for s in state.specs],
        "registry": state.registry.manifest(),
        "archs": [None if a is None else {"task": a.task, "layers": a.layers} for a in state.archs],
        "scores": state.scores.to_list(),
        "growth": state.growth,
        "replay": state.replay,
        "created": state.created,
        "notes": state.notes,
    }


def save_run(directory, model: Backbone, state: RunState) -> Path:
    tensors = {f"backbone/{n}": p.data for n, p in model.params.items()}
    tensors.update(state.registry.tensors())
    man = {"kind": "run", "backbone": model.manifest(), "run": state_manifest(state)}
    return archive.save(directory, tensors, man)


def load_run(directory) -> tuple[Backbone, RunState]:
    try:
        tensors, man = archive.load(directory)
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint at {directory}") from e
    if man.get("kind") != "run":
        raise CheckpointError(f"{directory} is not a run checkpoint")
    model = Backbone.from_archive(tensors, man)
    r = man["run"]
    registry = LayerRegistry.from_archive(tensors, r["registry"])
    state = RunState(
        method=r["method"], hyper=Hyper.from_dict(r["hyper"]),
        specs=[_spec_from_dict(s) for s in r["specs"]], registry=registry,
        archs=[None if a is None else ArchitectureMap(a["task"], list(a["layers"]))
               for a in r["archs"]],
        scores=ScoreMatrix.from_list(r["scores"]), growth=r["growth"], replay=r["replay"],
        created=[list(c) for c in r["created"]], notes=list(r["notes"]))
    return model, state


def task_dir(run_dir, task_idx: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"task_{task_idx + 1:02d}"


def save_task_checkpoint(run_dir, model: Backbone, state: RunState) -> Path:
    """Write the checkpoint for the last completed task and point ``latest`` at it."""
    d = task_dir(run_dir, state.completed - 1)
    save_run(d, model, state)
    ptr = Path(run_dir) / "checkpoints" / LATEST
    tmp = ptr.with_suffix(".tmp")
    tmp.write_text(json.dumps({"format_version": archive.FORMAT_VERSION,
                               "completed": state.completed, "path": d.name}))
    os.replace(tmp, ptr)
    return d


def latest_checkpoint(run_dir) -> Path | None:
    ptr = Path(run_dir) / "checkpoints" / LATEST
    if not ptr.exists():
        return None
    return ptr.parent / json.loads(ptr.read_text())["path"]
