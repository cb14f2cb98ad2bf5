import csv
import json

import pytest
import yaml

from acmgen.cli import main

from conftest import make_tiny_backbone

TASKS = [{"family": "slot2text", "domain": 0, "name": "s0", "n_train": 10, "n_test": 3},
         {"family": "state", "domain": 0, "name": "st0", "n_train": 10, "n_test": 3}]
HYPER = {"lr": 3e-3, "decision_epochs": 1, "train_epochs": 1, "batch_size": 8,
         "max_new_tokens": 10, "max_pseudo_len": 40}


@pytest.fixture
def bb_dir(tok, tmp_path):
    make_tiny_backbone(tok, n_layers=4).save(tmp_path / "bb")
    return tmp_path / "bb"


def _config(tmp_path, bb_dir, method="acm", tasks=TASKS, **extra):
    cfg = {"method": method, "seed": 0, "backbone": str(bb_dir), "output": str(tmp_path / "out"),
           "tasks": tasks, "hyper": dict(HYPER), **extra}
    path = tmp_path / f"{method}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["run"]) == 1
    assert main(["run", "--config", "x.yaml", "--bogus"]) == 1
    assert main(["--help"]) == 0


def test_config_errors(tmp_path, bb_dir):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = _config(tmp_path, bb_dir, method="ewc")
    assert main(["run", "--config", str(bad)]) == 1
    good = _config(tmp_path, bb_dir)
    assert main(["run", "--config", str(good), "--set", "nonsense=1"]) == 1
    assert main(["run", "--config", str(good), "--set", "lr=-1"]) == 1
    assert main(["run", "--config", str(good), "--set", "backbone=/nope"]) == 1
    dup = _config(tmp_path, bb_dir, tasks=[TASKS[0], TASKS[0]])
    assert main(["run", "--config", str(dup)]) == 1


def test_run_emits_reports(tmp_path, bb_dir):
    cfg = _config(tmp_path, bb_dir)
    assert main(["run", "--config", str(cfg)]) == 0
    run_dir = tmp_path / "out" / "acm" / "0"
    for name in ("metrics.csv", "metrics.json", "score_matrix.csv", "growth.json", "params.csv"):
        assert (run_dir / name).exists(), name
    growth = json.loads((run_dir / "growth.json").read_text())
    assert [g["task"] for g in growth] == ["s0", "st0"]
    for g in growth:
        for d in g["decisions"]:
            assert set(d) == {"layer", "action", "module", "lambda"}
            assert d["action"] in ("reuse", "new")
    assert [d["action"] for d in growth[0]["decisions"]] == ["new"] * 4
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert rows[-1]["task"] == "summary" and rows[-1]["mean"] != ""
    m = json.loads((run_dir / "metrics.json").read_text())
    assert m["format_version"] == "v1" and m["method"] == "acm"
    # eval and probe against the final checkpoint
    ck = run_dir / "checkpoints" / "task_02"
    assert main(["eval", "--ckpt", str(ck), "--task", "s0"]) == 0
    assert main(["eval", "--ckpt", str(ck), "--task", "nope"]) == 1


def test_adapter_drop_growth_log(tmp_path, bb_dir):
    cfg = _config(tmp_path, bb_dir, method="adapter_drop", tasks=TASKS[:1])
    assert main(["run", "--config", str(cfg)]) == 0
    growth = json.loads((tmp_path / "out" / "adapter_drop" / "0" / "growth.json").read_text())
    assert [d["action"] for d in growth[0]["decisions"]] == ["pass", "pass", "pass", "new"]


def test_out_flag_and_env(tmp_path, bb_dir, monkeypatch):
    cfg = {"method": "adapter_cl", "backbone": str(bb_dir), "tasks": TASKS[:1], "hyper": HYPER}
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    monkeypatch.setenv("ACM_OUT", str(tmp_path / "env_out"))
    assert main(["run", "--config", str(path)]) == 0
    assert (tmp_path / "env_out" / "adapter_cl" / "0" / "metrics.csv").exists()
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "flag"),
                 "--set", "seed=4"]) == 0
    assert (tmp_path / "flag" / "adapter_cl" / "4" / "metrics.csv").exists()


def test_probe_command(tmp_path, bb_dir, capsys):
    cfg = _config(tmp_path, bb_dir, method="adapter_cl")
    assert main(["run", "--config", str(cfg)]) == 0
    ck = tmp_path / "out" / "adapter_cl" / "0" / "checkpoints" / "task_02"
    out = tmp_path / "probe.csv"
    assert main(["probe", "--ckpt", str(ck), "--task-a", "s0", "--task-b", "st0",
                 "--output", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "layer,O_A,M_A,O_B,M_B" and len(lines) == 5


def test_report_command(tmp_path, bb_dir, capsys):
    for method in ("acm", "adapter_cl"):
        for seed in (0, 1):
            cfg = _config(tmp_path, bb_dir, method=method, tasks=TASKS[:1])
            assert main(["run", "--config", str(cfg), "--set", f"seed={seed}"]) == 0
    assert main(["report", "--dir", str(tmp_path / "out"), "--baseline", "adapter_cl"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "report.csv")))
    assert {r["method"] for r in rows} == {"acm", "adapter_cl"}
    assert all(r["n_seeds"] == "2" for r in rows)
    assert main(["report", "--dir", str(tmp_path / "empty")]) == 1


def test_pretrain_command(tmp_path):
    cfg = {"pretrain": {"n_sequences": 100, "n_heldout": 20, "steps": 5, "batch_size": 4,
                        "output": str(tmp_path / "bb")},
           "backbone": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 16}}
    path = tmp_path / "p.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["pretrain", "--config", str(path)]) == 0
    man = json.loads((tmp_path / "bb" / "manifest.json").read_text())
    assert man["format_version"] == "v1" and man["pretrain"]["steps"] == 5
    assert all(man["backbone"]["frozen"].values())
    path.write_text(yaml.safe_dump({"pretrain": {"steps": 0}}))
    assert main(["pretrain", "--config", str(path)]) == 1
    path.write_text(yaml.safe_dump({"backbone": {"d_model": 10, "n_heads": 3}}))
    assert main(["pretrain", "--config", str(path)]) == 1


def test_unwritable_output_is_runtime_error(tmp_path, bb_dir):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _config(tmp_path, bb_dir, tasks=TASKS[:1])
    assert main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == 2
