"""Command line: ``acmgen {pretrain,run,eval,probe,report}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import Backbone, BackboneConfig, pretrain_backbone
from .checkpoint import (CheckpointError, latest_checkpoint, load_run, save_task_checkpoint)
from .config import (ConfigError, load_pretrain_config, load_run_config, parse_overrides)
from .engine.learner import ContinualRun, EngineError, RunState
from .evaluation import MetricsReport, probe_csv, probe_table, score_task
from .taskgen import Tokenizer, pretrain_corpus, task_corpus

log = logging.getLogger("acmgen")

REPORT_FILES = ("metrics.csv", "metrics.json", "score_matrix.csv", "growth.json", "params.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acmgen", description="Adaptive compositional adapters for continual "
                                           "sequence generation (desk-scale).")
    p.add_argument("--version", action="version", version=f"acmgen {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("pretrain", help="build and freeze a backbone")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("run", help="train one method over a task sequence")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", help="output root (default: config 'output', then $ACM_OUT)")
    s.add_argument("--resume", action="store_true", help="continue from the last task checkpoint")
    s.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)

    s = sub.add_parser("eval", help="score one task from a run checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)

    s = sub.add_parser("probe", help="module-swap probe between two tasks")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task-a", required=True)
    s.add_argument("--task-b", required=True)
    s.add_argument("--output", help="CSV path (default: stdout)")

    s = sub.add_parser("report", help="aggregate runs under <dir>/<method>/<seed>/")
    s.add_argument("--dir", required=True)
    s.add_argument("--baseline", default=None, help="method to pair every other method against")
    return p


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_pretrain_config(args.config, parse_overrides(args.set))
    tok = Tokenizer.universe()
    try:
        bcfg = BackboneConfig(vocab_size=len(tok), n_special=tok.n_special, **cfg.arch)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"backbone: {e}") from e
    corpus = pretrain_corpus(cfg.n_sequences, seed=cfg.seed)
    held = pretrain_corpus(cfg.n_heldout, seed=cfg.seed + 1)
    res = pretrain_backbone(corpus, held, bcfg, tok, steps=cfg.steps, batch_size=cfg.batch_size,
                            lr=cfg.lr, seed=cfg.seed)
    res.model.save(cfg.output, extra={"pretrain": {
        "steps": cfg.steps, "n_sequences": cfg.n_sequences, "seed": cfg.seed,
        "initial_heldout_loss": res.initial_loss, "final_heldout_loss": res.final_loss}})
    print(f"backbone saved to {cfg.output} (held-out loss {res.initial_loss:.4f} -> "
          f"{res.final_loss:.4f})")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def emit_reports(run_dir: Path, run: ContinualRun) -> None:
    st = run.state
    names = st.task_names
    params = st.params_per_task(run.model)
    report = MetricsReport(st.method, st.hyper.seed, names, st.scores, params,
                           extra={"replay": st.replay, "notes": st.notes,
                                  "hyper": st.hyper.to_dict()})
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.csv").write_text(report.to_csv())
    (run_dir / "metrics.json").write_text(report.to_json() + "\n")
    (run_dir / "score_matrix.csv").write_text(st.scores.to_csv(names))
    growth = [{"task": g["task"], "decisions": g["decisions"]} for g in st.growth]
    (run_dir / "growth.json").write_text(json.dumps(growth, indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "new_modules", "learnable_params"])
    for name, ids, n in zip(names, st.created, params):
        w.writerow([name, len(ids), n])
    w.writerow(["average", "", f"{np.mean(params):.1f}"])
    (run_dir / "params.csv").write_text(buf.getvalue())


def cmd_run(args) -> int:
    overrides = parse_overrides(args.set)
    if args.out:
        overrides["output"] = args.out
    cfg = load_run_config(args.config, overrides)
    run_dir = cfg.run_dir
    state: RunState | None = None
    model = None
    if args.resume:
        ck = latest_checkpoint(run_dir)
        if ck is not None:
            model, state = load_run(ck)
            if state.hyper.to_dict() != cfg.hyper.to_dict():
                raise ConfigError("--resume: hyperparameters differ from the checkpointed run")
            log.info("resuming %s after %d task(s)", run_dir, state.completed)
        else:
            log.info("no checkpoint under %s, starting fresh", run_dir)
    if model is None:
        model = Backbone.load(cfg.backbone)
    run = ContinualRun(cfg.method, cfg.tasks, model, cfg.hyper, cfg.data_seed,
                       cfg.adapter_reduce, state=state)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    stop_after = args.stop_after

    class _Stop(Exception):
        pass

    def on_done(r: ContinualRun):
        save_task_checkpoint(run_dir, r.model, r.state)
        if stop_after is not None and r.state.completed >= stop_after:
            raise _Stop

    try:
        run.run(on_done)
    except _Stop:
        print(f"stopped after {run.state.completed} task(s); checkpoint in {run_dir}")
        return 0
    emit_reports(run_dir, run)
    s = MetricsReport(run.state.method, cfg.seed, run.state.task_names, run.state.scores,
                      run.state.params_per_task(model)).summary()
    bwt_s = "n/a" if s["bwt"] is None else f"{s['bwt']:+.1f}"
    print(f"{cfg.method} seed {cfg.seed}: mean {s['mean']:.1f}, BWT {bwt_s} -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval / probe
# ---------------------------------------------------------------------------


def _open_run(path) -> ContinualRun:
    model, state = load_run(path)
    return ContinualRun(state.method, state.specs, model, state.hyper, state=state)


def _task_index(run: ContinualRun, name: str) -> int:
    if name not in run.name_to_idx:
        raise ConfigError(f"unknown task {name!r}; run has {', '.join(run.name_to_idx)}")
    i = run.name_to_idx[name]
    if i >= run.state.completed:
        raise ConfigError(f"task {name!r} has not been trained in this checkpoint")
    return i


def cmd_eval(args) -> int:
    run = _open_run(args.ckpt)
    i = _task_index(run, args.task)
    t = run.tasks[i]
    em, f1 = score_task(run.model, run.hooks_for_task(i), t.descriptor, t.test,
                        run.hyper.max_new_tokens, with_f1=True)
    print(json.dumps({"task": args.task, "exact_match": em, "token_f1": f1}))
    return 0


def cmd_probe(args) -> int:
    run = _open_run(args.ckpt)
    ia, ib = _task_index(run, args.task_a), _task_index(run, args.task_b)
    arch_a, arch_b = run.state.archs[ia], run.state.archs[ib]
    if arch_a is None or arch_b is None:
        raise ConfigError("probe needs an adapter-based run")
    ta, tb = run.tasks[ia], run.tasks[ib]
    rows = probe_table(run.model, run.state.registry, arch_a, arch_b, tb.descriptor, tb.test,
                       task_corpus(ta.descriptor.spec), task_corpus(tb.descriptor.spec),
                       run.hyper.max_new_tokens)
    if not rows:
        raise ConfigError(f"{args.task_b} has no layer with its own module next to one of "
                          f"{args.task_a}'s")
    text = probe_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def collect_runs(root: Path) -> dict[str, dict[int, dict]]:
    runs: dict[str, dict[int, dict]] = {}
    for f in sorted(root.glob("*/*/metrics.json")):
        d = json.loads(f.read_text())
        runs.setdefault(d["method"], {})[int(d["seed"])] = d
    return runs


def _mean_sd(xs) -> tuple[float, float]:
    xs = [x for x in xs if x is not None]
    if not xs:
        return float("nan"), float("nan")
    return float(np.mean(xs)), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def summarize_runs(runs: dict[str, dict[int, dict]], baseline: str | None = None) -> str:
    from scipy import stats

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds", "mean", "mean_sd", "bwt", "bwt_sd", "geomean", "geomean_sd",
                "avg_params", "paired_vs", "t_stat", "p_value"])
    for method in sorted(runs):
        seeds = runs[method]
        m, msd = _mean_sd([d["mean"] for d in seeds.values()])
        b, bsd = _mean_sd([d["bwt"] for d in seeds.values()])
        g, gsd = _mean_sd([d["geomean"] for d in seeds.values()])
        pa, _ = _mean_sd([d["avg_learnable_params"] for d in seeds.values()])
        t = pv = ""
        if baseline and method != baseline and baseline in runs:
            shared = sorted(set(seeds) & set(runs[baseline]))
            if len(shared) >= 2:
                res = stats.ttest_rel([seeds[s]["mean"] for s in shared],
                                      [runs[baseline][s]["mean"] for s in shared])
                t, pv = f"{res.statistic:.4f}", f"{res.pvalue:.4g}"
        w.writerow([method, len(seeds), f"{m:.4f}", f"{msd:.4f}", f"{b:.4f}", f"{bsd:.4f}",
                    f"{g:.4f}", f"{gsd:.4f}", f"{pa:.1f}", baseline if t else "", t, pv])
    return buf.getvalue()


def cmd_report(args) -> int:
    root = Path(args.dir)
    runs = collect_runs(root)
    if not runs:
        raise ConfigError(f"no metrics.json under {root}/<method>/<seed>/")
    text = summarize_runs(runs, args.baseline)
    (root / "report.csv").write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "eval": cmd_eval, "probe": cmd_probe,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EngineError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
