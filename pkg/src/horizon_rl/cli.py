"""Command-line entry point: split, train, simulate, evaluate, report.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .env import ChainTask, expert_demonstrations, load_task
from .errors import HorizonError, InvalidConfig
from .losses import RlHyperparams
from .pipeline_sim import PARTIAL, SYNCHRONOUS, dump_events, load_spec, simulate
from .rubric import check_not_blacklisted, load_blacklist
from .splitter import SplitConfig, coverage_report, split_trajectory, write_plan
from .trainer import (
    TrainConfig,
    TrainRunMetrics,
    build_schedule,
    derive_seed,
    evaluate,
    load_params,
    run_training,
    save_params,
)
from .trajectory import read_trajectory, validate_trajectory


@dataclass
class ExperimentConfig:
    task_path: Path | None
    split: SplitConfig
    schedule: dict | None
    rl: RlHyperparams
    train: TrainConfig
    seed: int | None
    n_demos: int = 1
    demo_timeout: float | None = None
    out_dir: Path | None = None
    blacklist: frozenset[str] = field(default_factory=frozenset)

    def task(self) -> ChainTask:
        if self.task_path is None:
            raise InvalidConfig("config has no 'task' entry")
        check_not_blacklisted(str(self.task_path), self.blacklist)
        return load_task(self.task_path)


def _pick(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfig(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    base = path.parent

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise InvalidConfig(f"referenced file does not exist: {p}")
        return p

    blacklist = frozenset()
    if data.get("blacklist"):
        blacklist = load_blacklist(resolve(data["blacklist"]))
    sft = data.get("sft", {})
    return ExperimentConfig(
        task_path=resolve(data.get("task")),
        split=_pick(SplitConfig, data.get("split", {"max_context_tokens": 64, "window_steps": 6}), "split"),
        schedule=data.get("schedule"),
        rl=_pick(RlHyperparams, data.get("rl", {}), "rl"),
        train=_pick(TrainConfig, data.get("train", {}), "train"),
        seed=data.get("seed"),
        n_demos=int(sft.get("n_demos", 1)),
        demo_timeout=sft.get("demo_timeout"),
        out_dir=base / data["out"] if data.get("out") else None,
        blacklist=blacklist,
    )


def _seed(args, cfg: ExperimentConfig | None = None) -> int:
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else None)
    if seed is None:
        raise InvalidConfig("no seed given: pass --seed or set 'seed' in the config")
    return int(seed)


def _out_dir(args, fallback: Path | None = None) -> Path:
    if args.out is None and fallback is None:
        raise InvalidConfig("no output directory: pass --out or set 'out' in the config")
    out = Path(args.out) if args.out is not None else fallback
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------


def cmd_split(args) -> int:
    cfg = load_config(args.config)
    split = cfg.split
    if args.dedup_overlap is not None:
        split = SplitConfig(split.max_context_tokens, split.window_steps, split.overlap_steps, args.dedup_overlap == "on")
    traj = read_trajectory(args.trajectory)
    problems = validate_trajectory(traj)
    if problems:
        raise InvalidConfig("trajectory is malformed: " + "; ".join(problems))
    subs = split_trajectory(traj, split)
    report = coverage_report(traj, subs, dedup=split.dedup_loss_on_overlap)
    out = _out_dir(args, cfg.out_dir)
    write_plan(out / "plan.jsonl", subs)
    summary = {
        "windows": len(subs),
        "step_multiplicity": {str(k): v for k, v in sorted(report.step_multiplicity().items())},
        "uncovered": [list(t) for t in report.uncovered],
        "truncated": [list(t) for t in report.truncated],
        "duplicated": [list(t) for t in report.duplicated],
    }
    (out / "coverage.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"windows: {len(subs)}")
    for s in subs:
        print(f"  [{s.start_step}, {s.end_step}] kept from {s.first_kept}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    task = cfg.task()
    schedule = None
    if cfg.schedule:
        sch = cfg.schedule
        schedule = build_schedule(sch["timeouts"], sch["iterations_per_stage"], sch["group_size"])
    demos = expert_demonstrations(task, cfg.n_demos, cfg.demo_timeout)
    params, metrics = run_training(task, demos, schedule, cfg.split, cfg.rl, seed, cfg.train)
    out = _out_dir(args, cfg.out_dir)
    (out / "metrics.jsonl").write_text(metrics.dumps(), encoding="utf-8")
    save_params(out / "params.npy", params)
    timeout = cfg.train.eval_timeout or task.time_budget
    # Same eval seed as the trainer, so this matches the last metrics row.
    final = evaluate(params, task, timeout, cfg.train.n_eval, derive_seed(seed, 1), cfg.train.eval_greedy)
    print(f"final eval Q: {final.q_mean:.6f}")
    print(f"final eval turns: {final.turns_mean:.3f}")
    print(f"final entropy: {final.entropy:.6f}")
    return 0


def cmd_simulate(args) -> int:
    spec = load_spec(args.config)
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    horizon = args.horizon if args.horizon is not None else raw.get("horizon")
    if horizon is None:
        raise InvalidConfig("no horizon: pass --horizon or set 'horizon' in the spec file")
    strategy = PARTIAL if args.strategy == "partial" else SYNCHRONOUS
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    events, metrics = simulate(spec, strategy, float(horizon), seed)
    out = _out_dir(args, Path(args.config).parent / raw["out"] if raw.get("out") else None)
    (out / "events.jsonl").write_text(dump_events(events), encoding="utf-8")
    (out / "sim_metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n", encoding="utf-8")
    print(f"strategy: {strategy}")
    print(f"utilization: {round(metrics.rollout_node_utilization, 12)}")
    print(f"judge queue max depth: {metrics.judge_queue_max_depth}")
    print(f"iterations completed: {metrics.iterations_completed}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    task = cfg.task()
    params = load_params(args.params)
    timeout = args.timeout if args.timeout is not None else (cfg.train.eval_timeout or task.time_budget)
    n_eval = args.n_eval if args.n_eval is not None else cfg.train.n_eval
    res = evaluate(params, task, timeout, n_eval, derive_seed(seed, 1), cfg.train.eval_greedy)
    print(f"Q: {res.q_mean:.6f}")
    print(f"turns: {res.turns_mean:.3f}")
    print(f"entropy: {res.entropy:.6f}")
    return 0


_SERIES = ("loss", "q_mean", "turns_mean", "entropy")


def render_table(metrics: TrainRunMetrics) -> str:
    def fmt(v, spec):
        return "-" if v is None else format(v, spec)

    rows = [f"{'iter':>5} {'phase':>5} {'stage':>5} {'timeout':>7} {'Q':>8} {'turns':>8} {'entropy':>8} {'loss':>10}"]
    for r in metrics.records:
        rows.append(
            f"{r.iteration:>5} {r.phase:>5} {r.stage:>5} {fmt(r.timeout, '7.2f'):>7} {fmt(r.q_mean, '8.4f'):>8} "
            f"{fmt(r.turns_mean, '8.2f'):>8} {r.entropy:8.4f} {fmt(r.loss, '10.3e'):>10}"
        )
    return "\n".join(rows) + "\n"


def cmd_report(args) -> int:
    metrics = TrainRunMetrics.loads(Path(args.metrics).read_text(encoding="utf-8"))
    table = render_table(metrics)
    print(table, end="")
    if args.out:
        out = _out_dir(args)
        (out / "table.txt").write_text(table, encoding="utf-8")
        for phase in ("sft", "rl"):
            rows = metrics.phase(phase)
            for name in _SERIES:
                pts = [(r.iteration, getattr(r, name)) for r in rows if getattr(r, name) is not None]
                if pts:
                    text = "".join(f"{x} {y!r}\n" for x, y in pts)
                    (out / f"{phase}_{name}.dat").write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="horizon-rl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a trajectory file into prefix-pinned windows")
    p.add_argument("trajectory", help="hfv1 trajectory file")
    p.add_argument("--config", required=True, help="experiment config (JSON) with a 'split' section")
    p.add_argument("--out", default=None, help="output directory (overrides the config's 'out')")
    p.add_argument("--dedup-overlap", choices=("on", "off"), default=None, help="override overlap loss dedup")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="split-SFT cold start followed by staged RL")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config's 'seed'")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="simulate the rollout/judge pipeline")
    p.add_argument("--config", required=True, help="cluster spec (JSON)")
    p.add_argument("--strategy", choices=("synchronous", "partial"), default="synchronous")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="evaluate a saved policy table")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True, help="params.npy written by train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--n-eval", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render an mxv1 metrics file as a table and x/y series")
    p.add_argument("metrics")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HorizonError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
