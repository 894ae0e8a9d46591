"""Split-SFT warm start followed by staged RL with growing timeouts.

One RL iteration: freeze a reference copy of the current table, roll out
``group_size`` episodes under the stage timeout, split each rollout into
windows, score every rollout once from its final snapshot (all of its
windows share that reward), and take gradient steps on the clipped loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import (
    ChainTask,
    PolicyParams,
    ReferenceSnapshot,
    _ActionTable,
    judge,
    policy_entropy,
    rollout_with_timeout,
    snapshot,
)
from .errors import (
    EmptyBatch,
    EmptyEvaluation,
    FormatError,
    LengthMismatch,
    NonIncreasingTimeouts,
    NonPositiveEntries,
)
from .losses import GroupBatch, RlHyperparams, clipped_rl_loss, loss_gradient, sft_gradient, sft_loss
from .splitter import SplitConfig, SubTrajectory, split_trajectory
from .trajectory import Trajectory, assistant_turns

log = logging.getLogger(__name__)

METRICS_FORMAT = "mxv1"


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for ``(seed, *keys)``; keys are nonnegative ints."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class StageSchedule:
    timeouts: tuple[float, ...]
    iterations_per_stage: tuple[int, ...]
    group_size: int

    @property
    def n_stages(self) -> int:
        return len(self.timeouts)

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations_per_stage)


def build_schedule(timeouts: Sequence[float], iters: Sequence[int] | int, n: int) -> StageSchedule:
    timeouts = tuple(float(t) for t in timeouts)
    if isinstance(iters, int):
        iters = [iters] * len(timeouts)
    iters = tuple(int(i) for i in iters)
    if len(iters) != len(timeouts):
        raise LengthMismatch(f"{len(timeouts)} timeouts but {len(iters)} iteration counts")
    if any(t <= 0 for t in timeouts) or any(i <= 0 for i in iters) or n <= 0:
        raise NonPositiveEntries("timeouts, iteration counts and group size must be positive")
    for a, b in zip(timeouts, timeouts[1:]):
        if not a < b:
            raise NonIncreasingTimeouts(f"timeouts must strictly increase, got {a} then {b}")
    return StageSchedule(timeouts, iters, int(n))


@dataclass
class TrainConfig:
    sft_steps: int = 200
    sft_lr: float = 0.1
    rl_lr: float = 0.1
    rl_updates_per_iteration: int = 1
    n_eval: int = 16
    eval_timeout: float | None = None  # defaults to the task's time budget
    eval_greedy: bool = False
    sft_eval_every: int = 50
    init_scale: float = 0.0


@dataclass
class MetricRecord:
    iteration: int
    phase: str  # "sft" | "rl"
    stage: int
    timeout: float | None
    q_mean: float | None
    turns_mean: float | None
    entropy: float
    loss: float | None
    batch_seed: int | None = None
    train_q_mean: float | None = None
    train_turns_mean: float | None = None


@dataclass
class TrainRunMetrics:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, rec: MetricRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must strictly increase")
        self.records.append(rec)

    def phase(self, name: str) -> list[MetricRecord]:
        return [r for r in self.records if r.phase == name]

    def stage_end(self, stage: int) -> MetricRecord | None:
        rows = [r for r in self.records if r.phase == "rl" and r.stage == stage]
        return rows[-1] if rows else None

    def dumps(self) -> str:
        lines = [json.dumps({"format": METRICS_FORMAT})]
        lines += [json.dumps(asdict(r)) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainRunMetrics":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines or json.loads(lines[0]).get("format") != METRICS_FORMAT:
            raise FormatError(f"expected format {METRICS_FORMAT!r}")
        out = cls()
        for ln in lines[1:]:
            out.append(MetricRecord(**json.loads(ln)))
        return out


@dataclass
class EvalResult:
    q_mean: float
    turns_mean: float
    entropy: float


def evaluate(
    params: PolicyParams | ReferenceSnapshot,
    task: ChainTask,
    timeout: float,
    n_eval: int,
    seed: int,
    greedy: bool = False,
) -> EvalResult:
    """Average rubric score and assistant turns over ``n_eval`` seeded rollouts."""
    if n_eval <= 0:
        raise EmptyEvaluation("n_eval must be >= 1")
    table = _ActionTable(params.logits)
    qs, turns = [], []
    for j in range(n_eval):
        traj = rollout_with_timeout(task, params, timeout, derive_seed(seed, j), greedy=greedy, _table=table)
        qs.append(judge(task, traj))
        turns.append(assistant_turns(traj))
    return EvalResult(math.fsum(qs) / n_eval, sum(turns) / n_eval, policy_entropy(params))


def collect_batch(
    task: ChainTask,
    params: PolicyParams | ReferenceSnapshot,
    timeout: float,
    group_size: int,
    batch_seed: int,
    split_config: SplitConfig,
    stage_index: int = 0,
) -> tuple[GroupBatch, list[Trajectory]]:
    """Roll out a group, split every rollout and attach rollout-final rewards."""
    table = _ActionTable(params.logits)
    trajs, rollouts, rewards = [], [], {}
    for j in range(group_size):
        traj = rollout_with_timeout(
            task, params, timeout, derive_seed(batch_seed, j), traj_id=f"b{batch_seed}-{j}", _table=table
        )
        q = judge(task, traj)
        subs = split_trajectory(traj, split_config)
        for i in range(len(subs)):
            rewards[(j, i)] = q
        trajs.append(traj)
        rollouts.append(subs)
    return GroupBatch(rollouts, rewards, stage_index), trajs


def _sft_windows(sft_data: Sequence[Trajectory], split_config: SplitConfig) -> list[SubTrajectory]:
    return [sub for traj in sft_data for sub in split_trajectory(traj, split_config)]


def initial_params(task: ChainTask, seed: int, init_scale: float = 0.0) -> PolicyParams:
    params = PolicyParams.zeros(task)
    if init_scale:
        rng = np.random.default_rng(derive_seed(seed, 0))
        params.logits += init_scale * rng.standard_normal(task.shape)
    return params


def run_training(
    task: ChainTask,
    sft_data: Sequence[Trajectory],
    schedule: StageSchedule | None,
    split_config: SplitConfig,
    hp: RlHyperparams,
    seed: int,
    config: TrainConfig | None = None,
    init: PolicyParams | None = None,
    callback: Callable[..., None] | None = None,
) -> tuple[PolicyParams, TrainRunMetrics]:
    """Cold-start on ``sft_data`` then run every RL stage of ``schedule``.

    ``callback(record, params_before, ref, batch)`` is invoked after every RL
    iteration with the table as it was when the batch was collected.
    """
    cfg = config or TrainConfig()
    params = init.copy() if init is not None else initial_params(task, seed, cfg.init_scale)
    metrics = TrainRunMetrics()
    eval_seed = derive_seed(seed, 1)
    eval_timeout = task.time_budget if cfg.eval_timeout is None else cfg.eval_timeout
    iteration = 0

    def run_eval():
        return evaluate(params, task, eval_timeout, cfg.n_eval, eval_seed, cfg.eval_greedy)

    if cfg.sft_steps and sft_data:
        subs = _sft_windows(sft_data, split_config)
        for step in range(cfg.sft_steps):
            loss = sft_loss(params, subs)
            params.logits -= cfg.sft_lr * sft_gradient(params, subs)
            iteration += 1
            last = step == cfg.sft_steps - 1
            if last or (cfg.sft_eval_every and iteration % cfg.sft_eval_every == 0):
                ev = run_eval()
                q, turns = ev.q_mean, ev.turns_mean
            else:
                q = turns = None
            metrics.append(
                MetricRecord(iteration, "sft", 0, None, q, turns, policy_entropy(params), loss)
            )

    if schedule is None:
        return params, metrics

    for m, (timeout, n_iters) in enumerate(zip(schedule.timeouts, schedule.iterations_per_stage), start=1):
        for it in range(n_iters):
            ref = snapshot(params)
            batch_seed = derive_seed(seed, 2, m, it)
            batch, trajs = collect_batch(task, ref, timeout, schedule.group_size, batch_seed, split_config, m)
            try:
                loss = clipped_rl_loss(ref, ref, batch, hp)
            except EmptyBatch:
                log.warning("stage %d iteration %d: empty batch, ending stage", m, it)
                break
            before = params.copy()
            # A single-window group has zero advantage everywhere; nothing to learn.
            if batch.n_windows > 1:
                for _ in range(cfg.rl_updates_per_iteration):
                    params.logits -= cfg.rl_lr * loss_gradient(params, ref, batch, hp)
            iteration += 1
            ev = run_eval()
            rec = MetricRecord(
                iteration,
                "rl",
                m,
                timeout,
                ev.q_mean,
                ev.turns_mean,
                ev.entropy,
                loss,
                batch_seed,
                math.fsum(judge(task, t) for t in trajs) / len(trajs),
                sum(assistant_turns(t) for t in trajs) / len(trajs),
            )
            metrics.append(rec)
            if callback is not None:
                callback(rec, before, ref, batch)
    return params, metrics


def continue_rollouts(
    task: ChainTask,
    partials: Sequence[Trajectory],
    timeout: float,
    old_params: PolicyParams | ReferenceSnapshot,
    new_params: PolicyParams | ReferenceSnapshot,
    mode: str = "old",
) -> list[Trajectory]:
    """Resume carried-over rollouts under the old or the freshly updated table.

    Both modes are offered; neither is the default elsewhere in the package.
    """
    if mode not in ("old", "new"):
        raise ValueError("mode must be 'old' or 'new'")
    params = old_params if mode == "old" else new_params
    return [
        rollout_with_timeout(task, params, timeout, t.env_seed, resume_from=t, traj_id=t.traj_id) for t in partials
    ]


def save_params(path: str | Path, params: PolicyParams) -> None:
    with open(path, "wb") as fh:
        np.save(fh, params.logits, allow_pickle=False)


def load_params(path: str | Path) -> PolicyParams:
    return PolicyParams(np.load(path, allow_pickle=False))
