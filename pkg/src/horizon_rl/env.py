"""Subtask-chain environment and tabular softmax policy.

The task is a chain of ``n_subtasks`` subtasks, each needing
``actions_per_subtask`` correct actions in order. The policy observes
``(subtask, position)`` and picks one of ``vocab_size`` actions; a correct
action advances the position, a wrong one only burns time. Every action has
a wall-clock cost and the episode is cut off once the next action would
overrun the timeout.

Sampling is driven by a counter-based stream: the uniform used for the k-th
assistant turn depends only on ``(seed, k)``, so a truncated rollout can be
resumed later and land on exactly the trajectory a longer single rollout
would have produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, IndexOutOfRange, InvalidConfig
from .rubric import RubricNode, chain_rubric, load_rubric, rubric_from_dict, rubric_to_dict, score_rubric
from .trajectory import PREFIX, REGULAR, Step, Trajectory

TASK_FORMAT = "tkv1"


@dataclass(frozen=True)
class ChainTask:
    n_subtasks: int
    actions_per_subtask: int
    vocab_size: int
    correct_action: tuple[tuple[int, ...], ...]
    action_time_cost: tuple[float, ...]
    prefix_steps: int = 2
    time_budget: float = 6.0
    rubric: RubricNode | None = None
    name: str = "chain"
    prefix_obs_tokens: int = 8
    obs_tokens: int = 2
    act_tokens: int = 1

    def __post_init__(self):
        object.__setattr__(self, "correct_action", tuple(tuple(int(a) for a in row) for row in self.correct_action))
        object.__setattr__(self, "action_time_cost", tuple(float(c) for c in self.action_time_cost))
        if self.rubric is None:
            object.__setattr__(self, "rubric", chain_rubric(self.n_subtasks))
        problems = self.problems()
        if problems:
            raise InvalidConfig("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.n_subtasks < 1 or self.actions_per_subtask < 1:
            out.append("n_subtasks and actions_per_subtask must be >= 1")
        if self.vocab_size < 2:
            out.append("vocab_size must be >= 2")
        if len(self.correct_action) != self.n_subtasks or any(
            len(row) != self.actions_per_subtask for row in self.correct_action
        ):
            out.append("correct_action must be n_subtasks x actions_per_subtask")
        elif any(not 0 <= a < self.vocab_size for row in self.correct_action for a in row):
            out.append("correct actions must be < vocab_size")
        if len(self.action_time_cost) != self.vocab_size or any(c <= 0 for c in self.action_time_cost):
            out.append("action_time_cost needs one positive cost per action")
        if self.prefix_steps < 0 or self.time_budget <= 0:
            out.append("prefix_steps must be >= 0 and time_budget > 0")
        if len(self.rubric.leaves()) != self.n_subtasks:
            out.append("rubric must have one leaf per subtask")
        return out

    @property
    def n_states(self) -> int:
        return self.n_subtasks * self.actions_per_subtask

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_subtasks, self.actions_per_subtask, self.vocab_size)

    @property
    def min_cost(self) -> float:
        return min(self.action_time_cost)


@dataclass(frozen=True)
class EnvSnapshot:
    subtasks_completed: int = 0
    position: int = 0

    @property
    def id(self) -> str:
        return f"c{self.subtasks_completed}p{self.position}"

    @classmethod
    def parse(cls, snapshot_id: str) -> "EnvSnapshot":
        try:
            done, pos = snapshot_id[1:].split("p")
            return cls(int(done), int(pos))
        except ValueError as exc:
            raise FormatError(f"bad snapshot id {snapshot_id!r}") from exc


@dataclass
class PolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 3:
            raise InvalidConfig("logits must be indexed by (subtask, position, action)")

    @classmethod
    def zeros(cls, task: ChainTask) -> "PolicyParams":
        return cls(np.zeros(task.shape))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())


@dataclass(frozen=True)
class ReferenceSnapshot:
    logits: np.ndarray = field(repr=False)

    def __post_init__(self):
        frozen = np.array(self.logits, dtype=np.float64)
        frozen.setflags(write=False)
        object.__setattr__(self, "logits", frozen)


def snapshot(params: PolicyParams) -> ReferenceSnapshot:
    return ReferenceSnapshot(params.logits.copy())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_index(logits: np.ndarray, state: tuple[int, int], action: int | None = None) -> None:
    d, p = state
    D, A, V = logits.shape
    if not (0 <= d < D and 0 <= p < A) or (action is not None and not 0 <= action < V):
        raise IndexOutOfRange(f"state {state} / action {action} outside table of shape {logits.shape}")


def policy_logprob(params: PolicyParams | ReferenceSnapshot, state: tuple[int, int], action: int) -> float:
    _check_index(params.logits, state, action)
    return float(log_softmax(params.logits[state[0], state[1]])[action])


def policy_entropy(params: PolicyParams | ReferenceSnapshot) -> float:
    """Mean Shannon entropy (nats) over every state of the table."""
    logp = log_softmax(params.logits)
    ent = -(np.exp(logp) * logp).sum(axis=-1)
    return float(ent.mean())


# -- sampling ------------------------------------------------------------------

_CHUNK = 256
_MASK64 = (1 << 64) - 1


class CounterStream:
    """Uniforms indexed by ``(seed, k)``; each block of 256 is an independent Philox key."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._chunks: dict[int, np.ndarray] = {}

    def __getitem__(self, k: int) -> float:
        c, off = divmod(k, _CHUNK)
        block = self._chunks.get(c)
        if block is None:
            key = (c << 64) | self.seed
            block = np.random.Generator(np.random.Philox(key=key)).random(_CHUNK)
            self._chunks[c] = block
        return float(block[off])


class _ActionTable:
    """Per-state CDFs and argmaxes, computed once per parameter table."""

    def __init__(self, logits: np.ndarray):
        probs = softmax(logits)
        self.cdf = np.cumsum(probs, axis=-1).tolist()
        self.greedy = np.argmax(logits, axis=-1).tolist()

    def sample(self, d: int, p: int, u: float) -> int:
        cdf = self.cdf[d][p]
        for a, c in enumerate(cdf):
            if u < c:
                return a
        return len(cdf) - 1


def rollout_with_timeout(
    task: ChainTask,
    params: PolicyParams | ReferenceSnapshot,
    timeout: float,
    seed: int,
    resume_from: Trajectory | None = None,
    greedy: bool = False,
    traj_id: str | None = None,
    _table: _ActionTable | None = None,
) -> Trajectory:
    """Run one episode until the chain is done or the next action would exceed ``timeout``.

    ``timeout`` caps the cumulative time of the whole logical rollout; to
    resume a truncated rollout with ``extra`` more units, pass the earlier
    timeout plus ``extra``.
    """
    if tuple(params.logits.shape) != task.shape:
        raise InvalidConfig(f"params shape {params.logits.shape} != task shape {task.shape}")
    table = _table or _ActionTable(params.logits)
    costs = task.action_time_cost
    D, A = task.n_subtasks, task.actions_per_subtask

    if resume_from is None:
        steps = [Step(PREFIX, task.prefix_obs_tokens, task.act_tokens, 0.0) for _ in range(task.prefix_steps)]
        done, pos, elapsed, k = 0, 0, 0.0, 0
    else:
        if resume_from.env_seed != seed:
            raise InvalidConfig("resume_from was produced with a different seed")
        steps = list(resume_from.steps)
        snap = EnvSnapshot.parse(resume_from.terminal_snapshot_id)
        done, pos = snap.subtasks_completed, snap.position
        elapsed, k = 0.0, 0
        for s in steps:
            elapsed += s.time_cost
            k += s.kind == REGULAR

    stream = CounterStream(seed)
    while done < D:
        if greedy:
            a = table.greedy[done][pos]
        else:
            a = table.sample(done, pos, stream[k])
        cost = costs[a]
        if elapsed + cost > timeout:
            break
        elapsed += cost
        steps.append(Step(REGULAR, task.obs_tokens, task.act_tokens, cost, (done, pos), a))
        k += 1
        if a == task.correct_action[done][pos]:
            pos += 1
            if pos == A:
                done, pos = done + 1, 0

    return Trajectory(
        tuple(steps),
        env_seed=seed,
        terminal_snapshot_id=EnvSnapshot(done, pos).id,
        traj_id=traj_id if traj_id is not None else f"rollout-{seed}",
    )


def judge(task: ChainTask, traj: Trajectory) -> float:
    """Rubric score of the trajectory's terminal snapshot."""
    return float(score_rubric(task.rubric, EnvSnapshot.parse(traj.terminal_snapshot_id)).score)


def expert_params(task: ChainTask, margin: float = 50.0) -> PolicyParams:
    """Table that puts (almost) all mass on the correct action at every state."""
    logits = np.zeros(task.shape)
    for d in range(task.n_subtasks):
        for p in range(task.actions_per_subtask):
            logits[d, p, task.correct_action[d][p]] = margin
    return PolicyParams(logits)


def expert_demonstrations(task: ChainTask, n_demos: int = 1, timeout: float | None = None) -> list[Trajectory]:
    """Scripted-expert trajectories: greedy correct actions under ``timeout``."""
    budget = task.time_budget if timeout is None else timeout
    expert = expert_params(task)
    return [
        rollout_with_timeout(task, expert, budget, seed=i, greedy=True, traj_id=f"demo-{i}")
        for i in range(n_demos)
    ]


def make_chain_task(
    n_subtasks: int,
    actions_per_subtask: int,
    vocab_size: int,
    action_time_cost: Sequence[float],
    seed: int = 0,
    correct_choices: Sequence[int] | None = None,
    **kwargs,
) -> ChainTask:
    """Build a task whose correct actions are drawn with ``seed``.

    ``correct_choices`` restricts which action ids may be correct; by default
    any id can be.
    """
    rng = np.random.default_rng(seed)
    choices = np.arange(vocab_size) if correct_choices is None else np.asarray(correct_choices)
    correct = rng.choice(choices, size=(n_subtasks, actions_per_subtask))
    return ChainTask(n_subtasks, actions_per_subtask, vocab_size, correct.tolist(), tuple(action_time_cost), **kwargs)


def reference_task() -> ChainTask:
    """Eight-subtask chain whose correct actions are the cheap ones.

    With the default 6-unit budget an all-correct run needs 16 cheap steps
    (4 units), while a uniform policy runs out of time well before the end.
    """
    return make_chain_task(8, 2, 4, (0.25, 0.25, 0.5, 0.5), seed=0, correct_choices=(0, 1), name="reference-chain")


# -- tkv1 ----------------------------------------------------------------------


def task_to_dict(task: ChainTask) -> dict:
    return {
        "format": TASK_FORMAT,
        "name": task.name,
        "n_subtasks": task.n_subtasks,
        "actions_per_subtask": task.actions_per_subtask,
        "vocab_size": task.vocab_size,
        "correct_action": [list(r) for r in task.correct_action],
        "action_time_cost": list(task.action_time_cost),
        "prefix_steps": task.prefix_steps,
        "time_budget": task.time_budget,
        "prefix_obs_tokens": task.prefix_obs_tokens,
        "obs_tokens": task.obs_tokens,
        "act_tokens": task.act_tokens,
        "rubric": rubric_to_dict(task.rubric),
    }


def task_from_dict(data: dict, base_dir: Path | None = None) -> ChainTask:
    if data.get("format") != TASK_FORMAT:
        raise FormatError(f"expected format {TASK_FORMAT!r}")
    rubric = data.get("rubric")
    if isinstance(rubric, str):
        path = Path(rubric)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        rubric = load_rubric(path)
    elif isinstance(rubric, dict):
        rubric = rubric_from_dict(rubric)
    try:
        return ChainTask(
            n_subtasks=int(data["n_subtasks"]),
            actions_per_subtask=int(data["actions_per_subtask"]),
            vocab_size=int(data["vocab_size"]),
            correct_action=data["correct_action"],
            action_time_cost=data["action_time_cost"],
            prefix_steps=int(data.get("prefix_steps", 0)),
            time_budget=float(data["time_budget"]),
            rubric=rubric,
            name=str(data.get("name", "chain")),
            prefix_obs_tokens=int(data.get("prefix_obs_tokens", 8)),
            obs_tokens=int(data.get("obs_tokens", 2)),
            act_tokens=int(data.get("act_tokens", 1)),
        )
    except KeyError as exc:
        raise FormatError(f"task file missing field {exc}") from exc


def dump_task(task: ChainTask) -> str:
    return json.dumps(task_to_dict(task), indent=2) + "\n"


def load_task(path: str | Path) -> ChainTask:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return task_from_dict(data, path.parent)

