"""Agent trajectories: steps, validation, token accounting and the hfv1 file format.

A trajectory is a list of steps. Leading ``prefix`` steps hold the task
statement and reading material; every step after them is a ``regular`` step,
i.e. one assistant turn. Regular steps are numbered from 1 when windows are
planned over them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import FormatError

PREFIX = "prefix"
REGULAR = "regular"
KINDS = (PREFIX, REGULAR)

TRAJECTORY_FORMAT = "hfv1"


@dataclass(frozen=True)
class Step:
    kind: str
    obs_tokens: int
    act_tokens: int
    time_cost: float = 0.0
    # Policy decision behind the action, when the step came from the toy env.
    state: tuple[int, int] | None = None
    action: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "time_cost", float(self.time_cost))
        if self.state is not None:
            object.__setattr__(self, "state", (int(self.state[0]), int(self.state[1])))

    @property
    def tokens(self) -> int:
        return self.obs_tokens + self.act_tokens


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...] = ()
    env_seed: int = 0
    terminal_snapshot_id: str = ""
    traj_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def prefix_steps(self) -> tuple[Step, ...]:
        return tuple(s for s in self.steps if s.kind == PREFIX)

    @property
    def regular_steps(self) -> tuple[Step, ...]:
        return tuple(s for s in self.steps if s.kind == REGULAR)

    @property
    def elapsed(self) -> float:
        return math.fsum(s.time_cost for s in self.steps)


@dataclass(frozen=True)
class SftExample:
    """One (context, target) pair of a plain, unsplit SFT dataset."""

    context_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "context_tokens", tuple(self.context_tokens))
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        if not self.target_tokens:
            raise ValueError("target_tokens must be nonempty")


def validate_trajectory(traj: Trajectory) -> list[str]:
    """Return every invariant violation found in ``traj``; empty means well-formed."""
    problems: list[str] = []
    seen_regular = False
    cumulative = 0.0
    for k, step in enumerate(traj.steps):
        if step.kind not in KINDS:
            problems.append(f"step {k}: unknown kind {step.kind!r}")
        if step.obs_tokens < 0 or step.act_tokens < 0:
            problems.append(f"step {k}: negative token count")
        if not math.isfinite(step.time_cost) or step.time_cost < 0:
            problems.append(f"step {k}: time_cost must be finite and >= 0")
        else:
            nxt = cumulative + step.time_cost
            if nxt < cumulative:
                problems.append(f"step {k}: cumulative time decreases")
            cumulative = nxt
        if step.kind == REGULAR:
            seen_regular = True
        elif step.kind == PREFIX and seen_regular:
            problems.append(f"step {k}: prefix after regular")
    return problems


def token_length(item: Trajectory | Step | Iterable[Step]) -> int:
    """Total observation plus action tokens."""
    if isinstance(item, Step):
        return item.tokens
    steps = item.steps if isinstance(item, Trajectory) else item
    return sum(s.tokens for s in steps)


def assistant_turns(traj: Trajectory) -> int:
    return sum(1 for s in traj.steps if s.kind == REGULAR)


def append(traj: Trajectory, step: Step) -> Trajectory:
    return Trajectory(traj.steps + (step,), traj.env_seed, traj.terminal_snapshot_id, traj.traj_id)


# -- hfv1 -------------------------------------------------------------------
# Header line: {"format": "hfv1", "env_seed": ..., "terminal_snapshot_id": ..., "traj_id": ...}
# Step lines: [kind, obs_tokens, act_tokens, time_cost, subtask, position, action]
# The trailing three fields are null for steps without a policy decision.


def encode_trajectory(traj: Trajectory) -> str:
    header = {
        "format": TRAJECTORY_FORMAT,
        "env_seed": traj.env_seed,
        "terminal_snapshot_id": traj.terminal_snapshot_id,
        "traj_id": traj.traj_id,
    }
    lines = [json.dumps(header)]
    for s in traj.steps:
        sub, pos = s.state if s.state is not None else (None, None)
        lines.append(json.dumps([s.kind, s.obs_tokens, s.act_tokens, s.time_cost, sub, pos, s.action]))
    return "\n".join(lines) + "\n"


def decode_trajectory(text: str) -> Trajectory:
    # Records are "\n"-separated; str.splitlines would also split on U+2028 etc.
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise FormatError("empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != TRAJECTORY_FORMAT:
        raise FormatError(f"expected format {TRAJECTORY_FORMAT!r}")
    steps = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            kind, obs, act, cost, sub, pos, action = rec
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise FormatError(f"line {n}: malformed step record") from exc
        if kind not in KINDS:
            raise FormatError(f"line {n}: unknown kind {kind!r}")
        state = None if sub is None else (int(sub), int(pos))
        steps.append(Step(kind, int(obs), int(act), float(cost), state, None if action is None else int(action)))
    return Trajectory(
        tuple(steps),
        int(header.get("env_seed", 0)),
        str(header.get("terminal_snapshot_id", "")),
        str(header.get("traj_id", "")),
    )


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    Path(path).write_text(encode_trajectory(traj), encoding="utf-8")


def read_trajectory(path: str | Path) -> Trajectory:
    return decode_trajectory(Path(path).read_text(encoding="utf-8"))
