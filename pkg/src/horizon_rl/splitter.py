"""Overlapping, prefix-pinned windows over long trajectories.

Windows are planned in steps over the regular part of a trajectory. Each
materialized window gets the trajectory's prefix steps prepended verbatim and
is then cut from the front until prefix plus window fits the token budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyWindow, InvalidConfig, PrefixTooLarge
from .trajectory import Step, Trajectory, token_length


@dataclass(frozen=True)
class SplitConfig:
    max_context_tokens: int
    window_steps: int
    overlap_steps: int = 0
    # Off reproduces the plain per-window loss, which counts overlap tokens once per window.
    dedup_loss_on_overlap: bool = False

    def __post_init__(self):
        if self.max_context_tokens <= 0:
            raise InvalidConfig("max_context_tokens must be > 0")
        if self.window_steps <= 0:
            raise InvalidConfig("window_steps must be > 0")
        if self.overlap_steps < 0:
            raise InvalidConfig("overlap_steps must be >= 0")
        if self.overlap_steps >= self.window_steps:
            raise InvalidConfig(
                f"overlap_steps ({self.overlap_steps}) must be < window_steps ({self.window_steps})"
            )


@dataclass(frozen=True)
class SubTrajectory:
    parent_id: str
    start_step: int
    end_step: int
    pinned_prefix: tuple[Step, ...]
    steps: tuple[Step, ...]
    step_indices: tuple[int, ...]
    # One flag per kept step; a step's action tokens share its flag.
    supervised: tuple[bool, ...]

    @property
    def first_kept(self) -> int:
        return self.step_indices[0]

    @property
    def truncated_indices(self) -> tuple[int, ...]:
        return tuple(range(self.start_step, self.first_kept))

    @property
    def loss_mask(self) -> tuple[bool, ...]:
        out: list[bool] = []
        for step, flag in zip(self.steps, self.supervised):
            out.extend([flag] * step.act_tokens)
        return tuple(out)

    @property
    def token_length(self) -> int:
        return token_length(self.pinned_prefix) + token_length(self.steps)

    def supervised_steps(self) -> Iterable[tuple[int, Step]]:
        for idx, step, flag in zip(self.step_indices, self.steps, self.supervised):
            if flag:
                yield idx, step

    @property
    def n_loss_tokens(self) -> int:
        return sum(s.act_tokens for _, s in self.supervised_steps())


def window_count(n_steps: int, window_steps: int, overlap_steps: int) -> int:
    if n_steps <= 0:
        return 0
    if n_steps <= window_steps:
        return 1
    return math.ceil((n_steps - window_steps) / (window_steps - overlap_steps)) + 1


def plan_splits(n_regular_steps: int, config: SplitConfig) -> list[tuple[int, int]]:
    """Plan 1-based inclusive windows over ``n_regular_steps`` steps.

    Windows advance by ``window_steps - overlap_steps``; the final window is
    end-aligned, so it may overlap its predecessor by more than requested.
    An empty trajectory yields no windows.
    """
    if n_regular_steps < 0:
        raise InvalidConfig("n_regular_steps must be >= 0")
    n, size = n_regular_steps, config.window_steps
    if n == 0:
        return []
    if n <= size:
        return [(1, n)]
    stride = size - config.overlap_steps
    k = window_count(n, size, config.overlap_steps)
    starts = [1 + i * stride for i in range(k - 1)] + [n - size + 1]
    return [(s, s + size - 1) for s in starts]


def materialize_subtrajectory(
    traj: Trajectory,
    window: tuple[int, int],
    config: SplitConfig,
    earlier_supervised: Iterable[int] = (),
) -> SubTrajectory:
    prefix = traj.prefix_steps
    budget = config.max_context_tokens - token_length(prefix)
    if budget <= 0:
        raise PrefixTooLarge(
            f"prefix uses {token_length(prefix)} tokens, budget is {config.max_context_tokens}"
        )
    regular = traj.regular_steps
    start, end = window
    if start < 1 or end > len(regular) or start > end:
        raise EmptyWindow(f"window {window} is empty for {len(regular)} regular steps")

    first = start
    used = token_length(regular[start - 1 : end])
    while used > budget:
        if first == end:
            raise EmptyWindow(f"step {end} alone does not fit next to the prefix")
        used -= regular[first - 1].tokens
        first += 1

    indices = tuple(range(first, end + 1))
    if config.dedup_loss_on_overlap:
        done = set(earlier_supervised)
        supervised = tuple(i not in done for i in indices)
    else:
        supervised = (True,) * len(indices)
    return SubTrajectory(
        parent_id=traj.traj_id,
        start_step=start,
        end_step=end,
        pinned_prefix=prefix,
        steps=regular[first - 1 : end],
        step_indices=indices,
        supervised=supervised,
    )


def split_trajectory(traj: Trajectory, config: SplitConfig) -> list[SubTrajectory]:
    """Plan and materialize every window of ``traj`` in order."""
    subs = []
    seen: set[int] = set()
    for window in plan_splits(len(traj.regular_steps), config):
        sub = materialize_subtrajectory(traj, window, config, seen)
        seen.update(sub.step_indices)
        subs.append(sub)
    return subs


@dataclass
class CoverageReport:
    # (step index, token offset) -> number of windows that supervise the token
    multiplicity: dict[tuple[int, int], int]
    uncovered: list[tuple[int, int]]
    truncated: list[tuple[int, int]]
    duplicated: list[tuple[int, int]]

    def step_multiplicity(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for (step, _), m in self.multiplicity.items():
            out[step] = m
        return out


def coverage_report(traj: Trajectory, subs: Sequence[SubTrajectory], dedup: bool = False) -> CoverageReport:
    """Count how often each regular action token is supervised across ``subs``.

    ``truncated`` lists tokens that some window planned for but dropped to fit
    the budget; ``duplicated`` is only filled when ``dedup`` is set.
    """
    regular = traj.regular_steps
    mult = {(i, t): 0 for i, s in enumerate(regular, start=1) for t in range(s.act_tokens)}
    truncated: set[tuple[int, int]] = set()
    for sub in subs:
        for idx, step in sub.supervised_steps():
            for t in range(step.act_tokens):
                mult[(idx, t)] += 1
        for idx in sub.truncated_indices:
            truncated.update((idx, t) for t in range(regular[idx - 1].act_tokens))
    uncovered = [k for k, m in mult.items() if m == 0]
    duplicated = [k for k, m in mult.items() if m > 1] if dedup else []
    return CoverageReport(mult, uncovered, sorted(truncated), duplicated)


def plan_records(subs: Sequence[SubTrajectory]) -> list[dict]:
    return [
        {
            "parent_id": s.parent_id,
            "start": s.start_step,
            "end": s.end_step,
            "first_kept": s.first_kept,
            "kept_after_truncation": len(s.steps),
        }
        for s in subs
    ]


def write_plan(path: str | Path, subs: Sequence[SubTrajectory]) -> None:
    lines = [json.dumps(r) for r in plan_records(subs)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
