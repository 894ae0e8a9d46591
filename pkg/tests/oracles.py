"""Independent reference computations used by the tests.

Nothing here imports package internals beyond plain data types, so a bug in
the implementation cannot leak into its own oracle.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from horizon_rl.trajectory import PREFIX, REGULAR, Step, Trajectory


# -- windows -------------------------------------------------------------------


def enumerate_windows(n: int, size: int, overlap: int) -> list[tuple[int, int]]:
    """Walk windows one stride at a time; the last one is pushed flush to the end."""
    if n == 0:
        return []
    if n <= size:
        return [(1, n)]
    out = []
    start = 1
    while start + size - 1 < n:
        out.append((start, start + size - 1))
        start += size - overlap
    out.append((n - size + 1, n))
    return out


def min_windows_bruteforce(n: int, size: int, overlap: int) -> int:
    """Fewest length-``size`` windows starting at 1 and ending at n with consecutive overlap >= ``overlap``.

    Searches over start sequences directly (BFS over the last start).
    """
    if n <= size:
        return 1
    last = n - size + 1
    frontier, seen, k = {1}, {1}, 1
    while frontier:
        if last in frontier:
            return k
        nxt = set()
        for s in frontier:
            # next start t must leave >= overlap shared steps: t <= s + size - overlap
            for t in range(s + 1, min(s + size - overlap, last) + 1):
                if t not in seen:
                    seen.add(t)
                    nxt.add(t)
        frontier, k = nxt, k + 1
    raise AssertionError("unreachable")


def kept_range(step_tokens: list[int], prefix_tokens: int, window: tuple[int, int], budget: int) -> tuple[int, int]:
    """Greedily drop the front of ``window`` until prefix plus window fits ``budget``."""
    start, end = window
    for first in range(start, end + 1):
        if prefix_tokens + sum(step_tokens[first - 1 : end]) <= budget:
            return first, end
    raise ValueError("no step fits")


# -- policies ------------------------------------------------------------------


def probs(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_exact(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    p, q = probs(p_logits), probs(q_logits)
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def entropy_exact(logits: np.ndarray) -> float:
    return float(-sum(pi * math.log(pi) for pi in probs(logits) if pi > 0))


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def completion_probability_uniform(vocab: int, attempts: int) -> float:
    """P(the single correct action appears within ``attempts`` uniform draws), by enumeration."""
    hits = sum(1 for seq in product(range(vocab), repeat=attempts) if 0 in seq)
    return hits / vocab**attempts


def greedy_replay(task) -> tuple[int, float, int]:
    """Replay the all-correct action sequence: (subtasks done, time used, turns) under the task budget."""
    elapsed, done, turns = 0.0, 0, 0
    for d in range(task.n_subtasks):
        for p in range(task.actions_per_subtask):
            cost = task.action_time_cost[task.correct_action[d][p]]
            if elapsed + cost > task.time_budget:
                return done, elapsed, turns
            elapsed += cost
            turns += 1
        done += 1
    return done, elapsed, turns


# -- fixtures ------------------------------------------------------------------


def random_trajectory(rng: np.random.Generator, n_regular: int, shape=None, n_prefix=None, max_tokens=4) -> Trajectory:
    n_prefix = int(rng.integers(0, 3)) if n_prefix is None else n_prefix
    steps = [Step(PREFIX, int(rng.integers(0, 6)), int(rng.integers(0, 2)), 0.0) for _ in range(n_prefix)]
    for _ in range(n_regular):
        state = action = None
        if shape is not None:
            D, A, V = shape
            state = (int(rng.integers(D)), int(rng.integers(A)))
            action = int(rng.integers(V))
        steps.append(
            Step(
                REGULAR,
                int(rng.integers(0, max_tokens + 1)),
                int(rng.integers(1, max_tokens + 1)),
                float(rng.integers(0, 4)) / 2,
                state,
                action,
            )
        )
    return Trajectory(tuple(steps), int(rng.integers(0, 2**31)), "c0p0", f"t{int(rng.integers(0, 10**6))}")


def clipped_loss_reference(logits, ref_logits, windows, rewards, eps, beta, per_window_norm=True) -> float:
    """Loop-by-loop evaluation of the clipped group objective.

    ``windows[j][i]`` is a list of ``(d, p, a)`` decision tokens (one entry per
    token) and ``rewards[(j, i)]`` the window reward.
    """
    keys = [(j, i) for j, ws in enumerate(windows) for i in range(len(ws))]
    mean = sum(rewards[k] for k in keys) / len(keys)
    policy, kl_sum, n_tok = 0.0, 0.0, 0
    for j, i in keys:
        toks = windows[j][i]
        if not toks:
            continue
        adv = rewards[(j, i)] - mean
        part = 0.0
        for d, p, a in toks:
            r = probs(logits[d, p])[a] / probs(ref_logits[d, p])[a]
            part += min(r * adv, min(max(r, 1 - eps), 1 + eps) * adv)
            kl_sum += kl_exact(logits[d, p], ref_logits[d, p])
            n_tok += 1
        policy += part / (len(toks) if per_window_norm else 1)
    return -policy / len(keys) + beta * kl_sum / n_tok


# -- event logs ----------------------------------------------------------------


def priority_violations(events) -> list:
    """Replay a log: every train judge_start that happens while an eval request waits."""
    waiting: dict[str, str] = {}
    bad = []
    for e in events:
        if e.kind == "judge_enqueue":
            waiting[e.entity] = e.priority_class
        elif e.kind == "judge_start":
            waiting.pop(e.entity)
            if e.priority_class == "train_set" and "eval_set" in waiting.values():
                bad.append(e)
    return bad


def causality_problems(events) -> list[str]:
    out = []
    times = [e.time for e in events]
    if times != sorted(times):
        out.append("log not time-ordered")
    enq, started, node_of, node_free = set(), set(), {}, {}
    for e in events:
        if e.kind == "judge_enqueue":
            enq.add(e.entity)
        elif e.kind == "judge_start":
            if e.entity not in enq:
                out.append(f"{e.entity} started before enqueue")
            started.add(e.entity)
        elif e.kind == "judge_end" and e.entity not in started:
            out.append(f"{e.entity} ended before start")
        elif e.kind == "rollout_start":
            node = e.detail
            if node_free.get(node, 0.0) > e.time:
                out.append(f"{node} double-booked at {e.time}")
            node_free[node] = float("inf")
            node_of[e.entity] = node
        elif e.kind == "rollout_end":
            node_free[node_of[e.entity]] = e.time
    return out
