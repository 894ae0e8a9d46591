"""Discrete-event model of rollout nodes feeding a shared judge service.

Two strategies are modelled:

``synchronous``
    Every node starts a rollout at the iteration start; rollouts stop at the
    per-iteration timeout, all judge requests land at once, and the nodes
    sit idle until every judgment of the iteration is back.

``partial_rollout_priority``
    Nodes never wait for the judge. A node whose rollout ends starts the
    next one immediately; rollouts still running at an iteration boundary
    are carried over into the next iteration. The judge queue serves
    eval-set requests before train-set requests (non-preemptive).

The simulator is workload-level: rollouts are durations, not episodes.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidSpec

SYNCHRONOUS = "synchronous"
PARTIAL = "partial_rollout_priority"
STRATEGIES = (SYNCHRONOUS, PARTIAL)

EVAL = "eval_set"
TRAIN = "train_set"

EVENT_FORMAT = "evv1"

# Same-time processing order: free workers and nodes first, then boundaries, then arrivals.
_JUDGE_END, _ROLLOUT_END, _BOUNDARY, _INJECT = range(4)


@dataclass(frozen=True)
class ClusterSpec:
    rollout_nodes: int
    judge_workers: int
    rollout_duration: float
    judge_service_time: float
    judge_requests_per_rollout: int = 1
    # Work needed to finish one rollout; defaults to rollout_duration.
    task_duration: float | None = None
    # Uniform relative jitter applied to task_duration per rollout, seeded.
    duration_jitter: float = 0.0
    eval_requests_per_iteration: int = 0
    judge_failure_prob: float = 0.0

    def problems(self) -> list[str]:
        out = []
        if self.rollout_nodes < 1 or self.judge_workers < 1 or self.judge_requests_per_rollout < 1:
            out.append("node, worker and request counts must be >= 1")
        if not self.rollout_duration > 0:
            out.append("rollout_duration must be > 0")
        if not self.judge_service_time >= 0:
            out.append("judge_service_time must be >= 0")
        if self.task_duration is not None and not self.task_duration > 0:
            out.append("task_duration must be > 0")
        if not 0 <= self.duration_jitter < 1:
            out.append("duration_jitter must be in [0, 1)")
        if self.eval_requests_per_iteration < 0:
            out.append("eval_requests_per_iteration must be >= 0")
        if not 0 <= self.judge_failure_prob <= 1:
            out.append("judge_failure_prob must be in [0, 1]")
        return out

    @property
    def work(self) -> float:
        return self.rollout_duration if self.task_duration is None else self.task_duration


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str  # rollout_start | rollout_end | judge_enqueue | judge_start | judge_end
    entity: str
    priority_class: str
    detail: str = ""


@dataclass
class SimMetrics:
    rollout_node_utilization: float
    judge_queue_max_depth: int
    mean_eval_judge_latency: float | None
    carried_over_rollouts: int
    iterations_completed: int = 0
    rollouts_started: int = 0
    rollouts_finished: int = 0
    rollouts_completed_logically: int = 0
    carry_events: int = 0


@dataclass
class JudgeRequest:
    seq: int
    cls: str
    enqueue_time: float
    iteration: int = -1
    retries: int = 0
    first_enqueue: float | None = None

    def __post_init__(self):
        if self.first_enqueue is None:
            self.first_enqueue = self.enqueue_time

    @property
    def entity(self) -> str:
        return f"j{self.seq}"


class JudgeQueue:
    """Waiting line in front of ``workers`` identical judges.

    With ``priority`` set, every waiting eval request is served before any
    waiting train request; ties break by enqueue time, then request id.
    """

    def __init__(self, workers: int, priority: bool):
        self.free = workers
        self.priority = priority
        self._heap: list[tuple] = []

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, req: JudgeRequest) -> None:
        rank = 1 if (self.priority and req.cls == TRAIN) else 0
        heapq.heappush(self._heap, (rank, req.enqueue_time, req.seq, req))

    def pop(self) -> JudgeRequest:
        return heapq.heappop(self._heap)[-1]

    def waiting(self) -> list[JudgeRequest]:
        return [item[-1] for item in sorted(self._heap)]


class _Sim:
    def __init__(self, spec: ClusterSpec, strategy: str, horizon: float, seed: int, injected):
        self.spec = spec
        self.strategy = strategy
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)
        self.events: list[SimEvent] = []
        self.heap: list[tuple] = []
        self.counter = itertools.count()
        self.req_ids = itertools.count()
        self.rollout_ids = itertools.count()
        self.queue = JudgeQueue(spec.judge_workers, priority=strategy == PARTIAL)
        self.busy: list[float] = []  # clipped busy interval lengths
        self.max_depth = 0
        self.eval_latencies: list[float] = []
        self.started = self.finished = self.completed = self.carries = 0
        self.running: dict[int, tuple[float, float]] = {}  # rollout id -> (start, end)
        # iteration -> outstanding judge requests
        self.outstanding: dict[int, int] = {}
        self.iter_done: dict[int, float] = {}
        self.injected = sorted(injected)
        self.boundaries_seen = 0
        self.next_iter = 0

    # -- plumbing
    def log(self, t, kind, entity, cls, detail=""):
        self.events.append(SimEvent(t, kind, entity, cls, detail))

    def schedule(self, t, order, payload):
        heapq.heappush(self.heap, (t, order, next(self.counter), payload))

    def draw_work(self) -> float:
        w = self.spec.work
        if self.spec.duration_jitter:
            w *= 1 + self.spec.duration_jitter * (2 * self.rng.random() - 1)
        return w

    def enqueue(self, t, cls, iteration, retries=0, first=None):
        req = JudgeRequest(next(self.req_ids), cls, t, iteration, retries, t if first is None else first)
        self.queue.push(req)
        self.outstanding[iteration] = self.outstanding.get(iteration, 0) + 1
        self.log(t, "judge_enqueue", req.entity, cls, "retry" if retries else "")

    def dispatch(self, t):
        if t < self.horizon:
            while self.queue.free and len(self.queue):
                req = self.queue.pop()
                self.queue.free -= 1
                self.log(t, "judge_start", req.entity, req.cls)
                self.schedule(t + self.spec.judge_service_time, _JUDGE_END, req)
            self.max_depth = max(self.max_depth, len(self.queue))

    def start_rollout(self, t, node, iteration, work=None):
        rid = next(self.rollout_ids)
        work = self.draw_work() if work is None else work
        if self.strategy == SYNCHRONOUS:
            length, truncated = min(work, self.spec.rollout_duration), work > self.spec.rollout_duration
        else:
            length, truncated = work, False
        self.started += 1
        self.running[rid] = (t, t + length)
        self.log(t, "rollout_start", f"r{rid}", TRAIN, f"node{node}")
        self.schedule(t + length, _ROLLOUT_END, ("rollout", rid, node, iteration, truncated))

    def account_busy(self, start, end):
        self.busy.append(max(0.0, min(end, self.horizon) - max(start, 0.0)))

    # -- handlers
    def on_judge_end(self, t, req: JudgeRequest):
        self.queue.free += 1
        if self.spec.judge_failure_prob and req.retries == 0 and self.rng.random() < self.spec.judge_failure_prob:
            self.log(t, "judge_end", req.entity, req.cls, "failed")
            self.outstanding[req.iteration] -= 1
            self.enqueue(t, req.cls, req.iteration, retries=1, first=req.first_enqueue)
            return
        self.log(t, "judge_end", req.entity, req.cls)
        if req.cls == EVAL:
            self.eval_latencies.append(t - req.first_enqueue)
        self.outstanding[req.iteration] -= 1

    def run(self):
        spec, R = self.spec, self.spec.rollout_duration
        for t, cls in self.injected:
            self.schedule(t, _INJECT, ("inject", cls))
        if self.strategy == SYNCHRONOUS:
            self.sync_iteration_start(0.0, 0)
        else:
            for node in range(spec.rollout_nodes):
                self.start_rollout(0.0, node, 0)
            k = 1
            while k * R <= self.horizon:
                self.schedule(k * R, _BOUNDARY, ("boundary", k))
                k += 1

        while self.heap and self.heap[0][0] <= self.horizon:
            t = self.heap[0][0]
            while self.heap and self.heap[0][0] == t:
                _, order, _, payload = heapq.heappop(self.heap)
                if order == _JUDGE_END:
                    self.on_judge_end(t, payload)
                elif order == _ROLLOUT_END:
                    self.on_rollout_end(t, *payload[1:])
                elif order == _BOUNDARY:
                    self.on_boundary(t, payload[1])
                else:
                    self.enqueue(t, payload[1], -1)
            self.dispatch(t)
            if self.strategy == SYNCHRONOUS:
                self.sync_maybe_advance(t)
            else:
                self.partial_check_iterations(t)
        for start, end in self.running.values():
            self.account_busy(start, end)

    # -- synchronous
    def sync_iteration_start(self, t, k):
        self.sync_k = k
        self.sync_rollouts_left = self.spec.rollout_nodes
        if t >= self.horizon:
            return
        for node in range(self.spec.rollout_nodes):
            self.start_rollout(t, node, k)

    def sync_maybe_advance(self, t):
        k = self.sync_k
        if self.sync_rollouts_left == 0 and self.outstanding.get(k, 0) == 0 and k not in self.iter_done:
            self.iter_done[k] = t
            self.sync_iteration_start(t, k + 1)

    # -- partial
    def on_boundary(self, t, k):
        for rid, (start, end) in self.running.items():
            if start < t < end:
                self.carries += 1
        for _ in range(self.spec.eval_requests_per_iteration):
            self.enqueue(t, EVAL, k - 1)
        self.outstanding.setdefault(k - 1, 0)
        self.boundaries_seen = k

    def partial_check_iterations(self, t):
        # Iterations complete in order: boundary passed and every judgment so far returned.
        while self.next_iter < self.boundaries_seen and self.outstanding.get(self.next_iter, 0) == 0:
            self.iter_done[self.next_iter] = t
            self.next_iter += 1

    # -- shared
    def on_rollout_end(self, t, rid, node, iteration, truncated):
        start, end = self.running.pop(rid)
        self.account_busy(start, end)
        self.finished += 1
        self.completed += not truncated
        self.log(t, "rollout_end", f"r{rid}", TRAIN, "truncated" if truncated else "complete")
        R = self.spec.rollout_duration
        if self.strategy == SYNCHRONOUS:
            owner = iteration
        else:
            # Judged with the iteration whose boundary comes next.
            owner = max(0, math.ceil(t / R) - 1)
        for _ in range(self.spec.judge_requests_per_rollout):
            self.enqueue(t, TRAIN, owner)
        if self.strategy == SYNCHRONOUS:
            self.sync_rollouts_left -= 1
            if self.sync_rollouts_left == 0:
                for _ in range(self.spec.eval_requests_per_iteration):
                    self.enqueue(t, EVAL, iteration)
        elif t < self.horizon:
            self.start_rollout(t, node, int(t // R))


def simulate(
    spec: ClusterSpec,
    strategy: str,
    horizon: float,
    seed: int = 0,
    injected: Iterable[tuple[float, str]] = (),
) -> tuple[list[SimEvent], SimMetrics]:
    """Run one strategy up to ``horizon``.

    ``injected`` adds extra judge requests ``(time, class)`` outside any
    iteration, e.g. an ad-hoc evaluation.
    """
    if strategy == "partial":
        strategy = PARTIAL
    if strategy not in STRATEGIES:
        raise InvalidSpec(f"unknown strategy {strategy!r}")
    problems = spec.problems()
    if problems:
        raise InvalidSpec("; ".join(problems))
    if not horizon >= spec.rollout_duration:
        raise InvalidSpec(f"horizon {horizon} is shorter than rollout_duration {spec.rollout_duration}")

    sim = _Sim(spec, strategy, float(horizon), seed, injected)
    sim.run()
    lat = sim.eval_latencies
    metrics = SimMetrics(
        # min() only absorbs rounding; busy time can never exceed nodes * horizon.
        rollout_node_utilization=min(1.0, math.fsum(sim.busy) / (spec.rollout_nodes * horizon)),
        judge_queue_max_depth=sim.max_depth,
        mean_eval_judge_latency=math.fsum(lat) / len(lat) if lat else None,
        carried_over_rollouts=len(sim.running),
        iterations_completed=sum(1 for it, t in sim.iter_done.items() if it >= 0 and t <= horizon),
        rollouts_started=sim.started,
        rollouts_finished=sim.finished,
        rollouts_completed_logically=sim.completed,
        carry_events=sim.carries,
    )
    return sim.events, metrics


def compare_strategies(spec: ClusterSpec, horizon: float, seed: int = 0) -> dict:
    _, sync = simulate(spec, SYNCHRONOUS, horizon, seed)
    _, part = simulate(spec, PARTIAL, horizon, seed)
    lat_delta = None
    if sync.mean_eval_judge_latency is not None and part.mean_eval_judge_latency is not None:
        lat_delta = part.mean_eval_judge_latency - sync.mean_eval_judge_latency
    return {
        "synchronous": asdict(sync),
        "partial_rollout_priority": asdict(part),
        "utilization_delta": part.rollout_node_utilization - sync.rollout_node_utilization,
        "eval_latency_delta": lat_delta,
        "carried_over": part.carry_events,
    }


def dump_events(events: Iterable[SimEvent]) -> str:
    lines = [json.dumps({"format": EVENT_FORMAT})]
    lines += [json.dumps([e.time, e.kind, e.entity, e.priority_class, e.detail]) for e in events]
    return "\n".join(lines) + "\n"


def write_events(path: str | Path, events: Iterable[SimEvent]) -> None:
    Path(path).write_text(dump_events(events), encoding="utf-8")


def load_spec(path: str | Path) -> ClusterSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        # Run settings may live next to the cluster description.
        for key in ("format", "horizon", "seed"):
            data.pop(key, None)
        return ClusterSpec(**data)
    except (json.JSONDecodeError, TypeError) as exc:
        raise InvalidSpec(f"{path}: {exc}") from exc
