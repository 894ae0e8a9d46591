import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from horizon_rl.errors import InvalidSpec
from horizon_rl.pipeline_sim import (
    EVAL,
    PARTIAL,
    SYNCHRONOUS,
    TRAIN,
    ClusterSpec,
    JudgeQueue,
    JudgeRequest,
    compare_strategies,
    dump_events,
    load_spec,
    simulate,
)
from oracles import causality_problems, priority_violations

REFERENCE = ClusterSpec(4, 1, 2.0, 0.5, 1)


def test_reference_spec_utilization():
    _, sync = simulate(REFERENCE, SYNCHRONOUS, 8.0)
    _, part = simulate(REFERENCE, PARTIAL, 8.0)
    assert sync.rollout_node_utilization == 0.5
    assert sync.iterations_completed == 2
    assert part.rollout_node_utilization == 1.0
    assert part.iterations_completed == 3  # boundaries 2, 4, 6 are fully judged by 8


def test_instant_judging_gives_full_utilization():
    spec = ClusterSpec(4, 1, 2.0, 0.0, 1)
    _, sync = simulate(spec, SYNCHRONOUS, 8.0)
    _, part = simulate(spec, "partial", 8.0)
    assert sync.rollout_node_utilization == part.rollout_node_utilization == 1.0
    assert sync.iterations_completed == part.iterations_completed


@pytest.mark.parametrize(
    "spec",
    [ClusterSpec(2, 1, 2.0, 0.5), ClusterSpec(4, 2, 3.0, 1.0), ClusterSpec(3, 2, 4.0, 1.0, 2), ClusterSpec(1, 1, 1.0, 1.0)],
)
def test_partial_beats_synchronous_when_judging_fits(spec):
    assert spec.judge_workers * spec.rollout_duration >= spec.rollout_nodes * spec.judge_requests_per_rollout * spec.judge_service_time
    report = compare_strategies(spec, 20.0)
    assert report["utilization_delta"] > 0
    assert report["partial_rollout_priority"]["rollout_node_utilization"] == 1.0


def test_injected_eval_jumps_the_queue():
    spec = ClusterSpec(10, 1, 1.0, 1.0)
    events, _ = simulate(spec, PARTIAL, 12.0, injected=[(1.5, EVAL)])
    starts = {e.entity: e.time for e in events if e.kind == "judge_start"}
    eval_id = next(e.entity for e in events if e.kind == "judge_enqueue" and e.priority_class == EVAL)
    queued_train = [e.entity for e in events if e.kind == "judge_enqueue" and e.priority_class == TRAIN and e.time <= 1.5 and starts.get(e.entity, 99) > 1.5]
    assert len(queued_train) >= 8
    assert all(starts[eval_id] < starts.get(t, float("inf")) for t in queued_train)


def test_long_rollouts_truncated_vs_carried():
    spec = ClusterSpec(4, 1, 2.0, 0.5, task_duration=12.0)
    events_s, sync = simulate(spec, SYNCHRONOUS, 24.0)
    ends = [e.detail for e in events_s if e.kind == "rollout_end"]
    assert ends and set(ends) == {"truncated"} and sync.rollouts_completed_logically == 0
    events_p, part = simulate(spec, PARTIAL, 24.0)
    assert part.rollouts_completed_logically == 8
    # each logical rollout crosses the 5 interior boundaries of its 6 iterations
    assert part.carry_events == 8 * 5


@given(
    st.integers(1, 5), st.integers(1, 3), st.floats(0.5, 4), st.floats(0, 2), st.integers(1, 3),
    st.floats(0, 0.5), st.integers(0, 2), st.floats(0, 0.5), st.sampled_from([SYNCHRONOUS, PARTIAL]), st.integers(0, 99),
)
def test_log_invariants(nodes, workers, R, service, reqs, jitter, evals, fail, strategy, seed):
    spec = ClusterSpec(nodes, workers, R, service, reqs, R * 1.5, jitter, evals, fail)
    events, m = simulate(spec, strategy, R * 6, seed)
    assert causality_problems(events) == []
    assert m.rollouts_started == m.rollouts_finished + m.carried_over_rollouts
    assert 0 <= m.rollout_node_utilization <= 1
    if strategy == PARTIAL:
        assert priority_violations(events) == []
    again, m2 = simulate(spec, strategy, R * 6, seed)
    assert dump_events(again) == dump_events(events) and m2 == m


def test_queue_orders_eval_first_then_time_then_id():
    q = JudgeQueue(1, priority=True)
    q.push(JudgeRequest(0, TRAIN, 0.0))
    q.push(JudgeRequest(2, EVAL, 1.0))
    q.push(JudgeRequest(1, EVAL, 1.0))
    q.push(JudgeRequest(3, TRAIN, 0.5))
    assert [r.seq for r in q.waiting()] == [1, 2, 0, 3]
    fifo = JudgeQueue(1, priority=False)
    for r in (JudgeRequest(0, TRAIN, 0.0), JudgeRequest(1, EVAL, 1.0)):
        fifo.push(r)
    assert fifo.pop().seq == 0


def test_invalid_inputs():
    with pytest.raises(InvalidSpec):
        simulate(REFERENCE, SYNCHRONOUS, 1.0)
    with pytest.raises(InvalidSpec):
        simulate(ClusterSpec(0, 1, 2.0, 0.5), SYNCHRONOUS, 8.0)
    with pytest.raises(InvalidSpec):
        simulate(REFERENCE, "fastest", 8.0)


def test_evv1_and_spec_file(tmp_path):
    events, _ = simulate(REFERENCE, PARTIAL, 8.0)
    lines = dump_events(events).splitlines()
    assert json.loads(lines[0]) == {"format": "evv1"}
    t, kind, entity, cls, _ = json.loads(lines[1])
    assert (t, kind, cls) == (0.0, "rollout_start", TRAIN)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"rollout_nodes": 4, "judge_workers": 1, "rollout_duration": 2, "judge_service_time": 0.5, "horizon": 8}))
    assert load_spec(path) == REFERENCE
    path.write_text(json.dumps({"rollout_nodes": 4, "bogus": 1}))
    with pytest.raises(InvalidSpec):
        load_spec(path)
