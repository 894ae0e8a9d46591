import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from horizon_rl.env import (
    ChainTask,
    CounterStream,
    PolicyParams,
    dump_task,
    expert_params,
    judge,
    load_task,
    make_chain_task,
    policy_entropy,
    policy_logprob,
    reference_task,
    rollout_with_timeout,
    snapshot,
    task_to_dict,
)
from horizon_rl.errors import IndexOutOfRange, InvalidConfig
from horizon_rl.rubric import dump_rubric, leaf, node
from horizon_rl.trajectory import assistant_turns, validate_trajectory
from oracles import entropy_exact, greedy_replay


def small_task(**kw):
    return make_chain_task(3, 2, 4, (1.0, 0.5, 2.0, 1.0), seed=3, **kw)


def test_logprob_examples():
    task = small_task()
    params = PolicyParams.zeros(task)
    for a in range(4):
        assert policy_logprob(params, (1, 1), a) == pytest.approx(-math.log(4), abs=1e-6)
    two = PolicyParams(np.array([[[math.log(3), 0.0]]]))
    assert policy_logprob(two, (0, 0), 0) == pytest.approx(math.log(0.75), abs=1e-6)
    with pytest.raises(IndexOutOfRange):
        policy_logprob(params, (3, 0), 0)
    with pytest.raises(IndexOutOfRange):
        policy_logprob(params, (0, 0), 4)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-100, 100))
def test_logprob_normalized_and_shift_invariant(row, c):
    params = PolicyParams(np.array([[row]]))
    shifted = PolicyParams(np.array([[row]]) + c)
    total = sum(math.exp(policy_logprob(params, (0, 0), a)) for a in range(len(row)))
    assert abs(total - 1) <= 1e-9
    for a in range(len(row)):
        assert policy_logprob(shifted, (0, 0), a) == pytest.approx(policy_logprob(params, (0, 0), a), abs=1e-9)


def test_entropy_examples():
    assert policy_entropy(PolicyParams(np.zeros((2, 2, 4)))) == pytest.approx(math.log(4), abs=1e-6)
    assert policy_entropy(PolicyParams(np.array([[[1000.0, 0, 0, 0]]]))) == pytest.approx(0, abs=1e-9)
    row = np.log([1.0, 1.0, 2.0])
    assert policy_entropy(PolicyParams(row[None, None])) == pytest.approx(1.5 * math.log(2), abs=1e-6)
    assert policy_entropy(PolicyParams(row[None, None])) == pytest.approx(entropy_exact(row), abs=1e-12)


def test_rollout_timeout_below_any_cost():
    task = small_task()
    traj = rollout_with_timeout(task, PolicyParams.zeros(task), 0.25, seed=1)
    assert assistant_turns(traj) == 0 and len(traj.steps) == task.prefix_steps
    assert judge(task, traj) == 0


def test_greedy_correct_matches_replay():
    task = small_task()
    traj = rollout_with_timeout(task, expert_params(task), task.time_budget, seed=0, greedy=True)
    done, elapsed, turns = greedy_replay(task)
    assert assistant_turns(traj) == turns
    assert traj.elapsed == pytest.approx(elapsed)
    assert judge(task, traj) == pytest.approx(done / task.n_subtasks)
    big = ChainTask(**{**task.__dict__, "time_budget": 100.0})
    full = rollout_with_timeout(big, expert_params(big), 100.0, seed=0, greedy=True)
    assert judge(big, full) == 1.0


@given(st.integers(0, 2**63 - 1), st.floats(0.1, 20))
def test_rollout_deterministic_and_within_budget(seed, timeout):
    task = small_task()
    params = PolicyParams(np.random.default_rng(0).normal(size=task.shape))
    a = rollout_with_timeout(task, params, timeout, seed)
    assert a == rollout_with_timeout(task, params, timeout, seed)
    assert a.elapsed <= timeout
    assert assistant_turns(a) <= math.floor(timeout / task.min_cost)
    assert validate_trajectory(a) == []


@given(st.integers(0, 2**32), st.floats(0.1, 10), st.floats(0.1, 10))
def test_resume_consistency(seed, t1, t2):
    task = small_task()
    params = PolicyParams(np.random.default_rng(1).normal(size=task.shape))
    first = rollout_with_timeout(task, params, t1, seed)
    resumed = rollout_with_timeout(task, params, t1 + t2, seed, resume_from=first)
    assert resumed == rollout_with_timeout(task, params, t1 + t2, seed)


def test_resume_stream_crosses_chunks():
    task = make_chain_task(40, 10, 4, (1.0,) * 4, seed=0, time_budget=1000.0)
    params = PolicyParams.zeros(task)
    first = rollout_with_timeout(task, params, 300.0, 5)
    assert assistant_turns(first) == 300
    assert rollout_with_timeout(task, params, 700.0, 5, resume_from=first) == rollout_with_timeout(task, params, 700.0, 5)
    with pytest.raises(InvalidConfig):
        rollout_with_timeout(task, params, 700.0, 6, resume_from=first)


def test_counter_stream_is_stable():
    s = CounterStream(7)
    vals = [s[k] for k in (0, 1, 255, 256, 1000)]
    assert vals == [CounterStream(7)[k] for k in (0, 1, 255, 256, 1000)]
    assert all(0 <= v < 1 for v in vals) and len(set(vals)) == 5


def test_greedy_q_monotone_in_budget():
    task = small_task()
    expert = expert_params(task)
    qs = [judge(task, rollout_with_timeout(task, expert, t, 0, greedy=True)) for t in np.arange(0.5, 15, 0.5)]
    assert qs == sorted(qs)


def test_reference_snapshot_is_frozen():
    task = small_task()
    params = PolicyParams.zeros(task)
    ref = snapshot(params)
    params.logits[0, 0, 0] = 5.0
    assert ref.logits[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        ref.logits[0, 0, 0] = 1.0


def test_task_validation():
    with pytest.raises(InvalidConfig):
        ChainTask(2, 1, 4, ((4,), (0,)), (1.0,) * 4)
    with pytest.raises(InvalidConfig):
        ChainTask(2, 1, 4, ((0,), (0,)), (1.0, 0.0, 1.0, 1.0))


def test_tkv1_round_trip(tmp_path):
    task = reference_task()
    path = tmp_path / "task.json"
    path.write_text(dump_task(task))
    assert load_task(path) == task

    rubric = node("root", [leaf(f"s{k}", f"subtask_done:{k}", k + 1) for k in range(task.n_subtasks)])
    (tmp_path / "r.rbv1").write_text(dump_rubric(rubric))
    data = task_to_dict(task)
    data["rubric"] = "r.rbv1"
    (tmp_path / "task2.json").write_text(json.dumps(data))
    assert load_task(tmp_path / "task2.json").rubric == rubric
