"""Random batches built from the package's own splitter, for loss tests."""

from __future__ import annotations

import numpy as np

from horizon_rl.losses import GroupBatch
from horizon_rl.splitter import SplitConfig, split_trajectory
from oracles import random_trajectory


def random_batch(rng: np.random.Generator, shape, n_rollouts=None, dedup=None, shared_reward=False):
    n = int(rng.integers(1, 4)) if n_rollouts is None else n_rollouts
    L = int(rng.integers(1, 5))
    cfg = SplitConfig(10**6, L, int(rng.integers(0, L)), bool(rng.integers(2)) if dedup is None else dedup)
    rollouts, rewards = [], {}
    for j in range(n):
        traj = random_trajectory(rng, int(rng.integers(1, 9)), shape=shape, max_tokens=3)
        subs = split_trajectory(traj, cfg)
        q = float(rng.random())
        for i in range(len(subs)):
            rewards[(j, i)] = q if shared_reward else float(rng.random())
        rollouts.append(subs)
    return GroupBatch(rollouts, rewards, 1)


def token_lists(batch: GroupBatch):
    """Expand a batch into per-window lists of (d, p, a) decision tokens."""
    out = []
    for subs in batch.rollouts:
        ws = []
        for sub in subs:
            toks = []
            for _, step in sub.supervised_steps():
                toks.extend([(step.state[0], step.state[1], step.action)] * step.act_tokens)
            ws.append(toks)
        out.append(ws)
    return out
