"""SFT and clipped group-relative RL losses with exact gradients.

Every loss here is a function of a tabular logit array, so gradients are
written out analytically: for a softmax table, d log pi(a|s) / d theta[s, b]
equals ``[a == b] - pi(b|s)``.

Token layout: a supervised step contributes ``act_tokens`` identical
decision tokens, all scored at the step's ``(subtask, position)`` state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import PolicyParams, ReferenceSnapshot, log_softmax
from .errors import EmptyBatch, EmptyLossMask, InvalidConfig
from .splitter import SubTrajectory
from .trajectory import SftExample

Table = PolicyParams | ReferenceSnapshot


@dataclass(frozen=True)
class RlHyperparams:
    clip_epsilon: float = 0.2
    kl_weight: float = 0.01
    # Divide each window's token sum by its token count before the 1/(n*K) average.
    normalize_by_window_tokens: bool = True

    def __post_init__(self):
        if not self.clip_epsilon > 0:
            raise InvalidConfig("clip_epsilon must be > 0")
        if self.kl_weight < 0:
            raise InvalidConfig("kl_weight must be >= 0")


@dataclass
class GroupBatch:
    """n rollouts of one stage, each split into windows, with per-window rewards."""

    rollouts: list[list[SubTrajectory]]
    rewards: dict[tuple[int, int], float]
    stage_index: int = 0

    @property
    def n_windows(self) -> int:
        return sum(len(r) for r in self.rollouts)

    def keys(self) -> list[tuple[int, int]]:
        return [(j, i) for j, subs in enumerate(self.rollouts) for i in range(len(subs))]


def group_advantages(batch: GroupBatch) -> dict[tuple[int, int], float]:
    """Reward minus the mean reward over every window of every rollout in the group."""
    keys = batch.keys()
    if not keys:
        return {}
    # Centre on one reward first: a constant group then gives exact zeros.
    base = batch.rewards[keys[0]]
    offset = math.fsum(batch.rewards[k] - base for k in keys) / len(keys)
    return {k: (batch.rewards[k] - base) - offset for k in keys}


def likelihood_ratio(params: Table, ref: Table, state: tuple[int, int], action: int) -> float:
    d, p = state
    lp = log_softmax(params.logits[d, p])[action]
    lq = log_softmax(ref.logits[d, p])[action]
    return float(math.exp(lp - lq))


def kl_divergence(params: Table, ref: Table, state: tuple[int, int]) -> float:
    """Exact KL(pi_params(.|s) || pi_ref(.|s))."""
    d, p = state
    lp = log_softmax(params.logits[d, p])
    lq = log_softmax(ref.logits[d, p])
    return float(np.sum(np.exp(lp) * (lp - lq)))


# -- token tables --------------------------------------------------------------


@dataclass
class _Tokens:
    d: np.ndarray
    p: np.ndarray
    a: np.ndarray
    count: np.ndarray  # identical tokens per row
    weight: np.ndarray  # policy-term weight of one token
    adv: np.ndarray

    def __len__(self):
        return len(self.a)


def _supervised_rows(sub: SubTrajectory):
    for _, step in sub.supervised_steps():
        if step.act_tokens == 0:
            continue
        if step.state is None or step.action is None:
            raise InvalidConfig("supervised step has no (state, action) decision")
        yield step.state[0], step.state[1], step.action, step.act_tokens


def _batch_tokens(batch: GroupBatch, hp: RlHyperparams) -> _Tokens:
    n_windows = batch.n_windows
    if n_windows == 0:
        raise EmptyBatch("batch has no sub-trajectories")
    adv = group_advantages(batch)
    rows = []
    for j, subs in enumerate(batch.rollouts):
        for i, sub in enumerate(subs):
            n_tok = sub.n_loss_tokens
            if n_tok == 0:
                continue
            w = 1.0 / n_windows
            if hp.normalize_by_window_tokens:
                w /= n_tok
            for d, p, a, c in _supervised_rows(sub):
                rows.append((d, p, a, c, w, adv[(j, i)]))
    if not rows:
        raise EmptyBatch("batch has no unmasked action tokens")
    cols = list(zip(*rows))
    return _Tokens(
        np.array(cols[0], dtype=np.intp),
        np.array(cols[1], dtype=np.intp),
        np.array(cols[2], dtype=np.intp),
        np.array(cols[3], dtype=np.float64),
        np.array(cols[4], dtype=np.float64),
        np.array(cols[5], dtype=np.float64),
    )


def _ratios(params: Table, ref: Table, tok: _Tokens):
    lp_all = log_softmax(params.logits)
    lq_all = log_softmax(ref.logits)
    lp = lp_all[tok.d, tok.p, tok.a]
    lq = lq_all[tok.d, tok.p, tok.a]
    return np.exp(lp - lq), lp_all, lq_all


def clipped_rl_loss(params: Table, ref: Table, batch: GroupBatch, hp: RlHyperparams) -> float:
    tok = _batch_tokens(batch, hp)
    r, lp_all, lq_all = _ratios(params, ref, tok)
    eps = hp.clip_epsilon
    surrogate = np.minimum(r * tok.adv, np.clip(r, 1 - eps, 1 + eps) * tok.adv)
    policy_term = -float(np.sum(tok.weight * tok.count * surrogate))
    if hp.kl_weight == 0:
        return policy_term
    p_all = np.exp(lp_all[tok.d, tok.p])
    kl = np.sum(p_all * (lp_all[tok.d, tok.p] - lq_all[tok.d, tok.p]), axis=-1)
    return policy_term + hp.kl_weight * float(np.sum(tok.count * kl) / np.sum(tok.count))


def loss_gradient(params: Table, ref: Table, batch: GroupBatch, hp: RlHyperparams) -> np.ndarray:
    """Analytic gradient of :func:`clipped_rl_loss` with respect to ``params.logits``.

    A token contributes only while the unclipped branch is the one selected
    by the min; on the clipped branch its term is constant in theta.
    """
    tok = _batch_tokens(batch, hp)
    r, lp_all, lq_all = _ratios(params, ref, tok)
    eps = hp.clip_epsilon
    unclipped = r * tok.adv <= np.clip(r, 1 - eps, 1 + eps) * tok.adv
    coef = np.where(unclipped, -tok.weight * tok.count * tok.adv * r, 0.0)

    probs = np.exp(lp_all)
    grad = np.zeros_like(params.logits)
    # d(r)/d(theta[s]) = r * (onehot(a) - pi(.|s))
    np.add.at(grad, (tok.d, tok.p, tok.a), coef)
    np.add.at(grad, (tok.d, tok.p), -coef[:, None] * probs[tok.d, tok.p])

    if hp.kl_weight:
        lp = lp_all[tok.d, tok.p]
        diff = lp - lq_all[tok.d, tok.p]
        p = np.exp(lp)
        kl = np.sum(p * diff, axis=-1, keepdims=True)
        scale = hp.kl_weight * tok.count / np.sum(tok.count)
        np.add.at(grad, (tok.d, tok.p), scale[:, None] * p * (diff - kl))
    return grad


# -- SFT -----------------------------------------------------------------------


def _sft_rows(subs: Sequence[SubTrajectory]):
    rows = [row for sub in subs for row in _supervised_rows(sub)]
    if not rows:
        raise EmptyLossMask("no unmasked action tokens")
    d, p, a, c = (np.array(col) for col in zip(*rows))
    return d, p, a, c.astype(np.float64)


def sft_loss(params: Table, subs: Sequence[SubTrajectory], reduction: str = "mean") -> float:
    """Negative log-likelihood of the unmasked action tokens of ``subs``.

    Overlap steps supervised by two windows are counted twice unless the
    windows were built with dedup masking.
    """
    d, p, a, c = _sft_rows(subs)
    nll = -log_softmax(params.logits)[d, p, a]
    total = float(np.sum(c * nll))
    return total / float(np.sum(c)) if reduction == "mean" else total


def sft_gradient(params: Table, subs: Sequence[SubTrajectory], reduction: str = "mean") -> np.ndarray:
    d, p, a, c = _sft_rows(subs)
    probs = np.exp(log_softmax(params.logits))
    grad = np.zeros_like(params.logits)
    np.add.at(grad, (d, p), c[:, None] * probs[d, p])
    np.add.at(grad, (d, p, a), -c)
    if reduction == "mean":
        grad /= np.sum(c)
    return grad


def sft_example_loss(params: Table, examples: Sequence[SftExample]) -> float:
    """Summed NLL of plain examples; the context is the ``(subtask, position)`` state."""
    logp = log_softmax(params.logits)
    total = 0.0
    for ex in examples:
        d, p = ex.context_tokens[:2]
        total -= float(np.sum(logp[d, p, list(ex.target_tokens)]))
    return total
