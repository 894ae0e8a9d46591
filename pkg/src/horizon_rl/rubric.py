"""Weighted rubric trees and the deterministic judge.

Leaves are pass/fail predicates over an environment snapshot. An internal
node scores the weighted mean of its children, with weights normalized inside
each sibling group; the root score is the reward. Arithmetic is exact
(``Fraction``) so monotonicity and scale invariance hold without tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import Blacklisted, EmptyRubric, FormatError, InvalidConfig

RUBRIC_FORMAT = "rbv1"

Predicate = Callable[[Any], bool]


@dataclass(frozen=True)
class RubricNode:
    id: str
    weight: Fraction = Fraction(1)
    children: tuple["RubricNode", ...] = ()
    leaf_check: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "weight", Fraction(self.weight))
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> list["RubricNode"]:
        if self.is_leaf:
            return [self] if self.leaf_check is not None else []
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class JudgeResult:
    score: Fraction
    per_leaf: dict[str, bool] = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.score)


def leaf(id: str, check: str, weight=1) -> RubricNode:
    return RubricNode(id, Fraction(weight), (), check)


def node(id: str, children, weight=1) -> RubricNode:
    return RubricNode(id, Fraction(weight), tuple(children), None)


def validate_rubric(root: RubricNode) -> list[str]:
    problems = []
    seen: set[str] = set()
    for n in root.walk():
        if n.id in seen:
            problems.append(f"duplicate id {n.id!r}")
        seen.add(n.id)
        if bool(n.children) == (n.leaf_check is not None):
            problems.append(f"node {n.id!r}: must have children xor a leaf_check")
        if n.weight < 0:
            problems.append(f"node {n.id!r}: negative weight")
        if n.children and not any(c.weight > 0 for c in n.children):
            problems.append(f"node {n.id!r}: no child has positive weight")
    return problems


# -- predicates ----------------------------------------------------------------


def _subtask_done(arg: str) -> Predicate:
    k = int(arg)
    return lambda snap: snap.subtasks_completed > k


DEFAULT_PREDICATES: dict[str, Callable[[str], Predicate]] = {
    "subtask_done": _subtask_done,
    "always": lambda _: (lambda snap: True),
    "never": lambda _: (lambda snap: False),
}


def resolve_predicate(name: str, registry: Mapping[str, Callable[[str], Predicate]] | None = None) -> Predicate:
    """Look up ``"base:arg"`` (or bare ``"base"``) in the predicate registry."""
    registry = DEFAULT_PREDICATES if registry is None else registry
    base, _, arg = name.partition(":")
    if base not in registry:
        raise InvalidConfig(f"unknown predicate {name!r}")
    return registry[base](arg)


def score_rubric(root: RubricNode, snapshot: Any, registry=None) -> JudgeResult:
    """Judge ``snapshot`` against the rubric.

    ``snapshot`` may also be a plain mapping from predicate name to bool,
    which is convenient for tests and offline judging.
    """
    if not root.leaves():
        raise EmptyRubric(f"rubric {root.id!r} has no leaves")
    per_leaf: dict[str, bool] = {}

    def check(name: str) -> bool:
        if isinstance(snapshot, Mapping):
            return bool(snapshot[name])
        return bool(resolve_predicate(name, registry)(snapshot))

    def score(n: RubricNode) -> Fraction:
        if n.is_leaf:
            if n.leaf_check is None:
                raise InvalidConfig(f"node {n.id!r} has neither children nor a check")
            ok = check(n.leaf_check)
            per_leaf[n.id] = ok
            return Fraction(int(ok))
        total = sum((c.weight for c in n.children), Fraction(0))
        if total <= 0:
            raise InvalidConfig(f"node {n.id!r}: sibling weights sum to zero")
        return sum((c.weight * score(c) for c in n.children), Fraction(0)) / total

    return JudgeResult(score(root), per_leaf)


def chain_rubric(n_subtasks: int) -> RubricNode:
    """Flat rubric with one equally weighted leaf per subtask."""
    return node("root", [leaf(f"subtask-{k}", f"subtask_done:{k}") for k in range(n_subtasks)])


# -- rbv1 ---------------------------------------------------------------------


def rubric_to_dict(n: RubricNode) -> dict:
    out: dict[str, Any] = {"id": n.id, "weight": str(n.weight)}
    if n.leaf_check is not None:
        out["predicate"] = n.leaf_check
    if n.children:
        out["children"] = [rubric_to_dict(c) for c in n.children]
    return out


def rubric_from_dict(d: Mapping) -> RubricNode:
    try:
        return RubricNode(
            str(d["id"]),
            Fraction(str(d.get("weight", 1))),
            tuple(rubric_from_dict(c) for c in d.get("children", ())),
            d.get("predicate"),
        )
    except (KeyError, ValueError, TypeError, ZeroDivisionError) as exc:
        raise FormatError(f"bad rubric node: {exc}") from exc


def dump_rubric(root: RubricNode) -> str:
    return json.dumps({"format": RUBRIC_FORMAT, "root": rubric_to_dict(root)}, indent=2) + "\n"


def load_rubric(path: str | Path) -> RubricNode:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or data.get("format") != RUBRIC_FORMAT:
        raise FormatError(f"expected format {RUBRIC_FORMAT!r}")
    return rubric_from_dict(data["root"])


def load_blacklist(path: str | Path) -> frozenset[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#"))


def check_not_blacklisted(resource: str, blacklist: frozenset[str]) -> None:
    name = Path(resource).name
    if resource in blacklist or name in blacklist:
        raise Blacklisted(f"{resource} is blacklisted")
