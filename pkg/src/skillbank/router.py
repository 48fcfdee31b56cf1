"""Per-task skill selection: full-bank gate, shortlist-then-gate, or an ablation mode."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .backends.base import GateOracle, Task
from .retrieval import Embedder, SkillIndex
from .skill_model import Skill

log = logging.getLogger(__name__)


class RouterMode(str, Enum):
    DEFAULT = "DEFAULT"
    FORCED_NONE = "FORCED_NONE"
    RETRIEVAL_ONLY = "RETRIEVAL_ONLY"


class RoutePath(str, Enum):
    FULL_BANK = "FULL_BANK"
    SHORTLIST = "SHORTLIST"
    FORCED_NONE = "FORCED_NONE"
    RETRIEVAL_ONLY = "RETRIEVAL_ONLY"


@dataclass(frozen=True)
class RouteDecision:
    task_id: str
    chosen: str | None
    path: RoutePath
    shortlist: tuple[str, ...] = field(default_factory=tuple)


def _ask_gate(gate: GateOracle, task: Task, candidates: Sequence[Skill]) -> str | None:
    allowed = {s.id for s in candidates}
    for attempt in range(2):
        answer = gate.adjudicate(task, candidates)
        if answer is None or answer in allowed:
            return answer
        log.warning("gate returned %r for %s (attempt %d); not a candidate", answer, task.task_id, attempt + 1)
    return None


def route(
    task: Task,
    active: Sequence[Skill],
    mode: RouterMode,
    cutoff: int,
    k: int,
    gate: GateOracle,
    embedder: Embedder,
    *,
    index: SkillIndex | None = None,
) -> RouteDecision:
    """Pick one skill from ``active`` or NONE.

    ``index`` may be passed in when many tasks are routed against the same
    skill set; it must have been built from exactly ``active``.
    """
    if cutoff < 0 or k < 1:
        raise ValueError("cutoff must be >= 0 and K >= 1")
    mode = RouterMode(mode)
    if mode is RouterMode.FORCED_NONE:
        return RouteDecision(task.task_id, None, RoutePath.FORCED_NONE)
    if not active:
        path = RoutePath.RETRIEVAL_ONLY if mode is RouterMode.RETRIEVAL_ONLY else RoutePath.FULL_BANK
        return RouteDecision(task.task_id, None, path)
    if index is None:
        index = SkillIndex(active, embedder)
    by_id = {s.id: s for s in index.skills}

    if mode is RouterMode.RETRIEVAL_ONLY:
        ranked, scores = index.tfidf_ranking(task.prompt)
        if scores.max() > 0:
            top = ranked[0]
        else:
            top = index.embedding_ranking(task.prompt)[0]
        return RouteDecision(task.task_id, top, RoutePath.RETRIEVAL_ONLY, (top,))

    if len(active) <= cutoff:
        ranked, _ = index.tfidf_ranking(task.prompt)
        candidates = [by_id[i] for i in ranked]
        chosen = _ask_gate(gate, task, candidates)
        return RouteDecision(task.task_id, chosen, RoutePath.FULL_BANK, tuple(ranked))

    short = index.shortlist(task.prompt, k)
    chosen = _ask_gate(gate, task, [by_id[i] for i in short])
    return RouteDecision(task.task_id, chosen, RoutePath.SHORTLIST, tuple(short))
