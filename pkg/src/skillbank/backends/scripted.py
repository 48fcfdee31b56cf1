"""Table-driven oracle doubles for tests and small reproducible demos."""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from ..evidence_log import Capsule
from ..skill_model import Skill
from .base import CallContext, MalformedResponse, OracleUnavailable, Oracles, Task, VerdictDraft

Outcome = bool | Callable[[Task, "Skill | None", CallContext], bool]


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")[:60] or "skill"


class ScriptedSolver:
    """Pass/fail looked up by (task_id, skill_id), then task_id, then ``default``.

    A value may also be a callable of (task, skill, ctx).
    """

    def __init__(self, outcomes: Mapping[Any, Outcome] | None = None, default: bool = False):
        self.outcomes = dict(outcomes or {})
        self.default = default
        self.calls: list[tuple[str, str | None, int, str]] = []

    def solve(self, task: Task, skill: Skill | None, ctx: CallContext) -> str:
        sid = skill.id if skill else None
        self.calls.append((task.task_id, sid, ctx.round, ctx.split))
        rule = self.outcomes.get((task.task_id, sid), self.outcomes.get(task.task_id, self.default))
        passed = rule(task, skill, ctx) if callable(rule) else bool(rule)
        return f"PASS {task.task_id}" if passed else f"FAIL {task.task_id} with {sid or 'no skill'}"


class PrefixGrader:
    def grade(self, task: Task, output: str, ctx: CallContext) -> bool:
        return output.startswith("PASS")


class ScriptedCritic:
    """Emits a fixed pattern per task (or ``default_pattern``)."""

    def __init__(self, patterns: Mapping[str, str] | None = None, *, default_pattern: str = "unlabelled failure",
                 attribution: str = "NEUTRAL", malformed: Iterable[str] = ()):
        self.patterns = dict(patterns or {})
        self.default_pattern = default_pattern
        self.attribution = attribution
        self.malformed = set(malformed)
        self.calls = 0

    def critique(self, task: Task, skill: Skill | None, capsule: Capsule, ctx: CallContext) -> VerdictDraft:
        self.calls += 1
        if task.task_id in self.malformed:
            raise MalformedResponse(f"scripted malformed verdict for {task.task_id}")
        pattern = self.patterns.get(task.task_id, self.default_pattern)
        attribution = "INAPPLICABLE" if skill is None and self.attribution == "NEUTRAL" else self.attribution
        return VerdictDraft(attribution, pattern, "HIGH", "scripted")


def template_skill(pattern: str, *, skill_id: str | None = None, padding: int = 0) -> str:
    """A valid skill YAML built from a failure pattern."""
    doc = {
        "id": skill_id or _slug(pattern),
        "name": pattern[:80],
        "intent": f"Avoid {pattern}",
        "description": f"Guards against {pattern}.",
        "signals_match": re.findall(r"[a-z0-9]+", pattern.lower())[:4],
        "tags": ["scripted"],
        "guidance": {
            "applies_when": pattern,
            "key_insight": f"Handle {pattern} explicitly." + " x" * padding,
            "common_pitfalls": [pattern],
            "verify_before_returning": "Re-run the failing example.",
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


class TemplateSynth:
    """Fills :func:`template_skill` from the digest's pattern line.

    ``responses`` (consumed first, in order) lets tests inject raw outputs,
    e.g. malformed YAML or over-budget text.
    """

    def __init__(self, responses: Iterable[str] = ()):
        self.responses = deque(responses)
        self.calls: list[str] = []

    def synthesize(self, guidance_text: str, cluster_digest: str, bank_digest: str, char_budget: int) -> str:
        self.calls.append(guidance_text)
        if self.responses:
            return self.responses.popleft()
        pattern = cluster_digest.splitlines()[0].removeprefix("pattern:").strip()
        return template_skill(pattern)


def candidate_key(candidates: Sequence[Skill]) -> str:
    return hashlib.sha256("\n".join(s.id for s in candidates).encode()).hexdigest()[:16]


class ScriptedGate:
    """Answers from a table keyed by (task_id, candidate-set hash) or task_id.

    Unlisted lookups fall back to ``default``: "none", "first", or a callable.
    """

    def __init__(self, table: Mapping[Any, str | None] | None = None,
                 default: str | Callable[[Task, Sequence[Skill]], str | None] = "none"):
        self.table = dict(table or {})
        self.default = default
        self.calls: list[tuple[str, tuple[str, ...]]] = []

    def adjudicate(self, task: Task, candidates: Sequence[Skill]) -> str | None:
        self.calls.append((task.task_id, tuple(s.id for s in candidates)))
        for key in ((task.task_id, candidate_key(candidates)), task.task_id):
            if key in self.table:
                return self.table[key]
        if callable(self.default):
            return self.default(task, candidates)
        if self.default == "first":
            return candidates[0].id if candidates else None
        return None


class TagGate:
    """Picks the first candidate carrying one of the task's tags."""

    def __init__(self, task_tags: Mapping[str, str]):
        self.task_tags = dict(task_tags)

    def adjudicate(self, task: Task, candidates: Sequence[Skill]) -> str | None:
        tag = self.task_tags.get(task.task_id)
        return next((s.id for s in candidates if tag and tag in s.tags), None)


class ScriptedMeta:
    def __init__(self, responses: Iterable[str] = ()):
        self.responses = deque(responses)

    def refresh(self, current_markdown: str, verdict_digest: str) -> str:
        return self.responses.popleft() if self.responses else current_markdown


class FlakyOracle:
    """Wraps a solver and raises OracleUnavailable on chosen call numbers."""

    def __init__(self, inner: Any, fail_on: Iterable[int]):
        self.inner = inner
        self.fail_on = set(fail_on)
        self.n = 0

    def solve(self, task: Task, skill: Skill | None, ctx: CallContext) -> str:
        self.n += 1
        if self.n in self.fail_on:
            raise OracleUnavailable(f"scripted outage at call {self.n}")
        return self.inner.solve(task, skill, ctx)


# --------------------------------------------------------------------------- suite files


@dataclass
class ScriptedSuite:
    """A small task suite with planted outcomes, loadable from JSON.

    Each task row: id, prompt, split, pattern, pass_without (bool), and
    pass_with (bool, used whenever the injected skill's applies_when equals
    the task's pattern).
    """

    tasks: list[Task]
    patterns: dict[str, str]
    pass_without: dict[str, bool]
    pass_with: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedSuite":
        tasks, patterns, without, with_ = [], {}, {}, {}
        for row in data["tasks"]:
            tid = row["id"]
            tasks.append(Task(tid, row["prompt"], row["split"], data.get("suite", "default")))
            patterns[tid] = row.get("pattern", "unlabelled failure")
            without[tid] = bool(row.get("pass_without", False))
            with_[tid] = bool(row.get("pass_with", without[tid]))
        return cls(tasks, patterns, without, with_)

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedSuite":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def oracles(self, embedder: Any) -> Oracles:
        def outcome(tid: str) -> Callable[[Task, Skill | None, CallContext], bool]:
            def rule(task: Task, skill: Skill | None, ctx: CallContext) -> bool:
                if skill is not None and skill.guidance.applies_when == self.patterns[tid]:
                    return self.pass_with[tid]
                return self.pass_without[tid]
            return rule

        solver = ScriptedSolver({t.task_id: outcome(t.task_id) for t in self.tasks})

        def gate(task: Task, candidates: Sequence[Skill]) -> str | None:
            want = self.patterns[task.task_id]
            return next((s.id for s in candidates if s.guidance.applies_when == want), None)

        return Oracles(solver, PrefixGrader(), ScriptedCritic(self.patterns), TemplateSynth(),
                       ScriptedGate(default=gate), embedder, meta=ScriptedMeta())
