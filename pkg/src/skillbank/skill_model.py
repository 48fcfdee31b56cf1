"""Typed skill-library artifacts: skills, guidance blocks, meta-skills, banks.

Skills are immutable values; the :class:`Bank` is the one mutable container and
only changes through validated status transitions.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np
import yaml

try:  # libyaml is an optional speed-up
    from yaml import CSafeDumper as _Dumper, CSafeLoader as _Loader
except ImportError:  # pragma: no cover
    from yaml import SafeDumper as _Dumper, SafeLoader as _Loader

DEFAULT_CHAR_BUDGET = 1500

SNAKE_CASE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")

# Canonical field order; `embedding` is computed state and never part of the file.
SKILL_FIELDS = (
    "id",
    "name",
    "version",
    "intent",
    "description",
    "signals_match",
    "preconditions",
    "tags",
    "guidance",
    "status",
    "created_at",
    "updated_at",
)
GUIDANCE_FIELDS = ("applies_when", "key_insight", "common_pitfalls", "verify_before_returning")
REQUIRED_SKILL_FIELDS = ("id", "name", "intent", "description", "guidance")
LIST_FIELDS = ("signals_match", "preconditions", "tags")


class ValidationError(ValueError):
    """Base class for every artifact validation failure."""


class MalformedYaml(ValidationError):
    pass


class MissingField(ValidationError):
    def __init__(self, name: str):
        super().__init__(f"missing required field: {name}")
        self.name = name


class InvalidField(ValidationError):
    def __init__(self, name: str, reason: str):
        super().__init__(f"invalid field {name}: {reason}")
        self.name = name
        self.reason = reason


class GuidanceIncomplete(ValidationError):
    pass


class OverBudget(ValidationError):
    def __init__(self, actual: int, budget: int):
        super().__init__(f"serialized skill is {actual} chars, budget {budget}")
        self.actual = actual
        self.budget = budget


class MissingFrontmatter(ValidationError):
    pass


class MissingSection(ValidationError):
    def __init__(self, section: str):
        super().__init__(f"missing section: {section}")
        self.section = section


class InvalidTransition(ValueError):
    def __init__(self, skill_id: str, src: "SkillStatus", dst: "SkillStatus"):
        super().__init__(f"{skill_id}: illegal status transition {src.value} -> {dst.value}")
        self.skill_id = skill_id
        self.src = src
        self.dst = dst


class UnknownSkill(KeyError):
    pass


class DuplicateSkill(ValueError):
    pass


class SkillStatus(str, Enum):
    ACTIVE = "ACTIVE"
    DEPRECATED = "DEPRECATED"
    CANDIDATE = "CANDIDATE"


LEGAL_TRANSITIONS: frozenset[tuple[SkillStatus, SkillStatus]] = frozenset(
    {
        (SkillStatus.CANDIDATE, SkillStatus.ACTIVE),
        (SkillStatus.CANDIDATE, SkillStatus.DEPRECATED),
        (SkillStatus.ACTIVE, SkillStatus.DEPRECATED),
        (SkillStatus.DEPRECATED, SkillStatus.ACTIVE),
    }
)


def utc_now() -> str:
    return format_timestamp(datetime.now(timezone.utc))


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass(frozen=True)
class Guidance:
    applies_when: str
    key_insight: str = ""
    common_pitfalls: tuple[str, ...] = ()
    verify_before_returning: str = ""

    def __post_init__(self) -> None:
        if not self.applies_when.strip():
            raise GuidanceIncomplete("guidance.applies_when is empty")
        if not self.key_insight.strip() and not self.common_pitfalls:
            raise GuidanceIncomplete("guidance needs key_insight or common_pitfalls")

    def to_dict(self) -> dict[str, Any]:
        return {
            "applies_when": self.applies_when,
            "key_insight": self.key_insight,
            "common_pitfalls": list(self.common_pitfalls),
            "verify_before_returning": self.verify_before_returning,
        }

    def render(self) -> str:
        """Plain-text form injected into the solver prompt."""
        lines = [f"Applies when: {self.applies_when}"]
        if self.key_insight:
            lines.append(f"Key insight: {self.key_insight}")
        for pitfall in self.common_pitfalls:
            lines.append(f"Pitfall: {pitfall}")
        if self.verify_before_returning:
            lines.append(f"Verify before returning: {self.verify_before_returning}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Skill:
    id: str
    name: str
    version: str
    intent: str
    description: str
    guidance: Guidance
    signals_match: tuple[str, ...] = ()
    preconditions: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    status: SkillStatus = SkillStatus.CANDIDATE
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)
    created_at: str = ""
    updated_at: str = ""

    def __post_init__(self) -> None:
        if not self.id or not SNAKE_CASE.match(self.id):
            raise InvalidField("id", f"{self.id!r} is not lowercase snake_case")

    def to_dict(self) -> dict[str, Any]:
        """Canonical ordered mapping (no embedding)."""
        return {
            "id": self.id,
            "name": self.name,
            "version": self.version,
            "intent": self.intent,
            "description": self.description,
            "signals_match": list(self.signals_match),
            "preconditions": list(self.preconditions),
            "tags": list(self.tags),
            "guidance": self.guidance.to_dict(),
            "status": self.status.value,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @cached_property
    def yaml(self) -> str:
        return _dump(self.to_dict())

    @cached_property
    def embedding_surface(self) -> str:
        """Serialization minus timestamps and status, so re-embedding is stable."""
        d = self.to_dict()
        for key in ("status", "created_at", "updated_at"):
            d.pop(key)
        return _dump(d)

    @property
    def retrieval_text(self) -> str:
        return " ".join([self.intent, *self.signals_match, self.guidance.applies_when])

    def with_status(self, status: SkillStatus, *, at: str | None = None) -> "Skill":
        if status == self.status:
            return self
        if (self.status, status) not in LEGAL_TRANSITIONS:
            raise InvalidTransition(self.id, self.status, status)
        return replace(self, status=status, updated_at=at or self.updated_at)

    def with_embedding(self, vector: Sequence[float]) -> "Skill":
        arr = np.array(vector, dtype=np.float64)
        arr.setflags(write=False)
        return replace(self, embedding=arr)


def _dump(data: Mapping[str, Any]) -> str:
    # skills hold only strings and lists, so JSON is a faithful cache key
    return _dump_cached(json.dumps(data, ensure_ascii=False))


@lru_cache(maxsize=8192)
def _dump_cached(key: str) -> str:
    return yaml.dump(
        json.loads(key),
        Dumper=_Dumper,
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=100000,
    )


def serialize_skill(skill: Skill) -> str:
    return skill.yaml


def _as_str(data: Mapping[str, Any], key: str, *, required: bool = True) -> str:
    value = data.get(key)
    if value is None:
        if required:
            raise MissingField(key)
        return ""
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise InvalidField(key, f"expected a string, got {type(value).__name__}")
    text = str(value).strip()
    if required and not text:
        raise MissingField(key)
    return text


def _as_str_list(data: Mapping[str, Any], key: str) -> tuple[str, ...]:
    value = data.get(key)
    if value is None:
        return ()
    if isinstance(value, str):
        return (value.strip(),) if value.strip() else ()
    if not isinstance(value, list):
        raise InvalidField(key, f"expected a list, got {type(value).__name__}")
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (str, int, float)):
            raise InvalidField(key, "list items must be strings")
        if str(item).strip():
            out.append(str(item).strip())
    return tuple(out)


def _guidance_from(data: Any) -> Guidance:
    if data is None:
        raise MissingField("guidance")
    if not isinstance(data, Mapping):
        raise InvalidField("guidance", "expected a mapping")
    applies = _as_str(data, "applies_when", required=False)
    if not applies:
        raise GuidanceIncomplete("guidance.applies_when is missing")
    return Guidance(
        applies_when=applies,
        key_insight=_as_str(data, "key_insight", required=False),
        common_pitfalls=_as_str_list(data, "common_pitfalls"),
        verify_before_returning=_as_str(data, "verify_before_returning", required=False),
    )


def _load_mapping(text: str) -> Mapping[str, Any]:
    return copy.deepcopy(_load_cached(text))


@lru_cache(maxsize=4096)
def _load_cached(text: str) -> Any:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise MalformedYaml(str(exc)) from exc
    except (ValueError, TypeError) as exc:  # e.g. unhashable keys
        raise MalformedYaml(str(exc)) from exc
    if not isinstance(data, Mapping):
        raise MalformedYaml("skill document must be a YAML mapping")
    return data


def skill_from_dict(data: Mapping[str, Any], *, status: SkillStatus | None = None) -> Skill:
    for name in REQUIRED_SKILL_FIELDS:
        if name not in data or data[name] is None:
            raise MissingField(name)
    skill_id = _as_str(data, "id")
    if not SNAKE_CASE.match(skill_id):
        raise InvalidField("id", f"{skill_id!r} is not lowercase snake_case")
    if status is None:
        raw = _as_str(data, "status", required=False) or SkillStatus.CANDIDATE.value
        try:
            status = SkillStatus(raw.upper())
        except ValueError:
            raise InvalidField("status", raw) from None
    return Skill(
        id=skill_id,
        name=_as_str(data, "name"),
        version=_as_str(data, "version", required=False) or "v1",
        intent=_as_str(data, "intent"),
        description=_as_str(data, "description"),
        guidance=_guidance_from(data.get("guidance")),
        signals_match=_as_str_list(data, "signals_match"),
        preconditions=_as_str_list(data, "preconditions"),
        tags=_as_str_list(data, "tags"),
        status=status,
        created_at=_as_str(data, "created_at", required=False),
        updated_at=_as_str(data, "updated_at", required=False),
    )


def parse_skill(text: str) -> Skill:
    """Parse a stored skill file, keeping its status and timestamps."""
    return skill_from_dict(_load_mapping(text))


def validate_skill(
    yaml_text: str,
    budget: int = DEFAULT_CHAR_BUDGET,
    *,
    now: str | None = None,
    version: str | None = None,
) -> Skill:
    """Validate model-authored YAML into a CANDIDATE skill.

    The budget is checked against the canonical serialization, so whitespace
    in the raw model output does not count.

    Raises:
        MalformedYaml, MissingField, InvalidField, GuidanceIncomplete, OverBudget
    """
    data = _load_mapping(yaml_text)
    skill = skill_from_dict(data, status=SkillStatus.CANDIDATE)
    stamp = now or utc_now()
    skill = replace(skill, created_at=stamp, updated_at=stamp, version=version or skill.version)
    size = len(skill.yaml)
    if size > budget:
        raise OverBudget(size, budget)
    return skill


# --------------------------------------------------------------------------- meta-skills

_FRONTMATTER = re.compile(r"\A---[ \t]*\n(.*?)\n---[ \t]*(?:\n|\Z)", re.DOTALL)
_HEADING = re.compile(r"^##[ \t]+(.+?)[ \t]*$", re.MULTILINE)


@dataclass(frozen=True)
class MetaSkill:
    id: str
    description: str
    suite: str
    status: str
    scope: str
    do_rules: tuple[str, ...]
    dont_rules: tuple[str, ...]
    raw_markdown: str = ""

    @property
    def authoring_guidance(self) -> str:
        return render_meta_skill(self)

    def schema_lock(self) -> tuple[str, ...]:
        """Do-rules that pin a skill field (``<field>: ...``)."""
        lock_fields = set(SKILL_FIELDS) | set(GUIDANCE_FIELDS)
        return tuple(r for r in self.do_rules if r.split(":", 1)[0].strip() in lock_fields)


def render_meta_skill(meta: MetaSkill) -> str:
    front = _dump(
        {"id": meta.id, "description": meta.description, "suite": meta.suite, "status": meta.status}
    )
    parts = ["---\n", front, "---\n", "## Scope\n", meta.scope, "\n\n", "## Do\n"]
    parts += [f"- {rule}\n" for rule in meta.do_rules]
    parts += ["\n## Don't\n"]
    parts += [f"- {rule}\n" for rule in meta.dont_rules]
    return "".join(parts)


def _bullets(body: str) -> tuple[str, ...]:
    rules: list[str] = []
    for line in body.splitlines():
        stripped = line.strip()
        if stripped.startswith(("- ", "* ")):
            rules.append(stripped[2:].strip())
        elif stripped and rules and line[:1].isspace():
            rules[-1] = f"{rules[-1]} {stripped}"
    return tuple(r for r in rules if r)


def parse_meta_skill(markdown: str) -> MetaSkill:
    m = _FRONTMATTER.match(markdown.lstrip("﻿"))
    if not m:
        raise MissingFrontmatter("meta-skill must start with a '---' YAML frontmatter block")
    try:
        front = yaml.load(m.group(1), Loader=_Loader)
    except yaml.YAMLError as exc:
        raise MalformedYaml(str(exc)) from exc
    if not isinstance(front, Mapping):
        raise MissingFrontmatter("frontmatter is not a mapping")
    body = markdown[m.end():]
    headings = list(_HEADING.finditer(body))
    sections: dict[str, str] = {}
    for i, h in enumerate(headings):
        end = headings[i + 1].start() if i + 1 < len(headings) else len(body)
        title = h.group(1).strip().replace("’", "'")
        sections.setdefault(title.lower(), body[h.end():end])
    for name in ("Scope", "Do", "Don't"):
        if name.lower() not in sections:
            raise MissingSection(name)
    status = _as_str(front, "status", required=False) or "active"
    if status not in ("active", "retired"):
        raise InvalidField("status", status)
    return MetaSkill(
        id=_as_str(front, "id"),
        description=_as_str(front, "description", required=False),
        suite=_as_str(front, "suite"),
        status=status,
        scope=" ".join(sections["scope"].split()),
        do_rules=_bullets(sections["do"]),
        dont_rules=_bullets(sections["don't"]),
        raw_markdown=markdown,
    )


class MetaSkillRegistry:
    """All meta-skills ever registered; at most one active per suite."""

    def __init__(self) -> None:
        self._metas: list[MetaSkill] = []

    def register(self, meta: MetaSkill) -> MetaSkill:
        if meta.status == "active":
            self._metas = [
                _retire_meta(m) if m.suite == meta.suite and m.status == "active" else m
                for m in self._metas
            ]
        self._metas.append(meta)
        return meta

    def active(self, suite: str) -> MetaSkill | None:
        for m in reversed(self._metas):
            if m.suite == suite and m.status == "active":
                return m
        return None

    def all(self) -> list[MetaSkill]:
        return list(self._metas)


def _retire_meta(meta: MetaSkill) -> MetaSkill:
    retired = replace(meta, status="retired", raw_markdown="")
    return replace(retired, raw_markdown=render_meta_skill(retired))


def make_meta_skill(
    id: str, suite: str, description: str, scope: str, do_rules: Iterable[str], dont_rules: Iterable[str]
) -> MetaSkill:
    meta = MetaSkill(id, description, suite, "active", scope, tuple(do_rules), tuple(dont_rules))
    return replace(meta, raw_markdown=render_meta_skill(meta))


def default_meta_skill(suite: str = "default") -> MetaSkill:
    return make_meta_skill(
        id=f"default_{suite}",
        suite=suite,
        description=f"Authoring guidance for {suite} pattern-level skills.",
        scope="Short self-contained tasks graded by automatic checks.",
        do_rules=[
            "applies_when: name the observable task trait that triggers the skill, e.g. 'input list may be empty'",
            "key_insight: one sentence stating the idea that avoids the failure",
            "common_pitfalls: cite the failure modes seen in the cluster, one per item",
            "verify_before_returning: a concrete post-check the solver can run mentally",
            "signals_match: 2-4 lexical cue words that appear in matching tasks",
        ],
        dont_rules=[
            "Vague advice that would fit any task",
            "Third-party libraries or tools",
            "More than one failure pattern per skill",
        ],
    )


# --------------------------------------------------------------------------- bank


def _encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f8").tobytes()).decode("ascii")


def _decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8")


class Bank:
    """Ordered id -> Skill container. Skills are never removed."""

    def __init__(self, skills: Iterable[Skill] = ()) -> None:
        self._skills: dict[str, Skill] = {}
        for s in skills:
            self.add(s)

    def __len__(self) -> int:
        return len(self._skills)

    def __iter__(self) -> Iterator[Skill]:
        return iter(self._skills.values())

    def __contains__(self, skill_id: object) -> bool:
        return skill_id in self._skills

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Bank) and self.content_hash() == other.content_hash()

    def get(self, skill_id: str) -> Skill:
        try:
            return self._skills[skill_id]
        except KeyError:
            raise UnknownSkill(skill_id) from None

    def add(self, skill: Skill) -> Skill:
        if skill.id in self._skills:
            raise DuplicateSkill(skill.id)
        self._skills[skill.id] = skill
        return skill

    def set_status(self, skill_id: str, status: SkillStatus, *, at: str | None = None) -> Skill:
        updated = self.get(skill_id).with_status(status, at=at)
        self._skills[skill_id] = updated
        return updated

    def by_status(self, status: SkillStatus) -> list[Skill]:
        return [s for s in self._skills.values() if s.status is status]

    def active(self) -> list[Skill]:
        return self.by_status(SkillStatus.ACTIVE)

    def ids(self) -> list[str]:
        return list(self._skills)

    def copy(self) -> "Bank":
        b = Bank()
        b._skills = dict(self._skills)
        return b

    def to_json(self) -> str:
        records = []
        for s in self._skills.values():
            rec = s.to_dict()
            rec["embedding"] = _encode_vector(s.embedding) if s.embedding is not None else None
            records.append(rec)
        return json.dumps(records, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Bank":
        bank = cls()
        for rec in json.loads(text):
            emb = rec.pop("embedding", None)
            skill = skill_from_dict(rec)
            if emb is not None:
                skill = skill.with_embedding(_decode_vector(emb))
            bank.add(skill)
        return bank

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self._skills.values():
            h.update(s.yaml.encode())
            h.update(b"\x00")
        return h.hexdigest()
