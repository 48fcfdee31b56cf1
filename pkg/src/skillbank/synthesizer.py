"""Failure clusters -> new skills, and the slow-cadence meta-skill refresh."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Collection, Mapping, Sequence

from .backends.base import MalformedResponse, MetaOracle, OracleUnavailable, SynthOracle, Task
from .evidence_log import Capsule, Verdict
from .retrieval import Embedder, canonicalize, embed_skill, is_bank_duplicate, is_covered
from .skill_model import (
    Bank,
    MetaSkill,
    SkillStatus,
    Skill,
    ValidationError,
    OverBudget,
    parse_meta_skill,
    render_meta_skill,
    validate_skill,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailureCluster:
    canonical_pattern: str
    verdicts: tuple[Verdict, ...]
    capsules: tuple[Capsule, ...]

    @property
    def size(self) -> int:
        return len(self.verdicts)


@dataclass(frozen=True)
class SynthesisBudget:
    max_skills_per_round: int = 2
    char_budget: int = 1500
    resynth_retries: int = 2

    def __post_init__(self) -> None:
        if self.max_skills_per_round < 1 or self.char_budget < 1 or self.resynth_retries < 0:
            raise ValueError("synthesis budget values must be positive")


@dataclass
class SynthesisStats:
    oracle_calls: int = 0
    covered: list[str] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)
    invalid: list[str] = field(default_factory=list)


def build_clusters(
    verdicts: Sequence[Verdict],
    capsules: Mapping[str, Capsule],
    tau_canon: float,
    min_size: int,
    embedder: Embedder,
    *,
    attributions: Collection[str] | None = None,
) -> list[FailureCluster]:
    """Group windowed verdicts by canonical pattern.

    Clusters come back largest first; equal sizes keep the order in which
    their pattern first appeared in the window.
    """
    if attributions is not None:
        verdicts = [v for v in verdicts if v.attribution.value in attributions]
    if not verdicts:
        return []
    cmap = canonicalize([v.pattern for v in verdicts], tau_canon, embedder)
    groups: dict[str, list[Verdict]] = {}
    for v in verdicts:
        groups.setdefault(cmap[v.pattern], []).append(v)
    first_seen = {c: i for i, c in enumerate(groups)}
    clusters = [
        FailureCluster(c, tuple(vs), tuple(capsules[v.capsule_id] for v in vs if v.capsule_id in capsules))
        for c, vs in groups.items()
        if len(vs) >= min_size
    ]
    clusters.sort(key=lambda cl: (-cl.size, first_seen[cl.canonical_pattern]))
    return clusters


def cluster_digest(cluster: FailureCluster, tasks: Mapping[str, Task], char_cap: int = 800) -> str:
    lines = [f"pattern: {cluster.canonical_pattern}", f"failures: {cluster.size}"]
    for cap in cluster.capsules:
        task = tasks.get(cap.task_id)
        prompt = task.prompt if task else cap.task_id
        summary = f"task {cap.task_id}: {prompt}\nfailure: {cap.solver_output}"
        lines.append("- " + summary[:char_cap])
    return "\n".join(lines)


def bank_digest(active: Sequence[Skill]) -> str:
    return "\n".join(f"- {s.id}: {s.intent}" for s in active)


def _free_id(skill_id: str, taken: Collection[str]) -> str:
    if skill_id not in taken:
        return skill_id
    n = 2
    while f"{skill_id}_{n}" in taken:
        n += 1
    return f"{skill_id}_{n}"


def synthesize_round(
    clusters: Sequence[FailureCluster],
    meta: MetaSkill | None,
    bank: Bank,
    budget: SynthesisBudget,
    oracle: SynthOracle,
    embedder: Embedder,
    *,
    tasks: Mapping[str, Task] | None = None,
    cover_guard: bool = True,
    cover_threshold: float = 0.85,
    cover_surface: str = "applies_when",
    dedup_threshold: float = 0.85,
    capsule_char_cap: int = 800,
    now: Callable[[], str] | None = None,
    stats: SynthesisStats | None = None,
    reserved_ids: Collection[str] = (),
    dedup_scope: str = "bank",
) -> list[Skill]:
    """Author, vet and promote up to ``budget.max_skills_per_round`` skills.

    Promoted skills are added to ``bank`` as ACTIVE and returned. Invalid,
    over-budget (after retries) and duplicate outputs are skipped; only
    :class:`OracleUnavailable` escapes. ``reserved_ids`` are ids used by
    skills no longer in ``bank`` (e.g. dropped by a rollback); they are never
    reused so evidence stays attributable. ``dedup_scope`` "bank" compares
    candidates with every skill in the bank, DEPRECATED included, so a retired
    skill is not simply re-learned; "active" compares with ACTIVE skills only.
    """
    if dedup_scope not in ("bank", "active"):
        raise ValueError(f"unknown dedup scope {dedup_scope!r}")
    stats = stats if stats is not None else SynthesisStats()
    tasks = tasks or {}
    guidance = meta.authoring_guidance if meta is not None else ""
    promoted: list[Skill] = []
    for cluster in clusters:
        if len(promoted) >= budget.max_skills_per_round:
            break
        active = bank.active()
        if cover_guard and is_covered(cluster.canonical_pattern, active, cover_threshold, embedder, surface=cover_surface):
            stats.covered.append(cluster.canonical_pattern)
            continue
        digest = cluster_digest(cluster, tasks, capsule_char_cap)
        skill = None
        for attempt in range(budget.resynth_retries + 1):
            stats.oracle_calls += 1
            try:
                text = oracle.synthesize(guidance, digest, bank_digest(active), budget.char_budget)
                skill = validate_skill(text, budget.char_budget, now=now() if now else None, version=f"v{attempt + 1}")
                break
            except OverBudget as exc:
                log.info("resynth %r: %s", cluster.canonical_pattern, exc)
            except (ValidationError, MalformedResponse) as exc:
                log.warning("skipping cluster %r: %s", cluster.canonical_pattern, exc)
                break
        if skill is None:
            stats.invalid.append(cluster.canonical_pattern)
            continue
        skill = replace(skill, id=_free_id(skill.id, set(bank.ids()) | set(reserved_ids)))
        skill = embed_skill(skill, embedder)
        pool = list(bank) if dedup_scope == "bank" else active
        if is_bank_duplicate(skill, pool, dedup_threshold, embedder):
            stats.duplicates.append(skill.id)
            continue
        skill = skill.with_status(SkillStatus.ACTIVE)
        bank.add(skill)
        promoted.append(skill)
    return promoted


def verdict_digest(verdicts: Sequence[Verdict], limit: int = 20) -> str:
    counts = Counter(v.pattern for v in verdicts)
    return "\n".join(f"- {p} (x{n})" for p, n in counts.most_common(limit))


def meta_synthesize(
    verdicts: Sequence[Verdict],
    current: MetaSkill,
    cadence: int | None,
    round_idx: int,
    oracle: MetaOracle | None,
) -> MetaSkill | None:
    """Refresh the meta-skill every ``cadence`` rounds; None means unchanged.

    The schema-lock rules of ``current`` are carried over verbatim whatever
    the oracle returns; only the authoring prior can change.
    """
    if cadence is None or oracle is None or round_idx == 0 or round_idx % cadence:
        return None
    try:
        text = oracle.refresh(current.raw_markdown, verdict_digest(verdicts))
        proposed = parse_meta_skill(text)
    except (OracleUnavailable, MalformedResponse, ValidationError) as exc:
        log.warning("meta refresh at round %d skipped: %s", round_idx, exc)
        return None
    lock = current.schema_lock()
    lock_keys = {r.split(":", 1)[0].strip() for r in lock}
    prior = [r for r in proposed.do_rules if r.split(":", 1)[0].strip() not in lock_keys]
    new_id = re.sub(r"[^a-z0-9_]+", "_", f"{current.suite}_meta_r{round_idx}".lower())
    refreshed = MetaSkill(
        id=new_id,
        description=proposed.description or current.description,
        suite=current.suite,
        status="active",
        scope=proposed.scope or current.scope,
        do_rules=tuple(lock) + tuple(prior),
        dont_rules=proposed.dont_rules or current.dont_rules,
    )
    return replace(refreshed, raw_markdown=render_meta_skill(refreshed))
