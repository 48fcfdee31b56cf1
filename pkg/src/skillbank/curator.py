"""Outcome-driven retirement and active-cap enforcement."""

from __future__ import annotations

from dataclasses import dataclass, field

from .evidence_log import EvidenceLog
from .skill_model import Bank, InvalidTransition, Skill, SkillStatus, UnknownSkill


class NotDeprecated(InvalidTransition):
    pass


@dataclass(frozen=True)
class CuratorConfig:
    n_min: int = 100
    tau: float = 0.10
    cap: int = 50

    def __post_init__(self) -> None:
        if self.n_min < 1 or self.cap < 1:
            raise ValueError("n_min and cap must be >= 1")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")


@dataclass
class CurationReport:
    retired: list[tuple[str, int, float]] = field(default_factory=list)
    evicted: list[tuple[str, float | None]] = field(default_factory=list)
    active_after: int = 0

    def merge(self, other: "CurationReport") -> "CurationReport":
        return CurationReport(self.retired + other.retired, self.evicted + other.evicted, other.active_after)

    def to_dict(self) -> dict:
        return {
            "retired": [list(r) for r in self.retired],
            "evicted": [list(e) for e in self.evicted],
            "active_after": self.active_after,
        }


def retirement_pass(bank: Bank, log: EvidenceLog, cfg: CuratorConfig, *, at: str | None = None) -> CurationReport:
    report = CurationReport()
    for skill in bank.active():
        stats = log.contribution(skill.id)
        c_hat = stats.c_hat
        # zero-trial skills never reach the floor, so c_hat is defined here
        if stats.trials >= cfg.n_min and c_hat is not None and c_hat <= -cfg.tau:
            bank.set_status(skill.id, SkillStatus.DEPRECATED, at=at)
            report.retired.append((skill.id, stats.trials, c_hat))
    report.active_after = len(bank.active())
    return report


def eviction_key(skill: Skill, c_hat: float | None) -> tuple:
    # unvetted skills rank lowest; ties go to the older skill
    return (c_hat is not None, c_hat if c_hat is not None else 0.0, skill.created_at, skill.id)


def enforce_cap(bank: Bank, log: EvidenceLog, cap: int, *, at: str | None = None) -> CurationReport:
    report = CurationReport()
    active = bank.active()
    excess = len(active) - cap
    if excess > 0:
        ranked = sorted(active, key=lambda s: eviction_key(s, log.contribution(s.id).c_hat))
        for skill in ranked[:excess]:
            c_hat = log.contribution(skill.id).c_hat
            bank.set_status(skill.id, SkillStatus.DEPRECATED, at=at)
            report.evicted.append((skill.id, c_hat))
    report.active_after = len(bank.active())
    return report


def curate(bank: Bank, log: EvidenceLog, cfg: CuratorConfig, *, at: str | None = None) -> CurationReport:
    """Retirement first, then the cap, so the cap only evicts what retirement left."""
    return retirement_pass(bank, log, cfg, at=at).merge(enforce_cap(bank, log, cfg.cap, at=at))


def reinstate(skill_id: str, bank: Bank, *, at: str | None = None) -> Bank:
    skill = bank.get(skill_id)  # raises UnknownSkill
    if skill.status is not SkillStatus.DEPRECATED:
        raise NotDeprecated(skill_id, skill.status, SkillStatus.ACTIVE)
    bank.set_status(skill_id, SkillStatus.ACTIVE, at=at)
    return bank


__all__ = [
    "CuratorConfig",
    "CurationReport",
    "NotDeprecated",
    "UnknownSkill",
    "curate",
    "enforce_cap",
    "reinstate",
    "retirement_pass",
]
