from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from skillbank.evidence_log import Capsule, EvidenceLog  # noqa: E402
from skillbank.retrieval import HashingEmbedder  # noqa: E402
from skillbank.skill_model import Guidance, Skill, SkillStatus  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

GOLDEN = Path(__file__).parent / "golden"
TS = "2026-01-01T00:00:00.000000Z"


def make_skill(skill_id: str, *, status: SkillStatus = SkillStatus.ACTIVE, applies_when: str | None = None,
               created_at: str = TS, intent: str | None = None, signals: tuple[str, ...] = (),
               tags: tuple[str, ...] = ()) -> Skill:
    words = skill_id.replace("_", " ")
    return Skill(
        id=skill_id,
        name=words,
        version="v1",
        intent=intent or f"handle {words}",
        description=f"Skill about {words}.",
        guidance=Guidance(applies_when=applies_when or f"task involves {words}", key_insight=f"mind the {words}"),
        signals_match=signals,
        tags=tags,
        status=status,
        created_at=created_at,
        updated_at=created_at,
    )


def add_trials(log: EvidenceLog, skill_id: str, successes: int, failures: int, *, round_idx: int = 0,
               split: str = "eval") -> None:
    """Append synthetic capsules for one skill inside a committed round."""
    base = len(log.capsules())
    log.begin_round(round_idx)
    for i in range(successes + failures):
        log.append_capsule(Capsule(f"c-{skill_id}-{base + i}", f"t{i}", skill_id, split, round_idx,
                                   i < successes, "out", TS))
    log.commit_round(round_idx, {})


@pytest.fixture
def embedder() -> HashingEmbedder:
    return HashingEmbedder(dim=128, seed=3)


@pytest.fixture
def store():
    with EvidenceLog() as log:
        yield log
