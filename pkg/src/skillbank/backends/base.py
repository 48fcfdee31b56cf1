"""Oracle interfaces shared by the loop and every backend."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

from ..evidence_log import Capsule
from ..skill_model import Skill


class OracleError(Exception):
    pass


class OracleUnavailable(OracleError):
    """The backend cannot answer at all; the current round is aborted."""


class GateUnavailable(OracleUnavailable):
    pass


class MalformedResponse(OracleError):
    """One response was unusable; the caller skips that item and continues."""


@dataclass(frozen=True)
class Task:
    task_id: str
    prompt: str
    split: str
    suite: str = "default"

    def __post_init__(self) -> None:
        if self.split not in ("train", "eval"):
            raise ValueError(f"split must be train or eval, got {self.split!r}")


@dataclass(frozen=True)
class CallContext:
    """Identifies one oracle call so simulated backends can derive their randomness."""

    run_seed: int
    round: int
    split: str


@dataclass(frozen=True)
class VerdictDraft:
    attribution: str
    pattern: str
    confidence: str
    reason: str


class Solver(Protocol):
    def solve(self, task: Task, skill: Skill | None, ctx: CallContext) -> str: ...


class Grader(Protocol):
    def grade(self, task: Task, output: str, ctx: CallContext) -> bool: ...


class Critic(Protocol):
    def critique(self, task: Task, skill: Skill | None, capsule: Capsule, ctx: CallContext) -> VerdictDraft: ...


class SynthOracle(Protocol):
    def synthesize(self, guidance_text: str, cluster_digest: str, bank_digest: str, char_budget: int) -> str: ...


class GateOracle(Protocol):
    def adjudicate(self, task: Task, candidates: Sequence[Skill]) -> str | None: ...


class MetaOracle(Protocol):
    def refresh(self, current_markdown: str, verdict_digest: str) -> str: ...


@dataclass
class Oracles:
    solver: Solver
    grader: Grader
    critic: Critic
    synth: SynthOracle
    gate: GateOracle
    embedder: object
    meta: MetaOracle | None = None
