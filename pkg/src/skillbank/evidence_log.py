"""Append-only evidence store (capsules, verdicts, skills, snapshots) on SQLite.

Each round's writes go into one transaction that commits together with the
round's report row, so a crash mid-round leaves no partial round behind.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .skill_model import Bank, Skill, SkillStatus

SPLITS = ("train", "eval")


class Attribution(str, Enum):
    HELPED = "HELPED"
    HURT = "HURT"
    NEUTRAL = "NEUTRAL"
    INAPPLICABLE = "INAPPLICABLE"


class Confidence(str, Enum):
    LOW = "LOW"
    MEDIUM = "MEDIUM"
    HIGH = "HIGH"


class EvidenceError(Exception):
    pass


class DuplicateId(EvidenceError):
    pass


class StorageFailure(EvidenceError):
    pass


class UnknownCapsule(EvidenceError):
    pass


class CapsuleNotAFailure(EvidenceError):
    pass


class MissingSnapshot(EvidenceError):
    pass


@dataclass(frozen=True)
class Capsule:
    capsule_id: str
    task_id: str
    skill_id: str | None
    split: str
    round: int
    passed: bool
    solver_output: str
    created_at: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.round < 0:
            raise ValueError("round must be >= 0")


@dataclass(frozen=True)
class Verdict:
    verdict_id: str
    capsule_id: str
    attribution: Attribution
    pattern: str
    confidence: Confidence
    reason: str

    def __post_init__(self) -> None:
        # closed label sets; accept raw strings from oracles
        object.__setattr__(self, "attribution", Attribution(self.attribution))
        object.__setattr__(self, "confidence", Confidence(self.confidence))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["attribution"] = self.attribution.value
        d["confidence"] = self.confidence.value
        return d


@dataclass(frozen=True)
class ContributionStats:
    skill_id: str
    trials: int
    successes: int
    failures: int

    @property
    def c_hat(self) -> float | None:
        """(successes - failures) / trials; None when there is no evidence."""
        if self.trials == 0:
            return None
        return (self.successes - self.failures) / self.trials


@dataclass(frozen=True)
class OperationalCounters:
    solver_calls: int
    critic_calls: int
    synth_calls: int
    router_engagement_pct: float
    born: int
    retired: int
    active: int


_SCHEMA = """
CREATE TABLE IF NOT EXISTS capsules (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    capsule_id TEXT NOT NULL UNIQUE,
    task_id TEXT NOT NULL,
    skill_id TEXT,
    split TEXT NOT NULL,
    round INTEGER NOT NULL,
    passed INTEGER NOT NULL,
    solver_output TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS capsules_round ON capsules(round);
CREATE INDEX IF NOT EXISTS capsules_skill ON capsules(skill_id);
CREATE TABLE IF NOT EXISTS verdicts (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    verdict_id TEXT NOT NULL UNIQUE,
    capsule_id TEXT NOT NULL REFERENCES capsules(capsule_id),
    round INTEGER NOT NULL,
    attribution TEXT NOT NULL,
    pattern TEXT NOT NULL,
    confidence TEXT NOT NULL,
    reason TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS verdicts_round ON verdicts(round);
CREATE TABLE IF NOT EXISTS skills (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    skill_id TEXT NOT NULL,
    round INTEGER NOT NULL,
    event TEXT NOT NULL,
    status TEXT NOT NULL,
    yaml TEXT NOT NULL,
    embedding TEXT
);
CREATE TABLE IF NOT EXISTS bank_blobs (
    content_hash TEXT PRIMARY KEY,
    bank_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS snapshots (
    snapshot_id TEXT PRIMARY KEY,
    round INTEGER NOT NULL,
    kind TEXT NOT NULL,
    content_hash TEXT NOT NULL REFERENCES bank_blobs(content_hash)
);
CREATE TABLE IF NOT EXISTS events (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    round INTEGER NOT NULL,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS rounds (
    round INTEGER PRIMARY KEY,
    report TEXT NOT NULL
);
"""

_ROUND_TABLES = ("capsules", "verdicts", "skills", "snapshots", "events")


class EvidenceLog:
    """Durable, append-only store of evidence for one run.

    Args:
        path: SQLite file path, or ``":memory:"``.
        contribution_splits: which capsule splits feed contribution(); both by
            default, ``("train",)`` for the train-only sensitivity variant.
    """

    def __init__(self, path: str | Path = ":memory:", *, contribution_splits: Sequence[str] = SPLITS):
        self.path = str(path)
        self.contribution_splits = tuple(contribution_splits)
        self._lock = threading.RLock()
        try:
            self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            self._db.executescript(_SCHEMA)
        except sqlite3.Error as exc:
            raise StorageFailure(str(exc)) from exc
        self._open_round: int | None = None
        self._recover()
        self._rebuild_tallies()

    # ------------------------------------------------------------------ lifecycle

    def close(self) -> None:
        with self._lock:
            if self._open_round is not None:
                self.abort_round()
            self._db.close()

    def __enter__(self) -> "EvidenceLog":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _recover(self) -> None:
        # drop anything newer than the last committed round boundary
        last = self.last_committed_round()
        if last is None:
            return
        with self._lock:
            self._db.execute("BEGIN")
            for table in _ROUND_TABLES:
                self._db.execute(f"DELETE FROM {table} WHERE round > ?", (last,))
            self._db.execute("COMMIT")

    def last_committed_round(self) -> int | None:
        row = self._db.execute("SELECT MAX(round) FROM rounds").fetchone()
        return row[0]

    def begin_round(self, round_idx: int) -> None:
        with self._lock:
            if self._open_round is not None:
                raise StorageFailure(f"round {self._open_round} still open")
            self._db.execute("BEGIN")
            self._open_round = round_idx

    def commit_round(self, round_idx: int, report: dict[str, Any]) -> None:
        with self._lock:
            if self._open_round != round_idx:
                raise StorageFailure(f"round {round_idx} is not open")
            self._db.execute(
                "INSERT INTO rounds(round, report) VALUES (?, ?)",
                (round_idx, json.dumps(report, sort_keys=True)),
            )
            self._db.execute("COMMIT")
            self._open_round = None

    def abort_round(self) -> None:
        with self._lock:
            if self._open_round is None:
                return
            self._db.execute("ROLLBACK")
            self._open_round = None
            self._rebuild_tallies()

    # ------------------------------------------------------------------ appends

    def append_capsule(self, c: Capsule) -> str:
        with self._lock:
            try:
                self._db.execute(
                    "INSERT INTO capsules(capsule_id, task_id, skill_id, split, round, passed,"
                    " solver_output, created_at) VALUES (?,?,?,?,?,?,?,?)",
                    (c.capsule_id, c.task_id, c.skill_id, c.split, c.round, int(c.passed),
                     c.solver_output, c.created_at),
                )
            except sqlite3.IntegrityError as exc:
                raise DuplicateId(c.capsule_id) from exc
            except sqlite3.Error as exc:
                raise StorageFailure(str(exc)) from exc
            if c.skill_id is not None and c.split in self.contribution_splits:
                counts = self._tally[c.skill_id]
                counts[0 if c.passed else 1] += 1
        return c.capsule_id

    def append_verdict(self, v: Verdict) -> str:
        with self._lock:
            row = self._db.execute(
                "SELECT split, passed, round FROM capsules WHERE capsule_id = ?", (v.capsule_id,)
            ).fetchone()
            if row is None:
                raise UnknownCapsule(v.capsule_id)
            split, passed, round_idx = row
            if split != "train" or passed:
                raise CapsuleNotAFailure(v.capsule_id)
            try:
                self._db.execute(
                    "INSERT INTO verdicts(verdict_id, capsule_id, round, attribution, pattern,"
                    " confidence, reason) VALUES (?,?,?,?,?,?,?)",
                    (v.verdict_id, v.capsule_id, round_idx, v.attribution.value, v.pattern,
                     v.confidence.value, v.reason),
                )
            except sqlite3.IntegrityError as exc:
                raise DuplicateId(v.verdict_id) from exc
        return v.verdict_id

    def record_skill(self, skill: Skill, round_idx: int, event: str) -> None:
        emb = json.dumps(skill.embedding.tolist()) if skill.embedding is not None else None
        with self._lock:
            self._db.execute(
                "INSERT INTO skills(skill_id, round, event, status, yaml, embedding) VALUES (?,?,?,?,?,?)",
                (skill.id, round_idx, event, skill.status.value, skill.yaml, emb),
            )

    def record_event(self, round_idx: int, kind: str, payload: dict[str, Any]) -> None:
        with self._lock:
            self._db.execute(
                "INSERT INTO events(round, kind, payload) VALUES (?,?,?)",
                (round_idx, kind, json.dumps(payload, sort_keys=True)),
            )

    # ------------------------------------------------------------------ snapshots

    def save_snapshot(self, bank: Bank, round_idx: int, kind: str = "round") -> str:
        snapshot_id = f"snap-{round_idx:05d}-{kind}"
        digest = bank.content_hash()
        with self._lock:
            if not self._has_blob(digest):
                self._db.execute(
                    "INSERT INTO bank_blobs(content_hash, bank_json) VALUES (?, ?)",
                    (digest, bank.to_json()),
                )
            try:
                self._db.execute(
                    "INSERT INTO snapshots(snapshot_id, round, kind, content_hash) VALUES (?,?,?,?)",
                    (snapshot_id, round_idx, kind, digest),
                )
            except sqlite3.IntegrityError as exc:
                raise DuplicateId(snapshot_id) from exc
        return snapshot_id

    def _has_blob(self, digest: str) -> bool:
        return self._db.execute(
            "SELECT 1 FROM bank_blobs WHERE content_hash = ?", (digest,)
        ).fetchone() is not None

    def restore_bank(self, snapshot_id: str) -> Bank:
        row = self._db.execute(
            "SELECT b.bank_json FROM snapshots s JOIN bank_blobs b USING(content_hash)"
            " WHERE s.snapshot_id = ?",
            (snapshot_id,),
        ).fetchone()
        if row is None:
            raise MissingSnapshot(snapshot_id)
        return Bank.from_json(row[0])

    def snapshot_for_round(self, round_idx: int, kind: str = "round") -> str:
        snapshot_id = f"snap-{round_idx:05d}-{kind}"
        if self._db.execute("SELECT 1 FROM snapshots WHERE snapshot_id = ?", (snapshot_id,)).fetchone() is None:
            raise MissingSnapshot(snapshot_id)
        return snapshot_id

    def snapshots(self) -> list[tuple[str, int, str]]:
        return self._db.execute("SELECT snapshot_id, round, kind FROM snapshots ORDER BY round, snapshot_id").fetchall()

    # ------------------------------------------------------------------ reads

    def get_capsule(self, capsule_id: str) -> Capsule:
        row = self._db.execute(
            "SELECT capsule_id, task_id, skill_id, split, round, passed, solver_output, created_at"
            " FROM capsules WHERE capsule_id = ?",
            (capsule_id,),
        ).fetchone()
        if row is None:
            raise UnknownCapsule(capsule_id)
        return _capsule(row)

    def capsules(self, *, round_idx: int | None = None, skill_id: str | None = None) -> list[Capsule]:
        sql = ("SELECT capsule_id, task_id, skill_id, split, round, passed, solver_output, created_at"
               " FROM capsules")
        clauses, params = [], []
        if round_idx is not None:
            clauses.append("round = ?")
            params.append(round_idx)
        if skill_id is not None:
            clauses.append("skill_id = ?")
            params.append(skill_id)
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        return [_capsule(r) for r in self._db.execute(sql + " ORDER BY seq", params)]

    def verdicts(self) -> list[Verdict]:
        rows = self._db.execute(
            "SELECT verdict_id, capsule_id, attribution, pattern, confidence, reason FROM verdicts ORDER BY seq"
        )
        return [Verdict(*r) for r in rows]

    def verdicts_in_window(self, current_round: int, window: int) -> list[Verdict]:
        """Verdicts whose capsule round lies in [current_round - window + 1, current_round]."""
        if window < 1:
            raise ValueError("window must be >= 1")
        lo = max(0, current_round - window + 1)
        rows = self._db.execute(
            "SELECT verdict_id, capsule_id, attribution, pattern, confidence, reason FROM verdicts"
            " WHERE round BETWEEN ? AND ? ORDER BY seq",
            (lo, current_round),
        )
        return [Verdict(*r) for r in rows]

    def contribution(self, skill_id: str) -> ContributionStats:
        s, f = self._tally.get(skill_id, (0, 0))
        return ContributionStats(skill_id, s + f, s, f)

    def contributions(self, skill_ids: Iterable[str]) -> dict[str, ContributionStats]:
        return {sid: self.contribution(sid) for sid in skill_ids}

    def _rebuild_tallies(self) -> None:
        self._tally: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        marks = ",".join("?" * len(self.contribution_splits))
        rows = self._db.execute(
            f"SELECT skill_id, passed, COUNT(*) FROM capsules WHERE skill_id IS NOT NULL"
            f" AND split IN ({marks}) GROUP BY skill_id, passed",
            self.contribution_splits,
        )
        for skill_id, passed, n in rows:
            self._tally[skill_id][0 if passed else 1] += n

    def count_capsules(self, *, split: str | None = None) -> int:
        if split is None:
            return self._db.execute("SELECT COUNT(*) FROM capsules").fetchone()[0]
        return self._db.execute("SELECT COUNT(*) FROM capsules WHERE split = ?", (split,)).fetchone()[0]

    def count_events(self, kind: str) -> int:
        return self._db.execute("SELECT COUNT(*) FROM events WHERE kind = ?", (kind,)).fetchone()[0]

    def events(self, kind: str | None = None) -> list[tuple[int, str, dict[str, Any]]]:
        sql, params = "SELECT round, kind, payload FROM events", ()
        if kind is not None:
            sql, params = sql + " WHERE kind = ?", (kind,)
        return [(r, k, json.loads(p)) for r, k, p in self._db.execute(sql + " ORDER BY seq", params)]

    def skill_ids_ever(self) -> set[str]:
        return {r[0] for r in self._db.execute("SELECT DISTINCT skill_id FROM skills")}

    def round_reports(self) -> list[dict[str, Any]]:
        return [json.loads(r[0]) for r in self._db.execute("SELECT report FROM rounds ORDER BY round")]

    def operational_counters(self, bank: Bank | None = None) -> OperationalCounters:
        solver = self.count_capsules()
        critic = self._db.execute("SELECT COUNT(*) FROM verdicts").fetchone()[0]
        eval_total, eval_routed = self._db.execute(
            "SELECT COUNT(*), COUNT(skill_id) FROM capsules WHERE split = 'eval'"
        ).fetchone()
        pct = 100.0 * eval_routed / eval_total if eval_total else 0.0
        born = self.count_events("born")
        retired = active = 0
        if bank is not None:
            retired = len(bank.by_status(SkillStatus.DEPRECATED))
            active = len(bank.active())
        return OperationalCounters(
            solver_calls=solver,
            critic_calls=critic,
            synth_calls=self.count_events("synth_call"),
            router_engagement_pct=pct,
            born=born,
            retired=retired,
            active=active,
        )

    # ------------------------------------------------------------------ export

    def iter_records(self, up_to_round: int | None = None) -> Iterator[dict[str, Any]]:
        """Capsules then verdicts, round by round, each in append order."""
        rounds = [r[0] for r in self._db.execute(
            "SELECT DISTINCT round FROM capsules UNION SELECT DISTINCT round FROM verdicts ORDER BY 1"
        )]
        for r in rounds:
            if up_to_round is not None and r > up_to_round:
                break
            for c in self.capsules(round_idx=r):
                yield asdict(c)
            rows = self._db.execute(
                "SELECT verdict_id, capsule_id, attribution, pattern, confidence, reason FROM verdicts"
                " WHERE round = ? ORDER BY seq",
                (r,),
            )
            for row in rows:
                yield Verdict(*row).to_dict()

    def dump_jsonl(self, up_to_round: int | None = None) -> Iterator[str]:
        for rec in self.iter_records(up_to_round):
            yield json.dumps(rec, sort_keys=False, separators=(",", ":"))

    def digest(self, up_to_round: int | None = None) -> str:
        h = hashlib.sha256()
        for line in self.dump_jsonl(up_to_round):
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


def _capsule(row: Sequence[Any]) -> Capsule:
    cid, task_id, skill_id, split, round_idx, passed, output, created = row
    return Capsule(cid, task_id, skill_id, split, round_idx, bool(passed), output, created)
