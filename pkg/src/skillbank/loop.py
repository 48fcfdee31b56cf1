"""The five-phase round, rollback with a persistence gate, run configuration and metrics."""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from .backends.base import CallContext, MalformedResponse, Oracles, Task
from .curator import CuratorConfig, CurationReport, curate
from .evidence_log import Capsule, EvidenceLog, Verdict
from .retrieval import SkillIndex
from .router import RouterMode, route
from .skill_model import Bank, MetaSkill, MetaSkillRegistry, Skill, SkillStatus, format_timestamp, utc_now
from .synthesizer import SynthesisBudget, SynthesisStats, build_clusters, meta_synthesize, synthesize_round

log = logging.getLogger(__name__)

# regression boundary slack: eval == best - tau_rb is not a regression
_RB_EPS = 1e-12


class ConfigError(ValueError):
    pass


class UnknownAblation(ConfigError):
    pass


class CurveTooShort(ValueError):
    pass


class EmptyCurve(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 100
    seeds: tuple[int, ...] = (42, 7, 13)
    W: int = 6
    K: int = 10
    cutoff: int = 20
    tau_canon: float = 0.85
    cover_threshold: float = 0.85
    dedup_threshold: float = 0.85
    char_budget: int = 1500
    max_skills_per_round: int = 2
    min_cluster: int = 3
    N_min: int = 100
    tau: float = 0.10
    cap: int = 50
    tau_rb: float = 0.10
    rb_persistence: int = 5
    router_mode: RouterMode = RouterMode.DEFAULT
    meta_cadence: int | None = None
    cover_guard_enabled: bool = True
    meta_skill_enabled: bool = True
    # operational knobs outside the published table
    suite: str = "default"
    resynth_retries: int = 2
    bootstrap_trials: int = 10
    capsule_char_cap: int = 800
    parallelism: int = 8
    contribution_splits: tuple[str, ...] = ("train", "eval")
    cover_surface: str = "applies_when"
    dedup_scope: str = "bank"
    verdict_attributions: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "router_mode", RouterMode(self.router_mode))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "contribution_splits", tuple(self.contribution_splits))
        if self.verdict_attributions is not None:
            object.__setattr__(self, "verdict_attributions", tuple(self.verdict_attributions))
        positive = ("rounds", "W", "K", "char_budget", "max_skills_per_round", "min_cluster", "N_min", "cap",
                    "rb_persistence", "parallelism")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.cutoff < 0:
            raise ConfigError("cutoff must be >= 0")
        for name in ("tau_canon", "cover_threshold", "dedup_threshold"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if not 0 <= self.tau <= 1 or not 0 <= self.tau_rb <= 1:
            raise ConfigError("tau and tau_rb must lie in [0, 1]")
        if self.meta_cadence is not None and self.meta_cadence < 1:
            raise ConfigError("meta_cadence must be >= 1 or null")
        if self.cover_surface not in ("applies_when", "yaml"):
            raise ConfigError("cover_surface must be applies_when or yaml")
        if self.dedup_scope not in ("bank", "active"):
            raise ConfigError("dedup_scope must be bank or active")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["router_mode"] = self.router_mode.value
        d["seeds"] = list(self.seeds)
        d["contribution_splits"] = list(self.contribution_splits)
        if self.verdict_attributions is not None:
            d["verdict_attributions"] = list(self.verdict_attributions)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def override(self, **changes: Any) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def curator(self) -> CuratorConfig:
        return CuratorConfig(n_min=self.N_min, tau=self.tau, cap=self.cap)

    def synthesis_budget(self) -> SynthesisBudget:
        return SynthesisBudget(self.max_skills_per_round, self.char_budget, self.resynth_retries)


ABLATIONS: dict[str, dict[str, Any]] = {
    "A1": {"router_mode": "FORCED_NONE"},
    "A2": {"router_mode": "RETRIEVAL_ONLY"},
    "A3": {"meta_skill_enabled": False},
    "A4": {"N_min": 20, "tau": 0.0},
    "A5": {"tau_canon": 1.0},
    "A6": {"cover_guard_enabled": False},
    "A7": {"cap": 100},
    "A8": {"meta_cadence": 10},
}


def apply_ablation(base: RunConfig, name: str) -> RunConfig:
    try:
        changes = ABLATIONS[name.upper()]
    except KeyError:
        raise UnknownAblation(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}") from None
    return base.override(**changes)


def config_diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[Any, Any]]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {p} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"config {p} must be a mapping")
    return RunConfig.from_dict(data)


# --------------------------------------------------------------------------- clocks


class LogicalClock:
    """Deterministic timestamps: a fixed start plus one microsecond per tick."""

    def __init__(self, start: datetime = datetime(2026, 1, 1, tzinfo=timezone.utc)):
        self._t = start
        self._step = timedelta(microseconds=1)

    def __call__(self) -> str:
        self._t += self._step
        return format_timestamp(self._t)


# --------------------------------------------------------------------------- state & results


@dataclass(frozen=True)
class RollbackTracker:
    best_eval_pass1: float | None = None
    best_round: int | None = None
    consecutive_regressions: int = 0


@dataclass(frozen=True)
class RollbackDecision:
    restore: bool
    best_round: int | None = None


NO_ROLLBACK = RollbackDecision(False)


def rollback_check(
    tracker: RollbackTracker, round_idx: int, eval_pass1: float, tau_rb: float, persistence: int
) -> tuple[RollbackDecision, RollbackTracker]:
    """Update the running best, then count strict regressions below best - tau_rb.

    The counter resets on any non-regressing round and after a restore.
    """
    if tracker.best_eval_pass1 is None or eval_pass1 > tracker.best_eval_pass1:
        return NO_ROLLBACK, RollbackTracker(eval_pass1, round_idx, 0)
    if tracker.best_eval_pass1 - eval_pass1 > tau_rb + _RB_EPS:
        count = tracker.consecutive_regressions + 1
        if count >= persistence:
            return RollbackDecision(True, tracker.best_round), dataclasses.replace(tracker, consecutive_regressions=0)
        return NO_ROLLBACK, dataclasses.replace(tracker, consecutive_regressions=count)
    return NO_ROLLBACK, dataclasses.replace(tracker, consecutive_regressions=0)


@dataclass
class RoundState:
    round: int
    bank: Bank
    config: RunConfig
    rng_seed: int
    metas: MetaSkillRegistry = field(default_factory=MetaSkillRegistry)
    rollback: RollbackTracker = field(default_factory=RollbackTracker)

    @property
    def best_eval_pass1(self) -> float | None:
        return self.rollback.best_eval_pass1

    @property
    def best_round(self) -> int | None:
        return self.rollback.best_round

    @property
    def consecutive_regressions(self) -> int:
        return self.rollback.consecutive_regressions


@dataclass(frozen=True)
class RoundResult:
    round: int
    eval_pass1: float
    train_pass1: float
    skills_born: int
    skills_retired: int
    active_count: int
    router_engagement: float
    rollback_fired: bool
    curation: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def initial_state(config: RunConfig, seed: int, *, bank: Bank | None = None, meta: MetaSkill | None = None) -> RoundState:
    metas = MetaSkillRegistry()
    if meta is not None:
        metas.register(meta)
    return RoundState(round=0, bank=bank.copy() if bank else Bank(), config=config, rng_seed=seed, metas=metas)


# --------------------------------------------------------------------------- round


def _copy_registry(reg: MetaSkillRegistry) -> MetaSkillRegistry:
    out = MetaSkillRegistry()
    out._metas = reg.all()
    return out


def _run_pass(
    tasks: Sequence[Task],
    eligible: Sequence[Skill],
    state: RoundState,
    oracles: Oracles,
    split: str,
    clock: Callable[[], str],
) -> list[tuple[Task, Skill | None, bool, str]]:
    cfg = state.config
    ctx = CallContext(state.rng_seed, state.round, split)
    index = SkillIndex(eligible, oracles.embedder) if eligible and cfg.router_mode is not RouterMode.FORCED_NONE else None
    by_id = {s.id: s for s in eligible}

    def work(task: Task) -> tuple[Task, Skill | None, bool, str]:
        decision = route(task, eligible, cfg.router_mode, cfg.cutoff, cfg.K, oracles.gate, oracles.embedder, index=index)
        skill = by_id.get(decision.chosen) if decision.chosen else None
        output = oracles.solver.solve(task, skill, ctx)
        return task, skill, bool(oracles.grader.grade(task, output, ctx)), output

    if cfg.parallelism > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            return list(pool.map(work, tasks))
    return [work(t) for t in tasks]


def run_round(
    state: RoundState,
    suite: Sequence[Task],
    oracles: Oracles,
    log_store: EvidenceLog,
    clock: Callable[[], str] = utc_now,
) -> tuple[RoundState, RoundResult]:
    """Eval, train, critic, synthesize, curate (+ meta refresh, rollback).

    Any exception aborts the round: the store transaction is rolled back and
    the caller's ``state`` is untouched.
    """
    cfg = state.config
    r = state.round
    bank = state.bank.copy()
    metas = _copy_registry(state.metas)
    tasks_by_id = {t.task_id: t for t in suite}
    eval_tasks = sorted((t for t in suite if t.split == "eval"), key=lambda t: t.task_id)
    train_tasks = sorted((t for t in suite if t.split == "train"), key=lambda t: t.task_id)

    log_store.begin_round(r)
    try:
        # 1. eval: ACTIVE only
        eval_out = _run_pass(eval_tasks, bank.active(), state, oracles, "eval", clock)
        eval_caps = _append_capsules(log_store, eval_out, "eval", r, clock)

        # 2. train: young CANDIDATE skills are routable too
        eligible = bank.active() + [
            s for s in bank.by_status(SkillStatus.CANDIDATE)
            if log_store.contribution(s.id).trials < cfg.bootstrap_trials
        ]
        train_out = _run_pass(train_tasks, eligible, state, oracles, "train", clock)
        train_caps = _append_capsules(log_store, train_out, "train", r, clock)

        # 3. critic on train failures; nothing to attribute when routing is forced off
        if cfg.router_mode is not RouterMode.FORCED_NONE:
            ctx = CallContext(state.rng_seed, r, "train")
            for (task, skill, passed, _), cap in zip(train_out, train_caps):
                if passed:
                    continue
                try:
                    draft = oracles.critic.critique(task, skill, cap, ctx)
                    verdict = Verdict(f"v-{cap.capsule_id}", cap.capsule_id, draft.attribution,
                                      draft.pattern.strip(), draft.confidence, draft.reason)
                except (MalformedResponse, ValueError) as exc:
                    log.warning("critic output for %s dropped: %s", cap.capsule_id, exc)
                    continue
                if not verdict.pattern:
                    continue
                log_store.append_verdict(verdict)

        # 4. synthesize
        window = log_store.verdicts_in_window(r, cfg.W)
        capsules = {v.capsule_id: log_store.get_capsule(v.capsule_id) for v in window}
        clusters = build_clusters(window, capsules, cfg.tau_canon, cfg.min_cluster, oracles.embedder,
                                  attributions=cfg.verdict_attributions)
        meta = metas.active(cfg.suite) if cfg.meta_skill_enabled else None
        stats = SynthesisStats()
        born = synthesize_round(
            clusters, meta, bank, cfg.synthesis_budget(), oracles.synth, oracles.embedder,
            tasks=tasks_by_id, cover_guard=cfg.cover_guard_enabled, cover_threshold=cfg.cover_threshold,
            cover_surface=cfg.cover_surface, dedup_threshold=cfg.dedup_threshold,
            capsule_char_cap=cfg.capsule_char_cap, now=clock, stats=stats,
            reserved_ids=log_store.skill_ids_ever(), dedup_scope=cfg.dedup_scope,
        )
        for _ in range(stats.oracle_calls):
            log_store.record_event(r, "synth_call", {})
        for skill in born:
            log_store.record_skill(skill, r, "born")
            log_store.record_event(r, "born", {"skill_id": skill.id})

        # 5. curate
        report: CurationReport = curate(bank, log_store, cfg.curator(), at=clock())
        for sid, trials, c_hat in report.retired:
            log_store.record_skill(bank.get(sid), r, "retired")
            log_store.record_event(r, "retired", {"skill_id": sid, "trials": trials, "c_hat": c_hat})
        for sid, c_hat in report.evicted:
            log_store.record_skill(bank.get(sid), r, "evicted")
            log_store.record_event(r, "evicted", {"skill_id": sid, "c_hat": c_hat})

        current_meta = metas.active(cfg.suite)
        if current_meta is not None:
            refreshed = meta_synthesize(window, current_meta, cfg.meta_cadence, r, oracles.meta)
            if refreshed is not None:
                metas.register(refreshed)
                log_store.record_event(r, "meta_registered", {"meta_id": refreshed.id})

        log_store.save_snapshot(bank, r)

        n_eval = len(eval_caps)
        eval_pass1 = sum(c.passed for c in eval_caps) / n_eval if n_eval else 0.0
        train_pass1 = sum(c.passed for c in train_caps) / len(train_caps) if train_caps else 0.0
        engagement = sum(c.skill_id is not None for c in eval_caps) / n_eval if n_eval else 0.0

        decision, tracker = rollback_check(state.rollback, r, eval_pass1, cfg.tau_rb, cfg.rb_persistence)
        if decision.restore:
            log_store.save_snapshot(bank, r, "archive")
            bank = log_store.restore_bank(log_store.snapshot_for_round(decision.best_round))
            log_store.record_event(r, "rollback", {"restored_round": decision.best_round})

        result = RoundResult(
            round=r,
            eval_pass1=eval_pass1,
            train_pass1=train_pass1,
            skills_born=len(born),
            skills_retired=len(report.retired) + len(report.evicted),
            active_count=len(bank.active()),
            router_engagement=engagement,
            rollback_fired=decision.restore,
            curation=report.to_dict(),
        )
        log_store.commit_round(r, result.to_dict())
    except BaseException:
        log_store.abort_round()
        raise

    new_state = RoundState(round=r + 1, bank=bank, config=cfg, rng_seed=state.rng_seed, metas=metas, rollback=tracker)
    return new_state, result


def _append_capsules(
    log_store: EvidenceLog,
    outcomes: Iterable[tuple[Task, Skill | None, bool, str]],
    split: str,
    round_idx: int,
    clock: Callable[[], str],
) -> list[Capsule]:
    caps = []
    for task, skill, passed, output in outcomes:
        cap = Capsule(
            capsule_id=f"c-{round_idx:05d}-{split}-{task.task_id}",
            task_id=task.task_id,
            skill_id=skill.id if skill else None,
            split=split,
            round=round_idx,
            passed=passed,
            solver_output=output,
            created_at=clock(),
        )
        log_store.append_capsule(cap)
        caps.append(cap)
    return caps


def run_loop(
    config: RunConfig,
    suite: Sequence[Task],
    oracles: Oracles,
    log_store: EvidenceLog,
    *,
    seed: int,
    rounds: int | None = None,
    meta: MetaSkill | None = None,
    bank: Bank | None = None,
    clock: Callable[[], str] = utc_now,
    on_round: Callable[[RoundResult], None] | None = None,
) -> tuple[RoundState, list[RoundResult]]:
    state = initial_state(config, seed, bank=bank, meta=meta)
    results = []
    for _ in range(rounds if rounds is not None else config.rounds):
        state, result = run_round(state, suite, oracles, log_store, clock)
        results.append(result)
        if on_round is not None:
            on_round(result)
    return state, results


# --------------------------------------------------------------------------- metrics


def rolling_gain(curve: Sequence[float], window: int = 10) -> float:
    """mean(last `window`) - mean(first `window`)."""
    if len(curve) < 2 * window:
        raise CurveTooShort(f"need at least {2 * window} rounds, got {len(curve)}")
    return statistics.fmean(curve[-window:]) - statistics.fmean(curve[:window])


def peak(curve: Sequence[float]) -> float:
    if not len(curve):
        raise EmptyCurve("peak of an empty curve")
    return max(curve)


def run_summary(results: Sequence[RoundResult], counters: Mapping[str, Any] | None = None) -> dict[str, Any]:
    curve = [r.eval_pass1 for r in results]
    summary: dict[str, Any] = {
        "rounds": len(results),
        "baseline": curve[0] if curve else None,
        "peak": peak(curve) if curve else None,
        "rolling_gain": rolling_gain(curve) if len(curve) >= 20 else None,
        "final_active": results[-1].active_count if results else 0,
        "rollbacks": sum(r.rollback_fired for r in results),
    }
    if counters is not None:
        summary["counters"] = dict(counters)
    return summary


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
