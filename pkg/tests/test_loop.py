from __future__ import annotations

import random
import zlib

import pytest
from hypothesis import given, strategies as st

from conftest import make_skill
from oracles import rollback_reference
from skillbank.backends.base import OracleUnavailable, Oracles, Task
from skillbank.backends.scripted import (
    FlakyOracle,
    PrefixGrader,
    ScriptedCritic,
    ScriptedGate,
    ScriptedMeta,
    ScriptedSolver,
    TemplateSynth,
)
from skillbank.evidence_log import EvidenceLog
from skillbank.loop import (
    ABLATIONS,
    ConfigError,
    CurveTooShort,
    EmptyCurve,
    LogicalClock,
    RollbackTracker,
    RunConfig,
    UnknownAblation,
    apply_ablation,
    config_diff,
    initial_state,
    load_config,
    peak,
    rollback_check,
    rolling_gain,
    run_loop,
    run_round,
    run_summary,
)
from skillbank.retrieval import HashingEmbedder
from skillbank.router import RouterMode
from skillbank.skill_model import Bank, SkillStatus, default_meta_skill

# ------------------------------------------------------------------ metrics


def test_rolling_gain_examples():
    assert rolling_gain([0.3] * 25) == 0.0
    assert rolling_gain([i / 100 for i in range(100)]) == pytest.approx(0.90, abs=1e-12)
    with pytest.raises(CurveTooShort):
        rolling_gain([0.1] * 19)


def test_peak_examples():
    assert peak([0.2, 0.5, 0.4]) == 0.5
    assert peak([0.375] * 100) == 0.375
    assert peak([0.7]) == 0.7
    with pytest.raises(EmptyCurve):
        peak([])


# ------------------------------------------------------------------ rollback automaton


def drive(curve, tau_rb=0.10, persistence=5):
    tracker, fired = RollbackTracker(), []
    for r, x in enumerate(curve):
        decision, tracker = rollback_check(tracker, r, x, tau_rb, persistence)
        fired.append(decision.restore)
    return fired, tracker


def test_four_regressions_then_recovery():
    fired, tracker = drive([0.8, 0.6, 0.6, 0.6, 0.6, 0.75])
    assert not any(fired) and tracker.consecutive_regressions == 0


def test_fifth_regression_restores_best_round():
    tracker = RollbackTracker()
    for r, x in enumerate([0.5, 0.8, 0.6, 0.6, 0.6, 0.6]):
        decision, tracker = rollback_check(tracker, r, x, 0.10, 5)
        assert not decision.restore
    decision, tracker = rollback_check(tracker, 6, 0.6, 0.10, 5)
    assert decision.restore and decision.best_round == 1
    assert tracker.consecutive_regressions == 0


def test_drop_of_exactly_tau_rb_is_not_a_regression():
    fired, tracker = drive([0.5] + [0.4] * 10)
    assert not any(fired) and tracker.consecutive_regressions == 0
    fired, _ = drive([0.575] + [0.475] * 10)  # 23/40 -> 19/40 in pass@1 terms
    assert not any(fired)


def test_new_best_resets_counter():
    fired, tracker = drive([0.5, 0.3, 0.3, 0.3, 0.3, 0.9, 0.7])
    assert not any(fired) and tracker.best_round == 5 and tracker.consecutive_regressions == 1


@given(st.lists(st.integers(0, 40), min_size=1, max_size=80))
def test_rollback_matches_reference_on_grid(ks):
    curve = [k / 40 for k in ks]
    assert drive(curve)[0] == rollback_reference(curve)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=80))
def test_rollback_matches_reference_on_floats(curve):
    assert drive(curve)[0] == rollback_reference(curve)


# ------------------------------------------------------------------ config


def test_defaults_match_published_table():
    c = RunConfig()
    assert (c.rounds, c.seeds, c.W, c.K, c.cutoff) == (100, (42, 7, 13), 6, 10, 20)
    assert (c.tau_canon, c.cover_threshold, c.dedup_threshold, c.char_budget) == (0.85, 0.85, 0.85, 1500)
    assert (c.max_skills_per_round, c.min_cluster, c.N_min, c.tau, c.cap) == (2, 3, 100, 0.10, 50)
    assert (c.tau_rb, c.rb_persistence, c.router_mode, c.meta_cadence) == (0.10, 5, RouterMode.DEFAULT, None)
    assert c.cover_guard_enabled and c.meta_skill_enabled


def test_config_file_round_trip(tmp_path):
    import json

    assert load_config("configs/default.yaml") == RunConfig()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(RunConfig(cap=7).to_dict()))
    assert load_config(p) == RunConfig(cap=7)


@pytest.mark.parametrize("bad", [{"cap": 0}, {"tau": 2}, {"bogus": 1}, {"router_mode": "SOMETIMES"},
                                 {"dedup_scope": "x"}, {"cover_surface": "x"}, {"meta_cadence": 0},
                                 {"tau_canon": 0}])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_ablation_changes_only_its_knobs(name):
    diff = config_diff(RunConfig(), apply_ablation(RunConfig(), name))
    assert set(diff) == set(ABLATIONS[name])


def test_unknown_ablation():
    with pytest.raises(UnknownAblation):
        apply_ablation(RunConfig(), "A9")


# ------------------------------------------------------------------ scripted runs

TRAIN = [Task(f"tr{i}", f"train task {i} about empty lists", "train") for i in range(6)]
EVAL = [Task(f"ev{i}", f"eval task {i} about empty lists", "eval") for i in range(4)]
SUITE = TRAIN + EVAL


def scripted(solver=None, *, gate="first", critic=None, synth=None):
    return Oracles(solver or ScriptedSolver(default=False), PrefixGrader(),
                   critic or ScriptedCritic(default_pattern="empty list not handled"),
                   synth or TemplateSynth(), ScriptedGate(default=gate), HashingEmbedder(dim=64, seed=1),
                   meta=ScriptedMeta())


def cfg(**kw):
    base = dict(rounds=3, parallelism=1, min_cluster=3, N_min=100)
    base.update(kw)
    return RunConfig(**base)


def test_round_zero_empty_bank_is_baseline():
    solver = ScriptedSolver({"ev0": True, "ev1": True}, default=False)
    with EvidenceLog() as log:
        state = initial_state(cfg(), 1)
        _, result = run_round(state, SUITE, scripted(solver), log, LogicalClock())
        assert result.eval_pass1 == 0.5
        assert result.router_engagement == 0.0
        assert result.skills_born == 1  # 6 identical failures -> one cluster


def test_phase_order_and_critic_only_on_train_failures():
    with EvidenceLog() as log:
        run_loop(cfg(), SUITE, scripted(), log, seed=1, rounds=2, clock=LogicalClock())
        for r in range(2):
            caps = log.capsules(round_idx=r)
            splits = [c.split for c in caps]
            assert splits == ["eval"] * 4 + ["train"] * 6
            stamps = [c.created_at for c in caps]
            assert stamps == sorted(stamps)
        for v in log.verdicts():
            c = log.get_capsule(v.capsule_id)
            assert c.split == "train" and not c.passed


def test_forced_none_records_no_verdicts_and_no_engagement():
    bank = Bank([make_skill("preloaded")])
    with EvidenceLog() as log:
        _, results = run_loop(cfg(router_mode="FORCED_NONE"), SUITE, scripted(), log, seed=1, rounds=3,
                              bank=bank, clock=LogicalClock())
        counters = log.operational_counters()
        assert counters.critic_calls == 0 and counters.router_engagement_pct == 0.0
        assert all(r.router_engagement == 0 for r in results)


def test_retrieval_only_engages_on_every_task_with_nonempty_bank():
    bank = Bank([make_skill("preloaded")])
    with EvidenceLog() as log:
        run_loop(cfg(router_mode="RETRIEVAL_ONLY"), SUITE, scripted(), log, seed=1, rounds=3, bank=bank,
                 clock=LogicalClock())
        assert log.operational_counters().router_engagement_pct == 100.0


def test_outage_aborts_round_and_leaves_state_untouched():
    solver = FlakyOracle(ScriptedSolver(default=False), fail_on={15})
    with EvidenceLog() as log:
        state = initial_state(cfg(), 1)
        state, _ = run_round(state, SUITE, scripted(solver), log, LogicalClock())
        before_bank, before_digest = state.bank.content_hash(), log.digest()
        with pytest.raises(OracleUnavailable):
            run_round(state, SUITE, scripted(solver), log, LogicalClock())
        assert state.round == 1 and state.bank.content_hash() == before_bank
        assert log.digest() == before_digest and log.last_committed_round() == 0
        state, result = run_round(state, SUITE, scripted(solver), log, LogicalClock())
        assert result.round == 1 and log.last_committed_round() == 1


def test_restore_after_regressions_keeps_log():
    # round 0 passes everything; later rounds fail every eval task
    solver = ScriptedSolver(default=lambda task, skill, ctx: ctx.round == 0)
    with EvidenceLog() as log:
        state, results = run_loop(cfg(), SUITE, scripted(solver), log, seed=1, rounds=6, clock=LogicalClock())
        assert [r.rollback_fired for r in results] == [False] * 5 + [True]
        restored = log.restore_bank(log.snapshot_for_round(0))
        assert state.bank.content_hash() == restored.content_hash()
        assert log.count_capsules() == 60
        assert log.snapshot_for_round(5, "archive")
        assert results[-1].active_count == len(restored.active())
        assert log.count_events("rollback") == 1


def test_rollback_does_not_reuse_dropped_ids():
    solver = ScriptedSolver(default=lambda task, skill, ctx: ctx.round == 0)
    critic = ScriptedCritic(default_pattern="pattern")

    class PerRoundCritic:
        def critique(self, task, skill, capsule, ctx):
            d = critic.critique(task, skill, capsule, ctx)
            return type(d)(d.attribution, f"failure kind {ctx.round}", d.confidence, d.reason)

    orc = scripted(solver, critic=PerRoundCritic())
    with EvidenceLog() as log:
        state, _ = run_loop(cfg(W=1), SUITE, orc, log, seed=1, rounds=8, clock=LogicalClock())
        born = [p["skill_id"] for _, _, p in log.events("born")]
        assert len(born) == len(set(born))


def test_bootstrap_routes_young_candidates_on_train_only():
    cand = make_skill("young_candidate", status=SkillStatus.CANDIDATE)
    bank = Bank([cand])
    solver = ScriptedSolver(default=False)
    prefer = lambda task, cands: next((s.id for s in cands if s.id == "young_candidate"), None)  # noqa: E731
    with EvidenceLog() as log:
        run_loop(cfg(bootstrap_trials=10), SUITE, scripted(solver, gate=prefer), log, seed=1, rounds=3, bank=bank,
                 clock=LogicalClock())
        routed = [(split, r) for _, sid, r, split in solver.calls if sid == "young_candidate"]
        assert routed and all(split == "train" for split, _ in routed)
        # 6 trials in round 0, 12 after round 1: eligible for two rounds only
        assert sorted({r for _, r in routed}) == [0, 1]


def test_meta_refresh_registers_new_meta_on_cadence():
    text = default_meta_skill().raw_markdown.replace("Short self-contained", "Refreshed")
    orc = scripted()
    orc.meta = ScriptedMeta([text] * 5)
    with EvidenceLog() as log:
        state, _ = run_loop(cfg(meta_cadence=2), SUITE, orc, log, seed=1, rounds=5, meta=default_meta_skill(),
                            clock=LogicalClock())
        assert log.count_events("meta_registered") == 2
        assert state.metas.active("default").scope.startswith("Refreshed")
        assert sum(m.status == "active" for m in state.metas.all()) == 1


def test_parallelism_does_not_change_outcomes():
    solver_fn = lambda task, skill, ctx: zlib.crc32(f"{task.task_id}:{ctx.round}".encode()) % 3 == 0  # noqa: E731
    digests = []
    for par in (1, 8):
        with EvidenceLog() as log:
            run_loop(cfg(parallelism=par), SUITE, scripted(ScriptedSolver(default=solver_fn)), log, seed=1,
                     rounds=4, clock=LogicalClock())
            digests.append(log.digest())
    assert digests[0] == digests[1]


def test_run_summary_fields():
    with EvidenceLog() as log:
        _, results = run_loop(cfg(), SUITE, scripted(), log, seed=1, rounds=20, clock=LogicalClock())
        s = run_summary(results, {"x": 1})
        assert s["rounds"] == 20 and s["baseline"] == results[0].eval_pass1
        assert s["rolling_gain"] == rolling_gain([r.eval_pass1 for r in results])
        assert s["counters"] == {"x": 1}
        assert [rep["round"] for rep in log.round_reports()] == list(range(20))


def test_round_result_pass_rate_is_capsule_fraction():
    rng = random.Random(0)
    outcomes = {t.task_id: rng.random() < 0.5 for t in SUITE}
    with EvidenceLog() as log:
        _, results = run_loop(cfg(), SUITE, scripted(ScriptedSolver(outcomes)), log, seed=1, rounds=1,
                              clock=LogicalClock())
        caps = [c for c in log.capsules(round_idx=0) if c.split == "eval"]
        assert results[0].eval_pass1 == sum(c.passed for c in caps) / len(caps)
