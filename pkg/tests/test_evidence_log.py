from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, strategies as st

from conftest import TS, add_trials, make_skill
from oracles import recount
from skillbank.evidence_log import (
    Capsule,
    CapsuleNotAFailure,
    DuplicateId,
    EvidenceLog,
    MissingSnapshot,
    UnknownCapsule,
    Verdict,
)
from skillbank.skill_model import Bank, SkillStatus


def cap(cid, *, skill="s", split="train", rnd=0, passed=False, task="t"):
    return Capsule(cid, task, skill, split, rnd, passed, "output", TS)


def verdict(vid, cid, pattern="p"):
    return Verdict(vid, cid, "NEUTRAL", pattern, "HIGH", "why")


def test_capsule_round_trip(store):
    c = cap("c1", passed=True)
    store.begin_round(0)
    assert store.append_capsule(c) == "c1"
    store.commit_round(0, {})
    assert store.get_capsule("c1") == c


def test_duplicate_capsule_id(store):
    store.begin_round(0)
    store.append_capsule(cap("c1"))
    with pytest.raises(DuplicateId):
        store.append_capsule(cap("c1"))


def test_capsule_invariants():
    with pytest.raises(ValueError):
        cap("c", split="test")
    with pytest.raises(ValueError):
        cap("c", rnd=-1)


def test_verdict_on_failed_train_capsule(store):
    store.begin_round(0)
    store.append_capsule(cap("c1"))
    assert store.append_verdict(verdict("v1", "c1")) == "v1"
    store.commit_round(0, {})
    assert [v.verdict_id for v in store.verdicts()] == ["v1"]


def test_verdict_rejections(store):
    store.begin_round(0)
    store.append_capsule(cap("passed", passed=True))
    store.append_capsule(cap("evalfail", split="eval"))
    store.append_capsule(cap("ok"))
    with pytest.raises(CapsuleNotAFailure):
        store.append_verdict(verdict("v1", "passed"))
    with pytest.raises(CapsuleNotAFailure):
        store.append_verdict(verdict("v2", "evalfail"))
    with pytest.raises(UnknownCapsule):
        store.append_verdict(verdict("v3", "nope"))
    store.append_verdict(verdict("v4", "ok"))
    with pytest.raises(DuplicateId):
        store.append_verdict(verdict("v4", "ok"))


def test_verdict_enums_are_closed():
    with pytest.raises(ValueError):
        Verdict("v", "c", "MAYBE", "p", "HIGH", "")
    with pytest.raises(ValueError):
        Verdict("v", "c", "HURT", "p", "CERTAIN", "")


def test_contribution_arithmetic(store):
    add_trials(store, "s", 60, 40)
    stats = store.contribution("s")
    assert (stats.trials, stats.successes, stats.failures) == (100, 60, 40)
    assert stats.c_hat == pytest.approx(0.20, abs=1e-15)


def test_zero_trials_is_undefined(store):
    assert store.contribution("never").c_hat is None
    assert store.contribution("never").trials == 0


@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c", None]), st.sampled_from(["train", "eval"]),
                          st.booleans()), max_size=500))
def test_contribution_matches_recount(rows):
    caps = [Capsule(f"c{i}", "t", s, split, 0, p, "", TS) for i, (s, split, p) in enumerate(rows)]
    for splits in (("train", "eval"), ("train",)):
        with EvidenceLog(contribution_splits=splits) as log:
            log.begin_round(0)
            for c in caps:
                log.append_capsule(c)
            log.commit_round(0, {})
            for sid in "abc":
                st_ = log.contribution(sid)
                assert (st_.trials, st_.successes, st_.failures) == recount(caps, sid, splits)
                assert st_.trials == st_.successes + st_.failures


def test_ten_thousand_appends_against_shadow_log(tmp_path):
    rng = random.Random(5)
    shadow: dict[int, int] = {}
    with EvidenceLog(tmp_path / "s.sqlite") as log:
        n = 0
        for r in range(100):
            log.begin_round(r)
            for _ in range(100):
                log.append_capsule(cap(f"c{n}", rnd=r, skill=rng.choice(["x", "y", None]), passed=rng.random() < 0.5))
                shadow[r] = shadow.get(r, 0) + 1
                n += 1
            log.commit_round(r, {})
        assert log.count_capsules() == 10_000
        for r in range(100):
            assert len(log.capsules(round_idx=r)) == shadow[r]


def test_concurrent_appends_are_serialized(store):
    store.begin_round(0)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: store.append_capsule(cap(f"c{i}", passed=i % 2 == 0)), range(400)))
    store.commit_round(0, {})
    assert store.contribution("s").trials == 400
    assert store.contribution("s").successes == 200


def _window_store():
    log = EvidenceLog()
    for r in range(12):
        log.begin_round(r)
        log.append_capsule(cap(f"c{r}", rnd=r))
        log.append_verdict(verdict(f"v{r}", f"c{r}"))
        log.commit_round(r, {})
    return log


@pytest.mark.parametrize("current,w,expected", [(10, 6, range(5, 11)), (10, 1, [10]), (3, 6, range(0, 4))])
def test_verdict_window(current, w, expected):
    with _window_store() as log:
        assert [v.verdict_id for v in log.verdicts_in_window(current, w)] == [f"v{r}" for r in expected]


def test_verdict_window_rejects_nonpositive():
    with _window_store() as log, pytest.raises(ValueError):
        log.verdicts_in_window(3, 0)


def test_prefix_hash_is_append_only():
    log = EvidenceLog()
    digests = []
    for r in range(6):
        log.begin_round(r)
        for i in range(3):
            log.append_capsule(cap(f"c{r}-{i}", rnd=r))
        log.append_verdict(verdict(f"v{r}", f"c{r}-0"))
        log.commit_round(r, {})
        digests.append(log.digest())
    for r, d in enumerate(digests):
        assert log.digest(up_to_round=r) == d
    log.close()


def test_crash_mid_round_is_discarded(tmp_path):
    path = tmp_path / "crash.sqlite"
    log = EvidenceLog(path)
    log.begin_round(0)
    log.append_capsule(cap("kept"))
    log.commit_round(0, {"round": 0})
    log.begin_round(1)
    log.append_capsule(cap("lost", rnd=1))
    log._db.close()  # simulate a crash: no commit, no abort
    with EvidenceLog(path) as reopened:
        assert [c.capsule_id for c in reopened.capsules()] == ["kept"]
        assert reopened.last_committed_round() == 0
        assert reopened.contribution("s").trials == 1


def test_abort_round_restores_tallies(store):
    add_trials(store, "s", 3, 1)
    store.begin_round(1)
    store.append_capsule(cap("extra", rnd=1, passed=True))
    store.abort_round()
    assert store.contribution("s").trials == 4


def test_replay_into_fresh_store_gives_identical_stats(store):
    rng = random.Random(1)
    store.begin_round(0)
    for i in range(200):
        store.append_capsule(cap(f"c{i}", skill=rng.choice("abc"), split=rng.choice(["train", "eval"]),
                                 passed=rng.random() < 0.3))
    store.commit_round(0, {})
    with EvidenceLog() as fresh:
        fresh.begin_round(0)
        for c in store.capsules():
            fresh.append_capsule(c)
        fresh.commit_round(0, {})
        assert fresh.contributions("abc") == store.contributions("abc")
        assert fresh.digest() == store.digest()


def test_snapshot_round_trip_and_missing(store):
    bank = Bank([make_skill("a").with_embedding([1.0, 2.0]), make_skill("b", status=SkillStatus.DEPRECATED)])
    store.begin_round(0)
    sid = store.save_snapshot(bank, 0)
    store.commit_round(0, {})
    assert store.restore_bank(sid).content_hash() == bank.content_hash()
    with pytest.raises(MissingSnapshot):
        store.restore_bank("snap-99999-round")
    with pytest.raises(MissingSnapshot):
        store.snapshot_for_round(7)


def test_retired_evidence_stays_addressable(store):
    add_trials(store, "gone", 1, 9)
    assert len(store.capsules(skill_id="gone")) == 10
    assert store.contribution("gone").c_hat == pytest.approx(-0.8)


def test_fresh_store_counters_are_zero(store):
    add_trials(store, None, 0, 0)
    store.begin_round(1)
    for i in range(5):
        store.append_capsule(Capsule(f"e{i}", "t", None, "eval", 1, False, "", TS))
    store.commit_round(1, {})
    c = store.operational_counters(Bank())
    assert c.solver_calls == 5
    assert (c.critic_calls, c.synth_calls, c.born, c.retired, c.active) == (0, 0, 0, 0, 0)
    assert c.router_engagement_pct == 0.0


def test_jsonl_export_field_names(store):
    store.begin_round(0)
    store.append_capsule(cap("c1"))
    store.append_verdict(verdict("v1", "c1"))
    store.commit_round(0, {})
    import json

    rows = [json.loads(line) for line in store.dump_jsonl()]
    assert list(rows[0]) == ["capsule_id", "task_id", "skill_id", "split", "round", "passed", "solver_output",
                             "created_at"]
    assert list(rows[1]) == ["verdict_id", "capsule_id", "attribution", "pattern", "confidence", "reason"]
