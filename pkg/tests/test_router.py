from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from conftest import make_skill
from skillbank.backends.base import Task
from skillbank.backends.scripted import ScriptedGate, candidate_key
from skillbank.router import RouteDecision, RoutePath, RouterMode, route

TASK = Task("t1", "sort a list that may be empty", "eval")


def bank(n):
    return [make_skill(f"skill_{i:02d}", intent=f"topic {i}", signals=(f"cue{i}",)) for i in range(n)]


@pytest.mark.parametrize("mode", list(RouterMode))
def test_empty_bank_routes_none(mode, embedder):
    d = route(TASK, [], mode, 20, 10, ScriptedGate(default="first"), embedder)
    assert d.chosen is None


def test_forced_none_never_calls_gate(embedder):
    gate = ScriptedGate(default="first")
    d = route(TASK, bank(50), RouterMode.FORCED_NONE, 20, 10, gate, embedder)
    assert (d.chosen, d.path) == (None, RoutePath.FORCED_NONE)
    assert gate.calls == []


def test_full_bank_at_cutoff(embedder):
    gate = ScriptedGate(default="first")
    d = route(TASK, bank(20), RouterMode.DEFAULT, 20, 10, gate, embedder)
    assert d.path is RoutePath.FULL_BANK
    assert len(gate.calls[0][1]) == 20
    assert d.chosen == gate.calls[0][1][0]


def test_shortlist_above_cutoff(embedder):
    gate = ScriptedGate(default="first")
    d = route(TASK, bank(21), RouterMode.DEFAULT, 20, 10, gate, embedder)
    assert d.path is RoutePath.SHORTLIST
    assert 10 <= len(d.shortlist) <= 20
    assert gate.calls[0][1] == d.shortlist
    assert d.chosen in d.shortlist


def test_gate_may_answer_none(embedder):
    d = route(TASK, bank(3), RouterMode.DEFAULT, 20, 10, ScriptedGate(default="none"), embedder)
    assert d.chosen is None and d.path is RoutePath.FULL_BANK


def test_invalid_gate_answer_retried_once_then_none(embedder):
    gate = ScriptedGate({"t1": "not_a_candidate"})
    d = route(TASK, bank(3), RouterMode.DEFAULT, 20, 10, gate, embedder)
    assert d.chosen is None and len(gate.calls) == 2


def test_gate_answer_recovers_on_retry(embedder):
    answers = iter(["bogus", "skill_01"])
    gate = ScriptedGate(default=lambda task, cands: next(answers))
    assert route(TASK, bank(3), RouterMode.DEFAULT, 20, 10, gate, embedder).chosen == "skill_01"


def test_gate_table_keyed_by_candidate_hash(embedder):
    skills = bank(3)
    key = candidate_key(sorted(skills, key=lambda s: s.id))
    gate = ScriptedGate({("t1", key): "skill_02"})
    # full-bank path hands candidates in tf-idf order; with no lexical overlap that is id order
    assert route(TASK, skills, RouterMode.DEFAULT, 20, 10, gate, embedder).chosen == "skill_02"


def test_retrieval_only_picks_tfidf_rank_one(embedder):
    skills = bank(30)
    t = Task("t2", "need cue17 handling", "eval")
    d = route(t, skills, RouterMode.RETRIEVAL_ONLY, 20, 10, ScriptedGate(), embedder)
    assert d.chosen == "skill_17" and d.path is RoutePath.RETRIEVAL_ONLY


def test_retrieval_only_falls_back_to_embedding(embedder):
    t = Task("t3", "zzz qqq", "eval")
    d = route(t, bank(5), RouterMode.RETRIEVAL_ONLY, 20, 10, ScriptedGate(), embedder)
    assert d.chosen is not None


@given(st.text(min_size=1, max_size=40), st.integers(1, 25))
def test_retrieval_only_never_none_on_nonempty_bank(prompt, n):
    from skillbank.retrieval import HashingEmbedder

    d = route(Task("t", prompt, "eval"), bank(n), RouterMode.RETRIEVAL_ONLY, 20, 10, ScriptedGate(),
              HashingEmbedder(dim=64))
    assert d.chosen in {s.id for s in bank(n)}


def test_bad_cutoff_or_k(embedder):
    with pytest.raises(ValueError):
        route(TASK, bank(2), RouterMode.DEFAULT, -1, 10, ScriptedGate(), embedder)
    with pytest.raises(ValueError):
        route(TASK, bank(2), RouterMode.DEFAULT, 20, 0, ScriptedGate(), embedder)


def test_decision_shape():
    assert RouteDecision("t", None, RoutePath.FORCED_NONE).shortlist == ()
