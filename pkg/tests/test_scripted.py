from __future__ import annotations

import pytest

from conftest import make_skill
from skillbank.backends.base import CallContext, MalformedResponse, OracleUnavailable, Task
from skillbank.backends.scripted import (
    FlakyOracle,
    PrefixGrader,
    ScriptedCritic,
    ScriptedGate,
    ScriptedMeta,
    ScriptedSolver,
    ScriptedSuite,
    TagGate,
    TemplateSynth,
    template_skill,
)
from skillbank.evidence_log import EvidenceLog
from skillbank.loop import LogicalClock, RunConfig, run_loop
from skillbank.retrieval import HashingEmbedder
from skillbank.skill_model import validate_skill

CTX = CallContext(0, 0, "train")
T = Task("t1", "prompt", "train")


def test_solver_lookup_order():
    s = make_skill("sk")
    solver = ScriptedSolver({("t1", "sk"): True, "t1": False}, default=True)
    grader = PrefixGrader()
    assert grader.grade(T, solver.solve(T, s, CTX), CTX)
    assert not grader.grade(T, solver.solve(T, None, CTX), CTX)
    assert grader.grade(Task("other", "", "eval"), solver.solve(Task("other", "", "eval"), None, CTX), CTX)
    assert solver.calls[0] == ("t1", "sk", 0, "train")


def test_critic_patterns_and_malformed():
    critic = ScriptedCritic({"t1": "empty list"}, malformed={"bad"})
    v = critic.critique(T, make_skill("sk"), None, CTX)
    assert (v.attribution, v.pattern) == ("NEUTRAL", "empty list")
    assert critic.critique(T, None, None, CTX).attribution == "INAPPLICABLE"
    with pytest.raises(MalformedResponse):
        critic.critique(Task("bad", "", "train"), None, None, CTX)


def test_template_skill_validates():
    skill = validate_skill(template_skill("List May Be Empty!"))
    assert skill.id == "list_may_be_empty" and skill.guidance.applies_when == "List May Be Empty!"


def test_template_synth_consumes_responses_first():
    synth = TemplateSynth(["raw"])
    assert synth.synthesize("g", "pattern: p\n", "", 1500) == "raw"
    assert validate_skill(synth.synthesize("g", "pattern: p\n", "", 1500)).guidance.applies_when == "p"


def test_tag_gate():
    gate = TagGate({"t1": "dates"})
    skills = [make_skill("a", tags=("x",)), make_skill("b", tags=("dates",))]
    assert gate.adjudicate(T, skills) == "b"
    assert gate.adjudicate(Task("t2", "", "eval"), skills) is None


def test_meta_echoes_when_exhausted():
    assert ScriptedMeta().refresh("doc", "") == "doc"


def test_flaky_oracle():
    flaky = FlakyOracle(ScriptedSolver(default=True), fail_on={2})
    flaky.solve(T, None, CTX)
    with pytest.raises(OracleUnavailable):
        flaky.solve(T, None, CTX)
    flaky.solve(T, None, CTX)


def test_gate_default_first_and_none():
    skills = [make_skill("a"), make_skill("b")]
    assert ScriptedGate(default="first").adjudicate(T, skills) == "a"
    assert ScriptedGate().adjudicate(T, skills) is None


def test_demo_suite_learns_its_patterns():
    suite = ScriptedSuite.load("configs/demo_suite.json")
    assert len(suite.tasks) == 12
    with EvidenceLog() as log:
        state, results = run_loop(RunConfig(), suite.tasks, suite.oracles(HashingEmbedder()), log, seed=0,
                                  rounds=4, clock=LogicalClock())
    assert results[0].eval_pass1 < 1.0
    assert results[-1].eval_pass1 == 1.0
    assert {s.guidance.applies_when for s in state.bank.active()} == set(suite.patterns.values())
