"""A deterministic synthetic world for exercising the loop without models.

Each task has a baseline pass probability p0 and one planted failure mode.
Skills carry a scalar effect, and injecting skill s on task x passes with
probability clamp(p0(x) + effect(s), 0, 1). All randomness is derived by
hashing the call coordinates, so thread scheduling never changes outcomes.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

try:
    from yaml import CSafeDumper as _Dumper
except ImportError:  # pragma: no cover
    from yaml import SafeDumper as _Dumper

from ..bounds import BoundParams, nondivergence_floor
from ..evidence_log import Capsule, EvidenceLog
from ..retrieval import HashingEmbedder
from ..skill_model import MetaSkill, Skill, default_meta_skill, parse_meta_skill, render_meta_skill
from .base import CallContext, Grader, Oracles, Solver, Task, VerdictDraft

DEFAULT_PROBE_SEEDS = (9001, 9002, 9003, 9004, 9005)

_SUBJECTS = (
    "empty input lists", "negative integers", "unicode strings", "nested dictionaries",
    "floating point totals", "duplicate keys", "leap year dates", "large factorials",
    "overlapping intervals", "binary tree depth", "matrix transpose", "prime sieve limits",
    "palindrome checks", "memoized recursion", "bit masks", "regex anchors",
    "heap ordering", "graph cycles", "timezone offsets", "integer overflow",
    "csv quoting", "stack underflow", "fibonacci indexing", "anagram grouping",
)
_KINDS = (
    "off by one bound", "wrong return type", "unhandled edge case", "mutated argument",
    "nonterminating loop", "stale cached value",
)


def unit_hash(*parts: Any) -> float:
    """Uniform [0, 1) draw keyed by ``parts``."""
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


@dataclass(frozen=True)
class FailureMode:
    key: str
    subject: str
    kind: str

    @property
    def label(self) -> str:
        return f"{self.kind} on {self.subject}"

    @property
    def variants(self) -> tuple[str, ...]:
        # paraphrases a critic might plausibly produce for the same mode
        return (self.label, f"a {self.label}", f"{self.label.capitalize()}.")


def failure_modes(n: int | None = None) -> list[FailureMode]:
    """Failure modes in a fixed interleaved order (subjects vary fastest)."""
    modes = [
        FailureMode(_slug(f"{s} {k}"), s, k)
        for k, s in itertools.product(_KINDS, _SUBJECTS)
    ]
    return modes if n is None else modes[:n]


@dataclass(frozen=True)
class EffectGenerator:
    """Distribution of a synthesized skill's effect on pass probability.

    ``constant`` and ``adversarial`` always return ``value`` (adversarial
    requires value <= 0); ``uniform`` draws from [low, high].
    """

    kind: str = "uniform"
    value: float = 0.0
    low: float = -0.2
    high: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "uniform", "adversarial"):
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.kind == "adversarial" and self.value > 0:
            raise ValueError("adversarial effects must be <= 0")
        if self.kind == "uniform" and not -1 <= self.low <= self.high <= 1:
            raise ValueError("uniform bounds must satisfy -1 <= low <= high <= 1")
        if not -1 <= self.value <= 1:
            raise ValueError("effect must lie in [-1, 1]")

    def draw(self, u: float) -> float:
        if self.kind == "uniform":
            return self.low + (self.high - self.low) * u
        return self.value


@dataclass(frozen=True)
class SimTask:
    task: Task
    p0: float
    mode: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.p0 <= 1.0:
            raise ValueError(f"p0 must lie in [0, 1], got {self.p0}")


@dataclass
class SimWorld:
    tasks: list[SimTask]
    generator: EffectGenerator = field(default_factory=EffectGenerator)
    rng_seed: int = 0
    label_noise: float = 0.0
    skill_effects: dict[str, float] = field(default_factory=dict)
    n_modes: int = 24

    def __post_init__(self) -> None:
        ids = [t.task.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")
        for sid, e in self.skill_effects.items():
            if not -1.0 <= e <= 1.0:
                raise ValueError(f"effect of {sid} outside [-1, 1]")
        self.modes = {m.key: m for m in failure_modes(self.n_modes)}
        unknown = {t.mode for t in self.tasks} - set(self.modes)
        if unknown:
            raise ValueError(f"tasks reference unknown modes: {sorted(unknown)}")
        self._by_id = {t.task.task_id: t for t in self.tasks}
        self._mode_of_label = {v: m.key for m in self.modes.values() for v in m.variants}

    # ---------------------------------------------------------------- views

    @property
    def suite(self) -> list[Task]:
        return [t.task for t in self.tasks]

    def sim_task(self, task_id: str) -> SimTask:
        return self._by_id[task_id]

    def mode_of_label(self, label: str) -> str | None:
        return self._mode_of_label.get(label)

    def p0_mean(self, split: str = "eval") -> float:
        return statistics.fmean(t.p0 for t in self.tasks if t.task.split == split)

    def noise_floor(self, window: int = 10) -> float:
        """Std of the rolling gain of a flat eval curve: sqrt(2 E[p0(1-p0)] / (window * n_eval))."""
        ev = [t.p0 for t in self.tasks if t.task.split == "eval"]
        var = statistics.fmean(p * (1 - p) for p in ev)
        return (2.0 * var / (window * len(ev))) ** 0.5

    def with_generator(self, generator: EffectGenerator) -> "SimWorld":
        return replace(self, generator=generator, skill_effects=dict(self.skill_effects))

    # ---------------------------------------------------------------- construction

    @classmethod
    def generate(cls, n_tasks: int = 100, *, seed: int = 0, train_frac: float = 0.6, n_modes: int = 24,
                 generator: EffectGenerator | None = None, p0: Sequence[float] | None = None,
                 p0_beta: tuple[float, float] = (1.0, 1.0)) -> "SimWorld":
        """Tasks with p0 ~ Beta(*p0_beta) (U(0, 1) by default, or the given
        values) and uniformly assigned modes."""
        rng = np.random.default_rng(seed)
        p0s = list(p0) if p0 is not None else rng.beta(*p0_beta, n_tasks).tolist()
        modes = failure_modes(n_modes)
        picks = rng.integers(0, len(modes), len(p0s)).tolist()
        n_train = round(train_frac * len(p0s))
        tasks = [
            _make_task(f"t{i:03d}", p, modes[m], "train" if i < n_train else "eval")
            for i, (p, m) in enumerate(zip(p0s, picks))
        ]
        return cls(tasks, generator or EffectGenerator(), seed, n_modes=n_modes)

    @classmethod
    def hard_subset(cls, *, seed: int = 0, pool_size: int = 378, n_tasks: int = 100, train_frac: float = 0.6,
                    probe_seeds: Sequence[int] = DEFAULT_PROBE_SEEDS, n_modes: int = 24,
                    generator: EffectGenerator | None = None,
                    p0_beta: tuple[float, float] = (1.0, 1.0)) -> "SimWorld":
        """Probe-filtered pool, then a seeded sample and a fixed-ratio split."""
        pool = cls.generate(pool_size, seed=seed, train_frac=1.0, n_modes=n_modes, generator=generator,
                            p0_beta=p0_beta)
        backend = SimBackend(pool, run_seed=0)
        kept_ids = {t.task_id for t in probe_filter(pool.suite, backend, probe_seeds, backend)}
        kept = [t for t in pool.tasks if t.task.task_id in kept_ids]
        if len(kept) < n_tasks:
            raise ValueError(f"only {len(kept)} tasks survive probing; need {n_tasks}")
        rng = np.random.default_rng([seed, 1])
        order = rng.permutation(len(kept))[:n_tasks]
        n_train = round(train_frac * n_tasks)
        tasks = []
        for rank, idx in enumerate(order.tolist()):
            t = kept[idx]
            split = "train" if rank < n_train else "eval"
            tasks.append(replace(t, task=replace(t.task, split=split)))
        tasks.sort(key=lambda t: t.task.task_id)
        return cls(tasks, pool.generator, seed, n_modes=n_modes)

    # ---------------------------------------------------------------- world files

    def to_dict(self) -> dict[str, Any]:
        return {
            "rng_seed": self.rng_seed,
            "n_modes": self.n_modes,
            "label_noise": self.label_noise,
            "generator": {"kind": self.generator.kind, "value": self.generator.value,
                          "low": self.generator.low, "high": self.generator.high},
            "skill_effects": dict(self.skill_effects),
            "tasks": [
                {"id": t.task.task_id, "p0": t.p0, "mode": t.mode, "split": t.task.split, "prompt": t.task.prompt}
                for t in self.tasks
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimWorld":
        n_modes = int(data.get("n_modes", 24))
        modes = failure_modes(n_modes)
        tasks = []
        for i, row in enumerate(data["tasks"]):
            mode = row.get("mode") or modes[i % len(modes)].key
            by_key = {m.key: m for m in modes}
            if mode not in by_key:
                raise ValueError(f"unknown mode {mode!r}")
            task = _make_task(row["id"], float(row["p0"]), by_key[mode], row.get("split", "train"))
            if row.get("prompt"):
                task = replace(task, task=replace(task.task, prompt=row["prompt"]))
            tasks.append(task)
        return cls(
            tasks,
            EffectGenerator(**data.get("generator", {})),
            int(data.get("rng_seed", 0)),
            float(data.get("label_noise", 0.0)),
            {k: float(v) for k, v in data.get("skill_effects", {}).items()},
            n_modes,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _make_task(task_id: str, p0: float, mode: FailureMode, split: str) -> SimTask:
    prompt = f"Write a function handling {mode.subject}; reviewers flag {mode.kind} issues."
    return SimTask(Task(task_id, prompt, split), p0, mode.key)


# --------------------------------------------------------------------------- oracles


_EMBEDDERS: dict[tuple[int, int], HashingEmbedder] = {}


def shared_embedder(dim: int = 256, seed: int = 0) -> HashingEmbedder:
    # one cache per process: the sim reuses the same few hundred strings
    key = (dim, seed)
    if key not in _EMBEDDERS:
        _EMBEDDERS[key] = HashingEmbedder(dim, seed)
    return _EMBEDDERS[key]


class SimBackend:
    """Every oracle role for one seeded run over a :class:`SimWorld`.

    A skill's effect is the world's fixed value when listed in
    ``skill_effects``, otherwise a generator draw keyed by (world seed, run
    seed, skill id). The synthesizer may rename a draft on id collision, so
    keying by the final id gives every promoted skill its own draw.
    """

    def __init__(self, world: SimWorld, run_seed: int):
        self.world = world
        self.run_seed = run_seed
        self._drafts: dict[str, str] = {}

    def effect_of(self, skill_id: str) -> float:
        fixed = self.world.skill_effects.get(skill_id)
        if fixed is not None:
            return fixed
        return self.world.generator.draw(unit_hash("effect", self.world.rng_seed, self.run_seed, skill_id))

    # Solver / Grader
    def effect(self, skill: Skill | None) -> float:
        return 0.0 if skill is None else self.effect_of(skill.id)

    def pass_probability(self, task_id: str, skill: Skill | None) -> float:
        return clamp01(self.world.sim_task(task_id).p0 + self.effect(skill))

    def solve(self, task: Task, skill: Skill | None, ctx: CallContext) -> str:
        st = self.world.sim_task(task.task_id)
        u = unit_hash("solve", self.world.rng_seed, ctx.run_seed, ctx.round, ctx.split, task.task_id)
        if u < self.pass_probability(task.task_id, skill):
            return f"PASS {task.task_id}"
        return f"FAIL {task.task_id}: {self.world.modes[st.mode].label}"

    def grade(self, task: Task, output: str, ctx: CallContext) -> bool:
        return output.startswith("PASS")

    # Critic
    def critique(self, task: Task, skill: Skill | None, capsule: Capsule, ctx: CallContext) -> VerdictDraft:
        mode = self.world.modes[self.world.sim_task(task.task_id).mode]
        keys = (self.world.rng_seed, ctx.run_seed, ctx.round, task.task_id)
        if self.world.label_noise and unit_hash("noise", *keys) < self.world.label_noise:
            others = sorted(self.world.modes)
            mode = self.world.modes[others[int(unit_hash("other", *keys) * len(others))]]
        variant = mode.variants[int(unit_hash("variant", *keys) * len(mode.variants))]
        if skill is None:
            attribution, reason = "NEUTRAL", "no skill was injected"
        elif self.effect(skill) < 0:
            attribution, reason = "HURT", f"{skill.id} steered the solver wrong"
        else:
            attribution, reason = "NEUTRAL", f"{skill.id} did not prevent the failure"
        return VerdictDraft(attribution, variant, "HIGH", reason)

    # Synth
    def synthesize(self, guidance_text: str, cluster_digest: str, bank_digest: str, char_budget: int) -> str:
        pattern = cluster_digest.splitlines()[0].removeprefix("pattern:").strip()
        draft = self._drafts.get(pattern)
        if draft is None:
            draft = self._drafts[pattern] = self._draft(pattern)
        return draft

    def _draft(self, pattern: str) -> str:
        mode = self.world.modes[self.world.mode_of_label(pattern) or sorted(self.world.modes)[0]]
        doc = {
            "id": mode.key,
            "name": f"Guard against {mode.kind} ({mode.subject})",
            "intent": f"Avoid {mode.kind} when handling {mode.subject}",
            "description": f"Pattern-level advice for tasks involving {mode.subject}.",
            "signals_match": mode.subject.split() + mode.kind.split(),
            "tags": [mode.key],
            "guidance": {
                "applies_when": pattern,
                "key_insight": f"Check {mode.subject} explicitly before returning.",
                "common_pitfalls": [mode.label],
                "verify_before_returning": f"Trace one {mode.subject} example by hand.",
            },
        }
        return yaml.dump(doc, Dumper=_Dumper, sort_keys=False)

    # Gate
    def adjudicate(self, task: Task, candidates: Sequence[Skill]) -> str | None:
        mode = self.world.sim_task(task.task_id).mode
        for s in candidates:
            if mode in s.tags:
                return s.id
        return None

    # Meta
    def refresh(self, current_markdown: str, verdict_digest: str) -> str:
        meta = parse_meta_skill(current_markdown)
        top = verdict_digest.splitlines()[0].lstrip("- ") if verdict_digest else ""
        dont = meta.dont_rules + ((f"Advice that ignores {top}",) if top else ())
        return render_meta_skill(replace(meta, dont_rules=dont))

    def oracles(self, embedder: HashingEmbedder | None = None) -> Oracles:
        return Oracles(self, self, self, self, self, embedder or shared_embedder(seed=self.world.rng_seed), meta=self)


# --------------------------------------------------------------------------- probe filter


def probe_filter(tasks: Sequence[Task], solver: Solver, probe_seeds: Sequence[int],
                 grader: Grader | None = None) -> list[Task]:
    """Keep the tasks the no-skill solver fails on at least one probe seed."""
    if not probe_seeds:
        raise ValueError("probe_seeds must be non-empty")
    kept = []
    for task in tasks:
        for seed in probe_seeds:
            ctx = CallContext(seed, 0, task.split)
            out = solver.solve(task, None, ctx)
            passed = grader.grade(task, out, ctx) if grader else out.startswith("PASS")
            if not passed:
                kept.append(task)
                break
    return kept


# --------------------------------------------------------------------------- simulation harness


@dataclass
class SeedRun:
    seed: int
    results: list
    backend: SimBackend
    final_bank: Any
    log: EvidenceLog | None = None

    @property
    def curve(self) -> list[float]:
        return [r.eval_pass1 for r in self.results]

    @property
    def long_run_mean(self) -> float:
        return statistics.fmean(self.curve)

    def retired_ids(self) -> list[str]:
        ids = []
        for r in self.results:
            ids += [row[0] for row in r.curation.get("retired", [])]
            ids += [row[0] for row in r.curation.get("evicted", [])]
        return ids

    def positive_retired(self) -> int:
        return sum(self.backend.effect_of(sid) > 0 for sid in set(self.retired_ids()))


@dataclass
class FloorReport:
    p0_mean: float
    floor: float
    long_run_means: list[float]
    mean: float
    stderr: float

    @property
    def holds(self) -> bool:
        return self.mean >= self.floor - 2 * self.stderr

    @property
    def fraction_above(self) -> float:
        return sum(m >= self.floor for m in self.long_run_means) / len(self.long_run_means)

    def to_dict(self) -> dict[str, Any]:
        return {"p0_mean": self.p0_mean, "floor": self.floor, "mean": self.mean, "stderr": self.stderr,
                "holds": self.holds, "fraction_above": self.fraction_above}


@dataclass
class SimReport:
    runs: list[SeedRun]
    floor: FloorReport

    @property
    def curves(self) -> dict[int, list[float]]:
        return {r.seed: r.curve for r in self.runs}


def simulate_run(world: SimWorld, config: Any, rounds: int, seeds: Sequence[int], *, delta: float = 1e-3,
                 meta: MetaSkill | None = None, keep_logs: bool = False,
                 on_round: Callable[[int, Any, EvidenceLog], None] | None = None) -> SimReport:
    """Run the full loop once per seed with simulated oracles and check the floor.

    ``on_round(seed, result, log)`` runs after every committed round.
    """
    from ..loop import LogicalClock, run_loop

    runs = []
    for seed in seeds:
        backend = SimBackend(world, seed)
        store = EvidenceLog(":memory:", contribution_splits=config.contribution_splits)
        hook = (lambda res, _s=seed, _l=store: on_round(_s, res, _l)) if on_round else None
        state, results = run_loop(config, world.suite, backend.oracles(), store, seed=seed, rounds=rounds,
                                  meta=meta or default_meta_skill(config.suite), clock=LogicalClock(), on_round=hook)
        runs.append(SeedRun(seed, results, backend, state.bank, store if keep_logs else None))
        if not keep_logs:
            store.close()
    p0 = world.p0_mean("eval")
    floor = nondivergence_floor(p0, BoundParams(config.tau, config.N_min, config.cap, delta))
    means = [r.long_run_mean for r in runs]
    se = statistics.stdev(means) / len(means) ** 0.5 if len(means) > 1 else 0.0
    return SimReport(runs, FloorReport(p0, floor, means, statistics.fmean(means), se))
