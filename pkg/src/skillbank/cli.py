"""Command-line entry point.

stdout carries only JSON, JSONL or CSV; diagnostics go to stderr.
Exit codes: 0 ok, 1 invalid skill, 2 config or input error, 3 backend error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Any, Sequence

from .backends.base import OracleError, Oracles, Task
from .backends.sim import DEFAULT_PROBE_SEEDS, EffectGenerator, SimBackend, SimWorld, probe_filter, simulate_run
from .evidence_log import EvidenceLog
from .loop import (
    ABLATIONS,
    ConfigError,
    LogicalClock,
    RoundResult,
    RunConfig,
    apply_ablation,
    load_config,
    peak,
    rolling_gain,
    run_loop,
    run_summary,
)
from .retrieval import HashingEmbedder
from .skill_model import ValidationError, default_meta_skill, utc_now, validate_skill

log = logging.getLogger("skillbank")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3
CURVE_COLUMNS = ("round", "seed", "eval_pass1", "train_pass1", "active", "born_cum", "retired_cum")


class IncompleteRun(ConfigError):
    pass


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- backends


def _build_backend(args: argparse.Namespace, cfg: RunConfig, seed: int) -> tuple[list[Task], Oracles, bool]:
    """Returns (suite, oracles, deterministic)."""
    if args.backend == "sim":
        world = SimWorld.load(args.world) if args.world else SimWorld.hard_subset(seed=0)
        return world.suite, SimBackend(world, seed).oracles(), True
    if args.backend == "scripted":
        from .backends.scripted import ScriptedSuite

        if not args.suite:
            raise ConfigError("--backend scripted needs --suite FILE")
        suite = ScriptedSuite.load(args.suite)
        return suite.tasks, suite.oracles(HashingEmbedder()), True
    from .backends.remote import ExpectedOutputGrader, load_endpoint, remote_oracles

    if not args.endpoint or not args.suite:
        raise ConfigError("--backend remote needs --endpoint FILE and --suite FILE")
    data = json.loads(Path(args.suite).read_text())
    tasks = [Task(r["id"], r["prompt"], r["split"], data.get("suite", "default")) for r in data["tasks"]]
    grader = ExpectedOutputGrader({r["id"]: r["expected"] for r in data["tasks"] if "expected" in r})
    return tasks, remote_oracles(load_endpoint(args.endpoint), grader), False


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, Any] = {}
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    if getattr(args, "name", None):
        cfg = apply_ablation(cfg, args.name)
    return cfg.override(**overrides) if overrides else cfg


# --------------------------------------------------------------------------- run / ablate


def _run_one(args: argparse.Namespace, cfg: RunConfig, seed: int, out: Path) -> dict[str, Any]:
    run_dir = out / f"seed-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    store_path = run_dir / "store.sqlite"
    if store_path.exists():
        raise ConfigError(f"{store_path} already exists; use a fresh --out-dir")
    suite, oracles, deterministic = _build_backend(args, cfg, seed)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    clock = LogicalClock() if deterministic else utc_now
    with EvidenceLog(store_path, contribution_splits=cfg.contribution_splits) as store:
        with open(run_dir / "rounds.jsonl", "w") as fh:
            def on_round(res: RoundResult) -> None:
                fh.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
                fh.flush()
                log.info("seed %d round %d eval %.3f active %d", seed, res.round, res.eval_pass1, res.active_count)

            state, results = run_loop(cfg, suite, oracles, store, seed=seed, meta=default_meta_skill(cfg.suite),
                                      clock=clock, on_round=on_round)
        counters = store.operational_counters(state.bank)
        summary = run_summary(results, counters.__dict__)
        summary["seed"] = seed
        summary["log_digest"] = store.digest()
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _mean_std(values: Sequence[float | None]) -> dict[str, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": statistics.fmean(vals), "std": statistics.stdev(vals) if len(vals) > 1 else None}


def _aggregate(summaries: Sequence[dict[str, Any]]) -> dict[str, Any]:
    return {key: _mean_std([s[key] for s in summaries]) for key in ("baseline", "peak", "rolling_gain")}


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.dump_config:
        _emit(cfg.to_dict())
        return EXIT_OK
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    out = Path(args.out_dir)
    summaries = [_run_one(args, cfg, seed, out) for seed in seeds]
    agg = {"config": cfg.to_dict(), "runs": summaries, "aggregate": _aggregate(summaries)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    _emit({"runs": summaries, "aggregate": agg["aggregate"]})
    return EXIT_OK


# --------------------------------------------------------------------------- report


def _run_dirs(paths: Sequence[str]) -> list[Path]:
    dirs: list[Path] = []
    for p in map(Path, paths):
        children = sorted(c for c in p.glob("seed-*") if c.is_dir()) if p.is_dir() else []
        dirs.extend(children or [p])
    return dirs


def load_run(run_dir: Path) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        rows = [json.loads(line) for line in (run_dir / "rounds.jsonl").read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as exc:
        raise IncompleteRun(f"{run_dir}: {exc}") from exc
    if len(rows) != summary.get("rounds"):
        raise IncompleteRun(f"{run_dir}: {len(rows)} round rows, summary says {summary.get('rounds')}")
    return summary, rows


def curve_rows(seed: int, rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    born = retired = 0
    out = []
    for r in rows:
        born += r["skills_born"]
        retired += r["skills_retired"]
        out.append({"round": r["round"], "seed": seed, "eval_pass1": r["eval_pass1"],
                    "train_pass1": r["train_pass1"], "active": r["active_count"],
                    "born_cum": born, "retired_cum": retired})
    return out


def cmd_report(args: argparse.Namespace) -> int:
    runs = [(d, *load_run(d)) for d in _run_dirs(args.run_dirs)]
    if not runs:
        raise IncompleteRun("no runs given")
    lengths = {len(rows) for _, _, rows in runs}
    if len(lengths) > 1:
        raise IncompleteRun(f"runs have mismatched round counts: {sorted(lengths)}")
    table = []
    curves = []
    for d, summary, rows in runs:
        curve = [r["eval_pass1"] for r in rows]
        seed = summary.get("seed")
        table.append({"run": str(d), "seed": seed, "baseline": curve[0], "peak": peak(curve),
                      "rolling_gain": rolling_gain(curve) if len(curve) >= 20 else None})
        curves.extend(curve_rows(seed, rows))
    if args.curve_csv:
        with open(args.curve_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, CURVE_COLUMNS)
            writer.writeheader()
            writer.writerows(curves)
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(curves)
        sys.stdout.write(buf.getvalue())
    else:
        _emit({"runs": table, "aggregate": _aggregate(table)})
    return EXIT_OK


# --------------------------------------------------------------------------- simulate / probe


def _world(args: argparse.Namespace) -> SimWorld:
    world = SimWorld.load(args.world) if args.world else SimWorld.hard_subset(seed=args.world_seed)
    if args.generator:
        kind, _, rest = args.generator.partition(":")
        nums = [float(x) for x in rest.split(",") if x]
        if kind == "uniform":
            gen = EffectGenerator("uniform", low=nums[0], high=nums[1])
        else:
            gen = EffectGenerator(kind, value=nums[0] if nums else 0.0)
        world = world.with_generator(gen)
    return world


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args).override(parallelism=1)
    world = _world(args)
    seeds = list(range(args.n_seeds)) if args.n_seeds else list(cfg.seeds)
    report = simulate_run(world, cfg, cfg.rounds, seeds, delta=args.delta)
    _emit({"floor": report.floor.to_dict(), "noise_floor": world.noise_floor(),
           "runs": [{"seed": r.seed, "long_run_mean": r.long_run_mean,
                     "rolling_gain": rolling_gain(r.curve) if len(r.curve) >= 20 else None,
                     "final_active": r.results[-1].active_count if r.results else 0} for r in report.runs]})
    return EXIT_OK


def cmd_probe_filter(args: argparse.Namespace) -> int:
    world = _world(args)
    seeds = args.probe_seeds or list(DEFAULT_PROBE_SEEDS)
    backend = SimBackend(world, run_seed=0)
    kept = probe_filter(world.suite, backend, seeds, backend)
    _emit({"probe_seeds": seeds, "pool": len(world.tasks), "retained": [t.task_id for t in kept]})
    return EXIT_OK


# --------------------------------------------------------------------------- validate / dump


def cmd_validate_skill(args: argparse.Namespace) -> int:
    try:
        text = Path(args.path).read_text()
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        skill = validate_skill(text, args.budget)
    except ValidationError as exc:
        _emit({"valid": False, "error": type(exc).__name__, "detail": str(exc)})
        return EXIT_INVALID
    _emit({"valid": True, "id": skill.id, "chars": len(skill.yaml)})
    return EXIT_OK


def cmd_dump_log(args: argparse.Namespace) -> int:
    if not Path(args.store).exists():
        raise ConfigError(f"no store at {args.store}")
    with EvidenceLog(args.store) as store:
        for line in store.dump_jsonl(args.up_to):
            sys.stdout.write(line + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON file with RunConfig knobs")
    p.add_argument("--seed", type=int, help="single seed (default: every seed in the config)")
    p.add_argument("--backend", choices=("remote", "sim", "scripted"), default="sim")
    p.add_argument("--rounds", type=int, help="override config rounds")
    p.add_argument("--out-dir", default="runs/out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--world", help="SimWorld JSON file (sim backend)")
    p.add_argument("--suite", help="task suite JSON (scripted/remote backends)")
    p.add_argument("--endpoint", help="endpoint YAML (remote backend)")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")


def _world_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--world", help="SimWorld JSON file (default: probe-filtered hard subset)")
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--generator", help="effect generator, e.g. uniform:-0.2,0.2 or adversarial:-0.1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillbank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the loop for one or more seeds")
    _run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run with one of the A1-A8 overrides")
    p.add_argument("name", help=f"one of {', '.join(ABLATIONS)}")
    _run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="Monte Carlo floor check in a simulated world")
    _world_flags(p)
    p.add_argument("--config")
    p.add_argument("--rounds", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--n-seeds", type=int, help="use seeds 0..N-1 instead of the config seeds")
    p.add_argument("--delta", type=float, default=1e-3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summary table and curve CSV for finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--curve-csv", help="also write the curve CSV here")
    p.add_argument("--csv", action="store_true", help="print the curve CSV instead of the JSON table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate-skill", help="check a skill YAML against the schema and budget")
    p.add_argument("path")
    p.add_argument("--budget", type=int, default=1500)
    p.set_defaults(func=cmd_validate_skill)

    p = sub.add_parser("probe-filter", help="list the tasks a no-skill solver fails on some probe seed")
    _world_flags(p)
    p.add_argument("--probe-seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_probe_filter)

    p = sub.add_parser("dump-log", help="export a store as JSONL")
    p.add_argument("store")
    p.add_argument("--up-to", type=int, help="last round to include")
    p.set_defaults(func=cmd_dump_log)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
