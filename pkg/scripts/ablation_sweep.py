"""Run Default and every ablation in a simulated world and print a summary table."""

from __future__ import annotations

import argparse
import json
import statistics

from skillbank.backends.sim import EffectGenerator, SimWorld, simulate_run
from skillbank.loop import ABLATIONS, RunConfig, apply_ablation, config_diff, rolling_gain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 7, 13])
    ap.add_argument("--low", type=float, default=-0.2, help="lower bound of skill effects")
    ap.add_argument("--high", type=float, default=0.2, help="upper bound of skill effects")
    args = ap.parse_args()

    world = SimWorld.hard_subset(seed=0, generator=EffectGenerator("uniform", low=args.low, high=args.high))
    base = RunConfig().override(parallelism=1)
    rows = []
    for name in ["Default", *ABLATIONS]:
        cfg = base if name == "Default" else apply_ablation(base, name)
        rep = simulate_run(world, cfg, args.rounds, args.seeds)
        gains = [rolling_gain(r.curve) for r in rep.runs] if args.rounds >= 20 else []
        rows.append({
            "config": name,
            "knob": {k: v for k, (_, v) in config_diff(base, cfg).items()},
            "long_run_mean": round(rep.floor.mean, 4),
            "rolling_gain": round(statistics.fmean(gains), 4) if gains else None,
            "final_active": statistics.fmean(r.results[-1].active_count for r in rep.runs),
            "engagement": round(statistics.fmean(r.results[-1].router_engagement for r in rep.runs), 3),
        })
    for row in rows:
        print(json.dumps(row))


if __name__ == "__main__":
    main()
