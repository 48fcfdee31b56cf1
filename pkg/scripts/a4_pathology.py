"""Harsh retirement knobs (A4) versus Default in a mixed-effect world.

Prints per-config positive-effect retirements and final active counts, plus
a one-sided Mann-Whitney p-value on the retirement counts.
"""

from __future__ import annotations

import argparse
import json
import statistics
import time

from scipy.stats import mannwhitneyu

from skillbank.backends.sim import EffectGenerator, SimWorld, simulate_run
from skillbank.loop import RunConfig, apply_ablation


def mixed_world(seed: int = 0) -> SimWorld:
    return SimWorld.hard_subset(seed=seed, n_modes=96, p0_beta=(1, 3),
                                generator=EffectGenerator("uniform", low=-0.2, high=0.2))


def compare(rounds: int, seeds: list[int]) -> dict:
    world = mixed_world()
    base = RunConfig().override(parallelism=1)
    out = {}
    for name, cfg in (("default", base), ("A4", apply_ablation(base, "A4"))):
        rep = simulate_run(world, cfg, rounds, seeds)
        out[name] = {
            "positive_retired": [r.positive_retired() for r in rep.runs],
            "final_active": [r.results[-1].active_count for r in rep.runs],
            "long_run_mean": statistics.fmean(rep.floor.long_run_means),
        }
    p = mannwhitneyu(out["A4"]["positive_retired"], out["default"]["positive_retired"], alternative="greater").pvalue
    out["p_value"] = float(p)
    out["active_ratio"] = statistics.fmean(out["A4"]["final_active"]) / statistics.fmean(out["default"]["final_active"])
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--seeds", type=int, default=50)
    args = ap.parse_args()
    t0 = time.perf_counter()
    res = compare(args.rounds, list(range(args.seeds)))
    res["seconds"] = round(time.perf_counter() - t0, 1)
    for name in ("default", "A4"):
        r = res[name]
        r["mean_positive_retired"] = statistics.fmean(r["positive_retired"])
        r["mean_final_active"] = statistics.fmean(r["final_active"])
    print(json.dumps({k: (v if not isinstance(v, dict) else {kk: vv for kk, vv in v.items()
                                                             if not isinstance(vv, list)})
                      for k, v in res.items()}, indent=2))


if __name__ == "__main__":
    main()
