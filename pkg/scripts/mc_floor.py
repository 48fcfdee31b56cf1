"""Monte Carlo check of the non-divergence floor under several effect generators."""

from __future__ import annotations

import argparse
import json
import time

from skillbank.backends.sim import EffectGenerator, SimWorld, simulate_run
from skillbank.loop import RunConfig

GENERATORS = {
    "adversarial-0.10": EffectGenerator("adversarial", value=-0.10),
    "adversarial-0.30": EffectGenerator("adversarial", value=-0.30),
    "uniform-0.2": EffectGenerator("uniform", low=-0.2, high=0.2),
    "benign": EffectGenerator("uniform", low=0.0, high=0.3),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--generator", choices=sorted(GENERATORS), nargs="+", default=["adversarial-0.10"])
    ap.add_argument("--n-tasks", type=int, default=100)
    args = ap.parse_args()
    cfg = RunConfig().override(parallelism=1)
    for name in args.generator:
        world = SimWorld.generate(args.n_tasks, seed=0, generator=GENERATORS[name])
        t0 = time.perf_counter()
        rep = simulate_run(world, cfg, args.rounds, list(range(args.seeds)))
        print(json.dumps({"generator": name, **rep.floor.to_dict(), "seconds": round(time.perf_counter() - t0, 1)}))


if __name__ == "__main__":
    main()
