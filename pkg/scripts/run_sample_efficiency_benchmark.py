#!/usr/bin/env python3
"""Desk-scale sample-efficiency comparison on CarFlag-1D (half-size 10).

Trains the constrained (equi) and unconstrained (plain) recurrent A2C agents
with parameter-matched networks and identical training hyperparameters over
four seeds each, then reports the first evaluation step at which each run
reaches a 0.9 success rate. Curves and aggregates land in the output
directory, one run directory per (variant, seed).

Usage:
    python3 scripts/run_sample_efficiency_benchmark.py [--steps 300000]
        [--seeds 0 1 2 3] [--out benchmark-out]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from equipomdp.agent import (  # noqa: E402
    benchmark_agent_config,
    benchmark_env_config,
    steps_to_threshold,
    train,
)
from equipomdp.cli import main as cli_main  # noqa: E402


def run(args) -> int:
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    env_cfg = benchmark_env_config()
    results = {}
    for variant in ("equi", "plain"):
        crossings = []
        for seed in args.seeds:
            cfg = benchmark_agent_config(variant, seed, args.steps)
            run_dir = out_root / f"{variant}-s{seed}"
            t0 = time.perf_counter()
            res = train(env_cfg, cfg, run_dir)
            cross = steps_to_threshold(res.rows, args.threshold)
            final = res.rows[-1][2] if res.rows else float("nan")
            crossings.append(cross)
            print(f"{variant} seed {seed}: steps-to-{args.threshold} = {cross}, "
                  f"final success {final:.2f} [{time.perf_counter() - t0:.0f}s]")
        results[variant] = crossings
        cli_main(["plotdata", *(str(out_root / f"{variant}-s{s}") for s in args.seeds),
                  "--out", str(out_root / f"{variant}-aggregate.csv")])

    censor = args.steps + 1
    medians = {v: float(np.median([c if c is not None else censor for c in cs]))
               for v, cs in results.items()}
    hits = sum(c is not None for c in results["equi"])
    print(f"\nequi:  crossings {results['equi']}  median {medians['equi']:.0f}")
    print(f"plain: crossings {results['plain']}  median {medians['plain']:.0f}")
    ok = hits >= 3 and medians["equi"] < medians["plain"]
    print("VERDICT:", "equi reaches the threshold on enough seeds and is more "
          "sample efficient" if ok else "comparison did not reproduce")
    return 0 if ok else 1


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=300_000)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    parser.add_argument("--threshold", type=float, default=0.9)
    parser.add_argument("--out", default="benchmark-out")
    return run(parser.parse_args())


if __name__ == "__main__":
    sys.exit(main())
