"""Train the three phases on synthetic paintings and run the directional benchmark.

    python3 scripts/run_benchmark.py --workdir runs/bench --out runs/bench/results.json
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from lpgen.bench import BenchConfig, directional_benchmark, directional_verdict, heldout_set, train_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/bench")
    ap.add_argument("--out", help="results JSON (default: <workdir>/results.json)")
    ap.add_argument("--w", type=float, help="guidance weight override")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    bc = BenchConfig()
    if args.w is not None:
        bc.w = args.w
    work = Path(args.workdir)
    t0 = time.time()
    pipe = train_pipeline(bc, work)
    lead, trail = np.mean(pipe.losses["base"][:50]), np.mean(pipe.losses["base"][450:500])
    held = heldout_set(bc, work)
    t1 = time.time()
    res = directional_benchmark(pipe.models, held, bc)
    verdict = directional_verdict(res)
    out = {
        "config": bc.to_json(),
        "train_seconds": pipe.seconds,
        "benchmark_seconds": time.time() - t1,
        "base_loss_ratio_500": float(trail / lead),
        "scores": res,
        "verdict": verdict,
        "total_seconds": time.time() - t0,
    }
    path = Path(args.out) if args.out else work / "results.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2, default=str) + "\n")
    for name, ok in verdict.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(path)
    return 0 if all(verdict.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
