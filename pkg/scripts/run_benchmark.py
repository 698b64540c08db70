"""Train every benchmark head on three seeds and print median per-object depth errors.

    python3 scripts/run_benchmark.py --seeds 0 1 2 --out results/benchmark
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from prtfusion.config import format_depth_table, load_config
from prtfusion.metrics import DepthMetrics
from prtfusion.pipeline import ASSOCIATIONS, run_seed


def median_rows(results, heads, association):
    rows = {}
    for h in heads:
        ms = [r.metrics[h][association].as_dict() for r in results]
        rows[h] = DepthMetrics(**{k: float(np.median([m[k] for m in ms])) for k in ms[0]})
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--heads", nargs="+", help="subset of heads (default: the standard set)")
    p.add_argument("--out", default="results/benchmark")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config).benchmark(args.heads)
    start = time.perf_counter()
    results = [run_seed(cfg, s) for s in args.seeds]
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"seeds": args.seeds, "seconds": elapsed, "per_seed": {}, "median": {}}
    for assoc in ASSOCIATIONS:
        rows = median_rows(results, cfg.heads, assoc)
        print(format_depth_table(rows, title=f"median over seeds {args.seeds}, association: {assoc}"))
        print()
        summary["median"][assoc] = {h: m.as_dict() for h, m in rows.items()}
    for r in results:
        summary["per_seed"][r.seed] = {h: {a: m.as_dict() for a, m in v.items()} for h, v in r.metrics.items()}
    (out / "benchmark.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(args.seeds)} seeds x {len(cfg.heads)} heads in {elapsed:.0f} s -> {out / 'benchmark.json'}")


if __name__ == "__main__":
    main()
