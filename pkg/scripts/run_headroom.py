"""Attribute headroom table on the benchmark eval split, plus the enhanced-depth swap with a
freshly trained PRT head.

    python3 scripts/run_headroom.py --seed 0 --out results/headroom
"""

import argparse
import logging
from pathlib import Path

from prtfusion.config import load_config
from prtfusion.headroom import enhanced_depth_report, frame_key, headroom_report
from prtfusion.pipeline import benchmark_sequences, run_seed


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-enhanced", action="store_true", help="only the attribute headroom table")
    p.add_argument("--out", default="results/headroom")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = load_config(args.config)
    cfg = run.benchmark(("prt",))
    profile = run.profile
    out = Path(args.out)

    if args.skip_enhanced:
        _, seqs = benchmark_sequences(cfg, args.seed)
        hr = headroom_report(seqs, profile)
        print(hr.table())
        hr.write(out, "headroom")
        return
    result = run_seed(cfg, args.seed, associations=("predicted",))
    seqs = result.eval_sequences
    hr = headroom_report(seqs, profile)
    print(hr.table())
    hr.write(out, "headroom")
    pred, refs = result.predictions["prt"]["predicted"]
    depths = {(frame_key(r.sequence, r.frame), r.object_id): float(z) for r, z in zip(refs, pred)}
    enh = enhanced_depth_report(seqs, depths, profile)
    print()
    print(enh.table())
    enh.write(out, "enhanced_depth")


if __name__ == "__main__":
    main()
