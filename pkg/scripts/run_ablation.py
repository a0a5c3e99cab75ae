"""Method grid on the default stream: median average FR and ASR per method over several seeds.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out results/ablation.json
"""
import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from lifelora import lifecycle as lc

METHODS = ("full", "no-GGM", "no-INA", "no-SOT", "seq-ft")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    p.add_argument("--methods", nargs="+", default=list(METHODS))
    p.add_argument("--out", type=Path, default=Path("results/ablation.json"))
    args = p.parse_args()

    base = lc.RunConfig()
    rows = []
    for m in args.methods:
        for s in args.seeds:
            t0 = time.perf_counter()
            _, rep = lc.train_stream(replace(base, method=m, stream_seed=s))
            rows.append({"method": m, "seed": s, **rep.summary, "per_skill_fr": [r["fr"] for r in rep.skills if not r["holdout"]]})
            print(f"{m:>7} seed {s}: avg FR {rep.summary['avg_fr']:.3f}  avg ASR {rep.summary['avg_asr']:.3f}"
                  f"  ({time.perf_counter() - t0:.0f}s)", file=sys.stderr)

    table = {}
    for m in args.methods:
        mine = [r for r in rows if r["method"] == m]
        table[m] = {
            "median_avg_fr": float(np.median([r["avg_fr"] for r in mine])),
            "median_avg_asr": float(np.median([r["avg_asr"] for r in mine])),
            "median_avg_sr_gt": float(np.median([r["avg_sr_gt"] for r in mine])),
        }
    print(f"\n{'method':>8} {'FR':>7} {'ASR':>7} {'SR_gt':>7}")
    for m, t in table.items():
        print(f"{m:>8} {t['median_avg_fr']:7.3f} {t['median_avg_asr']:7.3f} {t['median_avg_sr_gt']:7.3f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"seeds": args.seeds, "medians": table, "runs": rows}, indent=1) + "\n")


if __name__ == "__main__":
    main()
