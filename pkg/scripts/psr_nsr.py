"""Rank-1 concentration when training only on positive or only on negative samples.

    python scripts/psr_nsr.py --out runs/psr_nsr
"""

import argparse
import statistics
from pathlib import Path

from rlvr_lab.experiments import SEEDS, branchchain_config, final_eval
from rlvr_lab.runner import export_plot_data, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/psr_nsr")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()

    rank1 = {}
    for v in ("PSR", "GRPO", "NSR"):
        for s in args.seeds:
            d = Path(args.out) / f"{v}_seed{s}"
            train(branchchain_config(v, s, d, total_steps=args.steps, eval_every=50))
            export_plot_data(d / "metrics.jsonl", "lambda", d / "plots")
            ev = final_eval(d)["final"]
            rank1.setdefault(v, []).append(ev["lambda"]["geo_rank"][0])
            print(f"{v:4s} seed {s}: rank1 {ev['lambda']['geo_rank'][0]:.4f}  pass@1 {ev['pass_at_k']['1']:.3f}  "
                  f"pass@64 {ev['pass_at_k']['64']:.3f}")
    print()
    for v, vals in rank1.items():
        print(f"{v:4s} median final rank-1 geo-mean {statistics.median(vals):.4f}")


if __name__ == "__main__":
    main()
