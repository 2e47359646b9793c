"""Rank-k concentration under GRPO and SimKO on the forking-path task.

Trains both variants over several seeds, exports tidy CSVs for plotting and
prints the final rank-1/rank-2 geometric means and pass@K per run.

    python scripts/concentration.py --out runs/concentration --seeds 0 1 2 3 4
"""

import argparse
import json
import statistics
from pathlib import Path

from rlvr_lab.experiments import SEEDS, branchchain_config, final_eval
from rlvr_lab.runner import export_plot_data, train


def gated_positive_share(metrics_path: Path) -> float:
    gp = pos = 0
    for line in metrics_path.read_text().splitlines():
        row = json.loads(line)
        if "token_counts" in row:
            gp += row["token_counts"]["gated_positive"]
            pos += row["token_counts"]["positive"]
    return gp / pos if pos else 0.0


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/concentration")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--variants", nargs="+", default=["GRPO", "SimKO"])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--eval-every", type=int, default=50)
    args = ap.parse_args()

    finals = {}
    for v in args.variants:
        for s in args.seeds:
            d = Path(args.out) / f"{v}_seed{s}"
            train(branchchain_config(v, s, d, total_steps=args.steps, eval_every=args.eval_every))
            for kind in ("lambda", "passk", "entropy"):
                export_plot_data(d / "metrics.jsonl", kind, d / "plots")
            ev = final_eval(d)["final"]
            finals[(v, s)] = ev
            print(f"{v:6s} seed {s}: rank1 {ev['lambda']['geo_rank'][0]:.4f}  rank2 {ev['lambda']['geo_rank'][1]:.3e}  "
                  f"pass@1 {ev['pass_at_k']['1']:.3f}  pass@16 {ev['pass_at_k']['16']:.3f}  "
                  f"pass@64 {ev['pass_at_k']['64']:.3f}  gated share of A>0 tokens "
                  f"{gated_positive_share(d / 'metrics.jsonl'):.3f}")

    print()
    for v in args.variants:
        r2 = statistics.median(finals[(v, s)]["lambda"]["geo_rank"][1] for s in args.seeds)
        p1 = statistics.median(finals[(v, s)]["pass_at_k"]["1"] for s in args.seeds)
        print(f"{v:6s} median rank-2 geo-mean {r2:.3e}, median pass@1 {p1:.3f}")


if __name__ == "__main__":
    main()
