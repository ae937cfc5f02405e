"""Recall@20 drop under uniform injected noise, full model versus plain backbone."""

import argparse

from llard.evaluation import write_sweep
from llard.experiments import PLANTED_CONFIG, baseline_config, planted_robustness


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--ratios", type=float, nargs="+", default=[0.05, 0.10, 0.15, 0.20])
    parser.add_argument("--out-prefix", help="write <prefix>_full.tsv and <prefix>_base.tsv")
    args = parser.parse_args()

    runs = {"full": PLANTED_CONFIG, "base": baseline_config(PLANTED_CONFIG)}
    print("model\tratio\trecall@20\tdrop_rate")
    for name, cfg in runs.items():
        rows = planted_robustness(args.seed, cfg, ratios=args.ratios)
        for r in rows:
            print(f"{name}\t{r.ratio:.2f}\t{r.recall:.4f}\t{r.drop_rate:.4f}", flush=True)
        if args.out_prefix:
            write_sweep(rows, f"{args.out_prefix}_{name}.tsv")


if __name__ == "__main__":
    main()
