"""Retrieval comparison of the four training conditions on synthetic data.

Prints mean ± sd of mAP and R@10 over seeded repeats, one row per
condition, using the validation-selected hyperparameters.

    python scripts/retrieval_table.py --seeds 0 1 2 3 4 --out retrieval.json
"""

import argparse
import json
import time

from gradrel.experiments import CONDITIONS, SyntheticSpec, run_grid, summarize, tuned_configs
from gradrel.model import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--embed-dim", type=int, default=300)
    ap.add_argument("--out")
    args = ap.parse_args()

    t0 = time.time()
    configs = tuned_configs(TrainConfig(max_epochs=args.max_epochs, embed_dim=args.embed_dim))
    summary = summarize(run_grid(configs, args.seeds, SyntheticSpec(noise=args.noise)))
    print(f"{'condition':16s} {'mAP':>16s} {'R@10':>16s}")
    for c in CONDITIONS:
        s = summary[c]
        print(f"{c:16s} {s['map']:.3f} ± {s['map_sd']:.3f}    {s['recall']:.3f} ± {s['recall_sd']:.3f}")
    print(f"({len(args.seeds)} seeds, {time.time() - t0:.0f}s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=1)


if __name__ == "__main__":
    main()
