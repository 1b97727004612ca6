"""Pick per-condition temperatures / mixing weight by validation mAP.

Tuning seeds are disjoint from the seeds used by the directional
experiments (0..4), and selection only looks at the validation split.

    python scripts/tune_synthetic.py --seeds 1000 1001 --out tuning.json
"""

import argparse
import itertools
import json
import time

import numpy as np

from gradrel.experiments import SyntheticSpec, run_grid
from gradrel.model import TrainConfig

OMEGAS = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
TAUS = (0.05, 0.07, 0.1, 0.2, 0.5)
JOINT_OMEGAS = (0.5, 1.0, 2.0)
JOINT_TAUS = (0.1, 0.2, 0.5)
ALPHAS = (0.05, 0.1, 0.25, 0.5)


def candidates():
    for w in OMEGAS:
        yield "listnet_graded", {"omega": w}
        yield "listnet_binary", {"omega": w}
    for t in TAUS:
        yield "infonce", {"tau": t}
    for w, t, a in itertools.product(JOINT_OMEGAS, JOINT_TAUS, ALPHAS):
        yield "joint", {"omega": w, "tau": t, "alpha": a}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1000, 1001])
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--embed-dim", type=int, default=300)
    ap.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    spec = SyntheticSpec(noise=args.noise)
    base = TrainConfig(max_epochs=args.max_epochs, embed_dim=args.embed_dim)
    scores: dict[str, list] = {}
    t0 = time.time()
    for condition, params in candidates():
        cfg = TrainConfig(**{**base.__dict__, **params})
        runs = run_grid({condition: cfg}, args.seeds, spec, split="validation")[condition]
        val_map = float(np.mean([r.map for r in runs]))
        scores.setdefault(condition, []).append((val_map, params))
        print(f"{time.time() - t0:7.1f}s {condition:15s} {params} val_map={val_map:.4f}", flush=True)

    best = {c: max(v, key=lambda x: x[0]) for c, v in scores.items()}
    for c, (m, p) in best.items():
        print(f"best {c:15s} {p} val_map={m:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({c: {"val_map": m, **p} for c, (m, p) in best.items()}, fh, indent=1)


if __name__ == "__main__":
    main()
