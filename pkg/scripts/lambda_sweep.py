"""mAP@0.5 of the full model across fusion weights, per seed and averaged.

    python scripts/lambda_sweep.py --preset separable-default --seeds 10
"""
import argparse

import numpy as np

from emmil.data import PRESETS, generate, preset
from emmil.pipeline import fit, infer, score_proposals
from emmil.training import desk_config

LAMBDAS = (0.0, 0.3, 0.5, 0.8, 1.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="separable-default", choices=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()

    table = []
    print("seed " + " ".join(f"{lam:>7.2f}" for lam in LAMBDAS))
    for s in range(args.seeds):
        train_set = generate(preset(args.preset, seed=s))
        test_set = generate(preset(args.preset, seed=s, split=1))
        cfg = desk_config(seed=s, track_diagnostics=False)
        model = fit(cfg, train_set).model
        row = [score_proposals(infer(model, test_set, lam, cfg.gamma), test_set).mAP[0.5]
               for lam in LAMBDAS]
        table.append(row)
        print(f"{s:>4} " + " ".join(f"{v:>7.4f}" for v in row))
    print("mean " + " ".join(f"{v:>7.4f}" for v in np.mean(table, axis=0)))


if __name__ == "__main__":
    main()
