"""Train the full model on several seeds of a preset and report recovery.

    python scripts/recovery.py --preset separable-default --seeds 10
"""
import argparse
import time

import numpy as np

from emmil.data import PRESETS, generate, preset
from emmil.pipeline import run_and_score
from emmil.training import desk_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="separable-default", choices=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    print(f"{'seed':>4} {'inst F1':>8} {'mAP@0.5':>8} {'avg mAP':>8} {'recall@10':>9} "
          f"{'recall@30':>9} {'elbo 0':>10} {'elbo end':>10} {'sec':>5}")
    f1s, maps = [], []
    for s in range(args.seeds):
        train_set = generate(preset(args.preset, seed=s))
        test_set = generate(preset(args.preset, seed=s, split=1))
        t0 = time.perf_counter()
        rep, state = run_and_score(desk_config(seed=s, learning_rate=args.lr), train_set, test_set)
        h = state.history
        f1s.append(rep.instance["f1"])
        maps.append(rep.mAP[0.5])
        print(f"{s:>4} {f1s[-1]:>8.4f} {maps[-1]:>8.4f} {rep.average_mAP:>8.4f} "
              f"{h[10]['key_recall']:>9.4f} {h[30]['key_recall']:>9.4f} "
              f"{h[0]['elbo_proxy']:>10.1f} {h[-1]['elbo_proxy']:>10.1f} "
              f"{time.perf_counter() - t0:>5.1f}")
    print(f"mean {np.mean(f1s):>8.4f} {np.mean(maps):>8.4f}")


if __name__ == "__main__":
    main()
