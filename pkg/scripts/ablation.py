"""Three-row ablation (attention / joint pseudo-labels / full) on one or more presets.

    python scripts/ablation.py --presets separable-default peaked --seeds 5
"""
import argparse

from emmil.data import PRESETS, generate, preset
from emmil.pipeline import ABLATION_ROWS, AblationRow, format_ablation, run_and_score
from emmil.training import desk_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--presets", nargs="+", default=["separable-default", "peaked"],
                    choices=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    for name in args.presets:
        rows = [AblationRow(r, m, mode, [], []) for r, m, mode in ABLATION_ROWS]
        for s in range(args.seeds):
            # each seed gets its own concepts; evaluation uses a held-out split
            train_set = generate(preset(name, seed=s))
            test_set = generate(preset(name, seed=s, split=1))
            for row in rows:
                cfg = desk_config(seed=s, model=row.model, mode=row.mode,
                                  learning_rate=args.lr, track_diagnostics=False)
                rep, _ = run_and_score(cfg, train_set, test_set)
                row.f1.append(rep.instance["f1"])
                row.map50.append(rep.mAP[0.5])
        print(f"== {name}, {args.seeds} seeds")
        print(format_ablation(rows))


if __name__ == "__main__":
    main()
