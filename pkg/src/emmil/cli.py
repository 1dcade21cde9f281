"""Command-line entry point.

    emmil generate --preset separable-default --out data/train
    emmil train    --dataset data/train --out runs/full [--config cfg.json] [--model emmil] [--mode alternating]
    emmil infer    --model runs/full/model.json --dataset data/test --out runs/full/infer [--lambda 0.8]
    emmil eval     --proposals runs/full/infer/proposals.tsv --dataset data/test --out runs/full/eval
    emmil ablate   --dataset data/train --eval-dataset data/test --out runs/ablate [--seeds 5]
    emmil sweep-lambda --model runs/full/model.json --dataset data/test --out runs/full/sweep

Exit codes: 0 success, 1 user error, 2 internal invariant violation.
Set EMMIL_LOG_LEVEL (e.g. DEBUG) for more output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from emmil import __version__
from emmil.data import PRESETS, SynthSpec, fingerprint, generate, load_features, preset, save_dataset
from emmil.errors import ConfigError, EmmilError, InvariantError
from emmil.evaluation import AVERAGE_ALPHAS, TABLE_ALPHAS, format_report
from emmil.inference import read_proposals, write_proposals
from emmil.pipeline import ablate, format_ablation, infer, load_model, save_model, score_proposals, fit
from emmil.training import TrainConfig

log = logging.getLogger("emmil")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_manifest(out: Path, command: str, config: dict, seed, dataset_dirs: list[Path],
                    artifacts: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "datasets": {str(d): fingerprint(d) for d in dataset_dirs},
        "artifacts": artifacts,
        "tool_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    overrides = {}
    for flag, field in (("model", "model"), ("mode", "mode"), ("seed", "seed"), ("lr", "learning_rate"),
                        ("gamma", "gamma"), ("lam", "lam")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[field] = v
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    if args.spec:
        try:
            spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read spec {args.spec}: {e}") from None
    else:
        spec = preset(args.preset)
    over = {k: v for k, v in (("seed", args.seed), ("split", args.split)) if v is not None}
    spec = replace(spec, **over)
    ds = generate(spec)
    out = save_dataset(ds, args.out)
    n_pos = sum(b.is_positive for b in ds)
    n_seg = sum(len(b.segments) for b in ds)
    print(f"{out}: {len(ds)} bags ({n_pos} positive, {len(ds) - n_pos} negative), "
          f"{ds.num_classes} classes, d={ds.feature_dim}, {n_seg} segments")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = load_features(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = fit(cfg, ds, out / "train_log.jsonl")
    save_model(state.model, cfg, out / "model.json")
    _write_manifest(out, "train", cfg.to_dict(), cfg.seed, [Path(args.dataset)],
                    {"model": "model.json", "log": "train_log.jsonl"})
    last = state.history[-1]
    print(f"trained {cfg.model}/{cfg.mode} for {cfg.epochs} epochs; final loss {last['mean_loss']:.6f}")
    return 0


def cmd_infer(args) -> int:
    model, cfg = load_model(args.model)
    if args.lam is not None:
        cfg = replace(cfg, lam=args.lam)
    if args.gamma is not None:
        cfg = replace(cfg, gamma=args.gamma)
    cfg.validate()
    ds = load_features(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    props = infer(model, ds, cfg.lam, cfg.gamma, cfg.proposal_score)
    write_proposals(props, out / "proposals.tsv")
    _write_manifest(out, "infer", cfg.to_dict(), cfg.seed, [Path(args.dataset)],
                    {"proposals": "proposals.tsv", "model": str(args.model)})
    print(f"{len(props)} proposals -> {out / 'proposals.tsv'}")
    return 0


def _parse_alphas(text: str | None):
    if not text:
        return sorted(set(TABLE_ALPHAS) | set(AVERAGE_ALPHAS))
    try:
        vals = [float(a) for a in text.split(",")]
    except ValueError:
        raise ConfigError(f"--alphas must be comma-separated numbers, got {text!r}") from None
    if any(not 0 < a <= 1 for a in vals):
        raise ConfigError("--alphas must lie in (0, 1]")
    return vals


def cmd_eval(args) -> int:
    ds = load_features(args.dataset)
    props = read_proposals(args.proposals)
    report = score_proposals(props, ds, _parse_alphas(args.alphas))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(report, f"evaluation of {args.proposals}")
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "eval", {"alphas": report.alphas}, None, [Path(args.dataset)],
                    {"report": "report.txt", "report_json": "report.json",
                     "proposals": str(args.proposals)})
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    train_set = load_features(args.dataset)
    eval_dir = args.eval_dataset or args.dataset
    eval_set = load_features(eval_dir)
    rows = ablate(cfg, train_set, eval_set, range(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = format_ablation(rows)
    (out / "ablation.txt").write_text(text)
    _write_manifest(out, "ablate", cfg.to_dict(), list(range(args.seeds)),
                    sorted({Path(args.dataset), Path(eval_dir)}), {"report": "ablation.txt"})
    sys.stdout.write(text)
    return 0


def cmd_sweep_lambda(args) -> int:
    model, cfg = load_model(args.model)
    ds = load_features(args.dataset)
    lams = [float(x) for x in args.lambdas.split(",")]
    lines = [f"{'lambda':>8s} {'mAP@0.5':>9s} {'avg mAP':>9s} {'inst F1':>9s}"]
    for lam in lams:
        rep = score_proposals(infer(model, ds, lam, cfg.gamma, cfg.proposal_score), ds)
        avg = rep.average_mAP if rep.average_mAP is not None else float("nan")
        lines.append(f"{lam:>8.2f} {rep.mAP[0.5]:>9.6f} {avg:>9.6f} {rep.instance.get('f1', float('nan')):>9.6f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(lines) + "\n"
    (out / "lambda_sweep.txt").write_text(text)
    _write_manifest(out, "sweep-lambda", {**cfg.to_dict(), "lambdas": lams}, cfg.seed, [Path(args.dataset)],
                    {"report": "lambda_sweep.txt", "model": str(args.model)})
    sys.stdout.write(text)
    return 0


def _train_flags(p):
    p.add_argument("--config", help="JSON TrainConfig; flags below override it")
    p.add_argument("--model", choices=["emmil", "attention"])
    p.add_argument("--mode", choices=["alternating", "joint"])
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="emmil", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="separable-default", choices=sorted(PRESETS))
    src.add_argument("--spec", help="JSON SynthSpec")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", type=int, help="draw another split sharing the seed's concepts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write proposals for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score proposals against ground truth")
    p.add_argument("--proposals", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--alphas", help="comma-separated tIoU thresholds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="three-row ablation over seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--eval-dataset")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="localization metrics across fusion weights")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lambdas", default="0,0.3,0.8,1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lambda)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EMMIL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmmilError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InvariantError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
