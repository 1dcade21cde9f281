"""Train -> infer -> evaluate glue shared by the CLI and experiment scripts."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from emmil.attention import AttentionModel, attention_localize, train_attention
from emmil.data import Dataset
from emmil.errors import DataError
from emmil.evaluation import EvalReport, evaluate
from emmil.inference import Proposal, fuse_scores, predict_classes, proposals_to_mask, propose
from emmil.training import EMMILModel, TrainConfig, train

Model = EMMILModel | AttentionModel


def fit(config: TrainConfig, dataset: Dataset, log_path=None):
    """Train the model selected by ``config.model``; returns the training state."""
    if config.model == "attention":
        return train_attention(config, dataset, log_path)
    return train(config, dataset, log_path)


def localize_bag(model: Model, features: np.ndarray, lam: float, gamma: float,
                 clip_duration_sec: float, bag_id: str = "", score: str = "mean") -> list[Proposal]:
    if isinstance(model, AttentionModel):
        L = attention_localize(model, features)
        classes = [int(c) for c in np.flatnonzero(model.bag_scores(features) > 0.5)]
    else:
        maps = model.scores(features)
        L = fuse_scores(maps.Q, maps.P, lam)
        classes = predict_classes(maps.P)
    return propose(L, classes, gamma, clip_duration_sec, bag_id, score)


def infer(model: Model, dataset: Dataset, lam: float = 0.8, gamma: float = 0.15,
          score: str = "mean") -> list[Proposal]:
    out = []
    for bag in dataset:
        out.extend(localize_bag(model, bag.features, lam, gamma, bag.seq.clip_duration_sec,
                                bag.bag_id, score))
    return out


def ground_truth(dataset: Dataset) -> dict:
    gt = {}
    for bag in dataset:
        if bag.segments is None:
            raise DataError(f"bag {bag.bag_id} has no ground-truth segments")
        gt[bag.bag_id] = list(bag.segments)
    return gt


def score_proposals(proposals: list[Proposal], dataset: Dataset, alphas=None) -> EvalReport:
    """mAP report; instance metrics use proposal coverage vs planted key instances."""
    pred = truth = None
    if all(b.key_instances is not None for b in dataset):
        by_bag: dict[str, list[Proposal]] = {}
        for p in proposals:
            by_bag.setdefault(p.bag_id, []).append(p)
        pred = {b.bag_id: proposals_to_mask(by_bag.get(b.bag_id, []), b.seq.T,
                                            b.seq.clip_duration_sec) for b in dataset}
        truth = {b.bag_id: b.key_instances for b in dataset}
    return evaluate(proposals, ground_truth(dataset), dataset.num_classes, alphas, pred, truth)


def run_and_score(config: TrainConfig, train_set: Dataset, eval_set: Dataset,
                  lam: float | None = None) -> tuple[EvalReport, object]:
    state = fit(config, train_set)
    lam = config.lam if lam is None else lam
    props = infer(state.model, eval_set, lam, config.gamma, config.proposal_score)
    return score_proposals(props, eval_set), state


ABLATION_ROWS = (
    ("Alternating model", "attention", "alternating"),
    ("Pseudo labeling model", "emmil", "joint"),
    ("Full Model", "emmil", "alternating"),
)


@dataclass
class AblationRow:
    name: str
    model: str
    mode: str
    f1: list[float]
    map50: list[float]

    def summary(self) -> str:
        f, m = np.asarray(self.f1), np.asarray(self.map50)
        return (f"{self.name:<24s}{self.model:<11s}{self.mode:<13s}"
                f"{f.mean():.4f} +- {f.std(ddof=1) if len(f) > 1 else 0.0:.4f}   "
                f"{m.mean():.4f} +- {m.std(ddof=1) if len(m) > 1 else 0.0:.4f}")


def ablate(config: TrainConfig, train_set: Dataset, eval_set: Dataset,
           seeds=range(5)) -> list[AblationRow]:
    """The three ablation configurations, one training run per seed each."""
    rows = []
    for name, model, mode in ABLATION_ROWS:
        row = AblationRow(name, model, mode, [], [])
        for s in seeds:
            cfg = replace(config, model=model, mode=mode, seed=int(s), track_diagnostics=False)
            rep, _ = run_and_score(cfg, train_set, eval_set)
            row.f1.append(rep.instance.get("f1", float("nan")))
            row.map50.append(rep.mAP[0.5])
        rows.append(row)
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    head = f"{'row':<24s}{'model':<11s}{'mode':<13s}{'instance F1 (mean +- sd)':<27s}mAP@0.5 (mean +- sd)"
    return "\n".join([head] + [r.summary() for r in rows]) + "\n"


def save_model(model: Model, config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"config": config.to_dict(), "model": model.to_dict()}) + "\n")


def load_model(path: str | Path) -> tuple[Model, TrainConfig]:
    blob = json.loads(Path(path).read_text())
    cfg = TrainConfig.from_dict(blob["config"])
    m = blob["model"]
    model = AttentionModel.from_dict(m) if m["kind"] == "attention" else EMMILModel.from_dict(m)
    return model, cfg
