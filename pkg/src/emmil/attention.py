"""Softmax attention-MIL baseline used in the ablations.

Per-clip class scores c (T x C) and softmax attention a (T,) over the bag give
a bag score s = a @ c, trained with BCE against the bag label. Unlike the
pseudo-label model this applies attention in negative bags too.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emmil.data import Dataset
from emmil.errors import ConfigError
from emmil.numerics import (
    OptimizerState,
    ScoringNetwork,
    adam_update,
    backward,
    bce_loss,
    forward,
)
from emmil.training import TrainConfig, _check_dataset

log = logging.getLogger(__name__)


def softmax(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max())
    return e / e.sum()


@dataclass
class AttentionModel:
    cls_net: ScoringNetwork  # d -> C, sigmoid
    att_net: ScoringNetwork  # d -> 1, identity logits

    @classmethod
    def init(cls, d: int, C: int, config: TrainConfig) -> "AttentionModel":
        rng = np.random.default_rng(config.seed)
        c = ScoringNetwork.init([d, *config.hidden_p, C], rng)
        a = ScoringNetwork.init([d, *config.hidden_q, 1], rng, output_activation="identity")
        return cls(c, a)

    def attention(self, features: np.ndarray) -> np.ndarray:
        return softmax(forward(self.att_net, features)[:, 0])

    def clip_scores(self, features: np.ndarray) -> np.ndarray:
        return forward(self.cls_net, features)

    def bag_scores(self, features: np.ndarray) -> np.ndarray:
        return self.attention(features) @ self.clip_scores(features)

    def to_dict(self) -> dict:
        return {"kind": "attention", "cls_net": self.cls_net.to_dict(),
                "att_net": self.att_net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionModel":
        return cls(ScoringNetwork.from_dict(d["cls_net"]), ScoringNetwork.from_dict(d["att_net"]))


def attention_bag_loss(model: AttentionModel, features: np.ndarray, y: np.ndarray):
    """BCE of the attention-pooled bag score against ``y``.

    Returns ``(loss, cls_grads, att_grads, attention)`` with gradients ordered
    like each network's ``parameters()``.
    """
    cc = forward(model.cls_net, features, keep_cache=True)
    ac = forward(model.att_net, features, keep_cache=True)
    a = softmax(ac.output[:, 0])
    c = cc.output
    s = a @ c
    loss, g_s = bce_loss(s, np.asarray(y, dtype=np.float64))
    g_c = np.outer(a, g_s)
    g_a = c @ g_s
    g_u = a * (g_a - a @ g_a)
    return loss, backward(model.cls_net, cc, g_c), backward(model.att_net, ac, g_u[:, None]), a


def attention_localize(model: AttentionModel, features: np.ndarray) -> np.ndarray:
    """Per-clip localization map a[t] * c[t, c]."""
    return model.attention(features)[:, None] * model.clip_scores(features)


def attention_entropy(model: AttentionModel, dataset: Dataset, positive_only: bool = True) -> float:
    vals = []
    for bag in dataset:
        if positive_only and not bag.is_positive:
            continue
        a = model.attention(bag.features)
        vals.append(float(-(a * np.log(np.maximum(a, 1e-300))).sum()))
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class AttentionState:
    model: AttentionModel
    cls_opt: OptimizerState
    att_opt: OptimizerState
    config: TrainConfig
    epoch: int = 0
    loss_history: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def init(cls, dataset: Dataset, config: TrainConfig) -> "AttentionState":
        m = AttentionModel.init(dataset.feature_dim, dataset.num_classes, config)
        return cls(m, OptimizerState.for_network(m.cls_net, config.learning_rate),
                   OptimizerState.for_network(m.att_net, config.learning_rate), config)


def run_attention_epoch(state: AttentionState, dataset: Dataset, phase: str,
                        lr_multiplier: float = 1.0) -> float:
    """E updates the attention head, M the classification head, J both."""
    if phase not in ("E", "M", "J"):
        raise ConfigError(f"unknown phase {phase!r}")
    lr = state.config.learning_rate * lr_multiplier
    order = np.arange(len(dataset))
    if state.config.shuffle:
        order = np.random.default_rng([state.config.seed, state.epoch]).permutation(len(dataset))
    losses = []
    for i in order:
        bag = dataset.bags[i]
        loss, g_cls, g_att, _ = attention_bag_loss(state.model, bag.features, bag.label)
        if phase in ("M", "J"):
            adam_update(state.model.cls_net.parameters(), g_cls, state.cls_opt, lr)
        if phase in ("E", "J"):
            adam_update(state.model.att_net.parameters(), g_att, state.att_opt, lr)
        losses.append(loss)
    state.loss_history.extend({"epoch": state.epoch, "phase": phase, "loss": l} for l in losses)
    return float(np.mean(losses))


def train_attention(config: TrainConfig, dataset: Dataset,
                    log_path: str | Path | None = None) -> AttentionState:
    config.validate()
    _check_dataset(dataset)
    state = AttentionState.init(dataset, config)
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for phase, mult, _ in config.schedule():
            mean_loss = run_attention_epoch(state, dataset, phase, mult)
            state.epoch += 1
            rec = {"epoch": state.epoch, "phase": phase, "lr": config.learning_rate * mult,
                   "mean_loss": mean_loss}
            if config.track_diagnostics:
                rec["attention_entropy"] = attention_entropy(state.model, dataset)
            state.history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return state
