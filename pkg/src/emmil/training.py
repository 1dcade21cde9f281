"""Alternating E/M training of the assignment (q) and classification (p) branches.

E epochs: P from the frozen classifier -> key-instance targets -> one Adam
step on q per bag. M epochs: Q from the frozen assignment branch -> T x C
targets -> one Adam step on p per bag. In ``joint`` mode both branches step
every epoch from each other's current scores.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from emmil.data import Dataset
from emmil.errors import ConfigError, DataError
from emmil.mil_core import (
    Bag,
    ScoreMaps,
    e_step_pseudo_labels,
    m_step_pseudo_labels,
    masked_targets_for_classifier,
)
from emmil.numerics import (
    BCE_EPS,
    OptimizerState,
    ScoringNetwork,
    backward_and_step,
    bce_loss,
    forward,
)

log = logging.getLogger(__name__)


@dataclass
class Stage:
    epochs: int
    cycle: int
    lr_multiplier: float = 1.0


def default_stages() -> list[Stage]:
    # 30 epochs switching every 10, then 35 one-epoch cycles at 4x the rate
    return [Stage(30, 10, 1.0), Stage(35, 1, 4.0)]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    gamma: float = 0.15
    lam: float = 0.8
    stages: list[Stage] = field(default_factory=default_stages)
    seed: int = 0
    hidden_p: tuple[int, ...] = (64,)
    hidden_q: tuple[int, ...] = (64,)
    mode: str = "alternating"
    model: str = "emmil"
    warm_start: bool = True
    shuffle: bool = True
    sigma: str = "max"
    proposal_score: str = "mean"
    track_diagnostics: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        self.hidden_p = tuple(int(h) for h in self.hidden_p)
        self.hidden_q = tuple(int(h) for h in self.hidden_q)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must be in [0, 1]")
        if not self.stages:
            raise ConfigError("stages: need at least one stage")
        for i, s in enumerate(self.stages):
            if s.epochs < 1 or s.cycle < 1 or not s.lr_multiplier > 0:
                raise ConfigError(f"stages[{i}]: epochs, cycle and lr_multiplier must be positive")
        if self.mode not in ("alternating", "joint"):
            raise ConfigError(f"mode must be 'alternating' or 'joint', got {self.mode!r}")
        if self.model not in ("emmil", "attention"):
            raise ConfigError(f"model must be 'emmil' or 'attention', got {self.model!r}")
        if self.sigma not in ("max", "mean"):
            raise ConfigError(f"sigma must be 'max' or 'mean', got {self.sigma!r}")
        if self.proposal_score not in ("mean", "max"):
            raise ConfigError("proposal_score must be 'mean' or 'max'")

    @property
    def epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def schedule(self) -> list[tuple[str, float, bool]]:
        """Per epoch: (phase, lr multiplier, warm-start flag).

        Phases are 'E'/'M' (alternating) or 'J' (joint). Alternation starts
        with E and keeps flipping across stage boundaries.
        """
        out = []
        phase = "M"
        first_block = True
        for si, s in enumerate(self.stages):
            for e in range(s.epochs):
                if e % s.cycle == 0:
                    if out:
                        first_block = False
                    phase = "E" if phase == "M" else "M"
                warm = self.warm_start and first_block
                out.append(("J" if self.mode == "joint" else phase, s.lr_multiplier, warm))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_p"] = list(self.hidden_p)
        d["hidden_q"] = list(self.hidden_q)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Default schedule with the rate raised for small synthetic datasets."""
    overrides.setdefault("learning_rate", 1e-3)
    return TrainConfig(**overrides)


@dataclass
class EMMILModel:
    p_net: ScoringNetwork  # d -> C classification scores
    q_net: ScoringNetwork  # d -> 1 key-instance assignment score

    @classmethod
    def init(cls, d: int, C: int, config: TrainConfig) -> "EMMILModel":
        rng = np.random.default_rng(config.seed)
        p = ScoringNetwork.init([d, *config.hidden_p, C], rng)
        q = ScoringNetwork.init([d, *config.hidden_q, 1], rng)
        return cls(p, q)

    def scores(self, features: np.ndarray) -> ScoreMaps:
        return ScoreMaps(forward(self.p_net, features), forward(self.q_net, features)[:, 0])

    def to_dict(self) -> dict:
        return {"kind": "emmil", "p_net": self.p_net.to_dict(), "q_net": self.q_net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "EMMILModel":
        return cls(ScoringNetwork.from_dict(d["p_net"]), ScoringNetwork.from_dict(d["q_net"]))


@dataclass
class TrainState:
    model: EMMILModel
    p_opt: OptimizerState
    q_opt: OptimizerState
    config: TrainConfig
    epoch: int = 0
    phase: str = "E"
    loss_history: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    last_epoch: tuple[float, float] = (float("nan"), float("nan"))

    @classmethod
    def init(cls, dataset: Dataset, config: TrainConfig) -> "TrainState":
        model = EMMILModel.init(dataset.feature_dim, dataset.num_classes, config)
        return cls(model,
                   OptimizerState.for_network(model.p_net, config.learning_rate),
                   OptimizerState.for_network(model.q_net, config.learning_rate),
                   config)


def _check_dataset(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if not any(b.is_positive for b in dataset):
        raise DataError("no positive bags: key-instance assignment unidentifiable")


def _bag_order(state: TrainState, n: int) -> np.ndarray:
    if not state.config.shuffle:
        return np.arange(n)
    rng = np.random.default_rng([state.config.seed, state.epoch])
    return rng.permutation(n)


def e_step_targets(state: TrainState, bag: Bag, warm: bool = False) -> np.ndarray:
    if warm:
        return np.full(bag.seq.T, int(bag.is_positive))
    P = forward(state.model.p_net, bag.features)
    return e_step_pseudo_labels(P, bag.label)


def m_step_targets(state: TrainState, bag: Bag) -> tuple[np.ndarray, np.ndarray]:
    Q = forward(state.model.q_net, bag.features)[:, 0]
    return masked_targets_for_classifier(m_step_pseudo_labels(Q, bag.label, state.config.gamma))


def _step_q(state: TrainState, bag: Bag, z_hat: np.ndarray, lr: float) -> float:
    cache = forward(state.model.q_net, bag.features, keep_cache=True)
    loss, grad = bce_loss(cache.output, z_hat.reshape(-1, 1).astype(np.float64))
    backward_and_step(state.model.q_net, state.q_opt, cache, grad, lr)
    return loss


def _step_p(state: TrainState, bag: Bag, targets: np.ndarray, mask: np.ndarray,
            lr: float) -> float:
    cache = forward(state.model.p_net, bag.features, keep_cache=True)
    loss, grad = bce_loss(cache.output, targets, mask)
    backward_and_step(state.model.p_net, state.p_opt, cache, grad, lr)
    return loss


Probe = Callable[[Bag, np.ndarray], None]


def run_e_epoch(state: TrainState, dataset: Dataset, lr_multiplier: float = 1.0,
                warm: bool = False, probe: Probe | None = None) -> TrainState:
    """One pass updating q from the frozen classifier's pseudo-labels."""
    lr = state.config.learning_rate * lr_multiplier
    losses, pos = [], []
    for i in _bag_order(state, len(dataset)):
        bag = dataset.bags[i]
        z_hat = e_step_targets(state, bag, warm)
        if probe is not None:
            probe(bag, z_hat)
        losses.append(_step_q(state, bag, z_hat, lr))
        pos.append(z_hat.mean())
    state.loss_history.extend({"epoch": state.epoch, "phase": "E", "loss": l} for l in losses)
    state.phase = "E"
    state.last_epoch = (float(np.mean(losses)), float(np.mean(pos)))
    return state


def run_m_epoch(state: TrainState, dataset: Dataset, lr_multiplier: float = 1.0,
                probe: Probe | None = None) -> TrainState:
    """One pass updating p from the frozen assignment branch's pseudo-labels."""
    lr = state.config.learning_rate * lr_multiplier
    losses, pos = [], []
    for i in _bag_order(state, len(dataset)):
        bag = dataset.bags[i]
        targets, mask = m_step_targets(state, bag)
        if probe is not None:
            probe(bag, targets)
        losses.append(_step_p(state, bag, targets, mask, lr))
        pos.append(targets.mean())
    state.loss_history.extend({"epoch": state.epoch, "phase": "M", "loss": l} for l in losses)
    state.phase = "M"
    state.last_epoch = (float(np.mean(losses)), float(np.mean(pos)))
    return state


def run_joint_epoch(state: TrainState, dataset: Dataset, lr_multiplier: float = 1.0,
                    warm: bool = False) -> TrainState:
    """Both branches step on every bag, each from the other's current scores."""
    lr = state.config.learning_rate * lr_multiplier
    losses, pos = [], []
    for i in _bag_order(state, len(dataset)):
        bag = dataset.bags[i]
        z_hat = e_step_targets(state, bag, warm)
        targets, mask = m_step_targets(state, bag)
        lq = _step_q(state, bag, z_hat, lr)
        lp = _step_p(state, bag, targets, mask, lr)
        losses.append(0.5 * (lq + lp))
        pos.append(0.5 * (z_hat.mean() + targets.mean()))
    state.loss_history.extend({"epoch": state.epoch, "phase": "J", "loss": l} for l in losses)
    state.phase = "J"
    state.last_epoch = (float(np.mean(losses)), float(np.mean(pos)))
    return state


def _bernoulli_entropy(q: np.ndarray) -> float:
    q = np.clip(q, BCE_EPS, 1 - BCE_EPS)
    return float(-(q * np.log(q) + (1 - q) * np.log1p(-q)).sum())


def elbo_proxy(model: EMMILModel, dataset: Dataset, sigma: str = "max") -> float:
    """Diagnostic lower-bound estimate; higher is better, never differentiated.

    Per bag: log sigma_t(P[t,c] * z_hat[t]) for present classes, log(1 -
    sigma_t P[t,c]) for absent ones, plus E_q[log pi] + H(q) where pi is the
    classifier-implied key-instance probability (max present-class score, or
    eps in negative bags). The last two terms together are -KL(q || pi), so
    the bound cannot be inflated by a maximally uncertain q alone.
    """
    agg = np.max if sigma == "max" else np.mean
    eps = BCE_EPS
    total = 0.0
    for bag in dataset:
        maps = model.scores(bag.features)
        P, Q = maps.P, np.clip(maps.Q, eps, 1 - eps)
        y = bag.label.astype(bool)
        z_hat = e_step_pseudo_labels(P, bag.label)
        for c in range(bag.num_classes):
            if y[c]:
                total += np.log(max(agg(P[:, c] * z_hat), eps))
            else:
                total += np.log(max(1.0 - agg(P[:, c]), eps))
        pi = P[:, y].max(axis=1) if y.any() else np.zeros(len(Q))
        pi = np.clip(pi, eps, 1 - eps)
        total += float((Q * np.log(pi) + (1 - Q) * np.log1p(-pi)).sum())
        total += _bernoulli_entropy(Q)
    return float(total)


def key_instance_recall(model: EMMILModel, dataset: Dataset) -> float | None:
    """Recall of planted key instances by the E-step pseudo-labels, positive bags only."""
    hit = tot = 0
    for bag in dataset:
        if bag.key_instances is None or not bag.is_positive:
            continue
        z = e_step_pseudo_labels(model.scores(bag.features).P, bag.label)
        hit += int(np.sum(z * bag.key_instances))
        tot += int(bag.key_instances.sum())
    return hit / tot if tot else None


def train(config: TrainConfig, dataset: Dataset, log_path: str | Path | None = None,
          state: TrainState | None = None) -> TrainState:
    """Run the full staged schedule; deterministic for a fixed seed."""
    config.validate()
    _check_dataset(dataset)
    if state is None:
        state = TrainState.init(dataset, config)
    fh = open(log_path, "w") if log_path is not None else None
    try:
        if config.track_diagnostics:
            state.history.append(_record(state, dataset, "init", 0.0, float("nan"), float("nan")))
        for phase, mult, warm in config.schedule():
            if phase == "E":
                run_e_epoch(state, dataset, mult, warm)
            elif phase == "M":
                run_m_epoch(state, dataset, mult)
            else:
                run_joint_epoch(state, dataset, mult, warm)
            state.epoch += 1
            mean_loss, rate = state.last_epoch
            rec = (_record(state, dataset, phase, mult, mean_loss, rate)
                   if config.track_diagnostics else
                   {"epoch": state.epoch, "phase": phase, "lr": config.learning_rate * mult,
                    "mean_loss": mean_loss, "positive_rate": rate})
            state.history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.debug("epoch %d %s loss %.5f", state.epoch, phase, mean_loss)
    finally:
        if fh is not None:
            fh.close()
    return state


def _record(state: TrainState, dataset: Dataset, phase: str, mult: float, mean_loss: float,
            rate: float) -> dict:
    return {
        "epoch": state.epoch,
        "phase": phase,
        "lr": state.config.learning_rate * mult,
        "mean_loss": mean_loss,
        "positive_rate": rate,
        "elbo_proxy": elbo_proxy(state.model, dataset, state.config.sigma),
        "key_recall": key_instance_recall(state.model, dataset),
    }
