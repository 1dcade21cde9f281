"""Bags, labels and the two hard pseudo-label generators.

``e_step_pseudo_labels`` turns classifier scores P (T x C) into key-instance
targets for the assignment branch; ``m_step_pseudo_labels`` turns assignment
scores Q (T,) into T x C classifier targets. Both only ever fire inside
ground-truth classes, so negative bags get all-zero targets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from emmil.errors import DataError


@dataclass(frozen=True)
class Segment:
    label: int
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise DataError(f"segment start {self.start} must be < end {self.end}")
        if self.label < 0:
            raise DataError(f"negative class index {self.label}")


@dataclass
class FeatureSequence:
    bag_id: str
    features: np.ndarray  # (T, d)
    clip_duration_sec: float = 1.25

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"bag {self.bag_id}: features must be 2-D, got {self.features.shape}")
        if self.T < 1:
            raise DataError(f"bag {self.bag_id}: needs at least one clip")
        if self.d < 1:
            raise DataError(f"bag {self.bag_id}: feature dimension must be >= 1")
        if not self.clip_duration_sec > 0:
            raise DataError(f"bag {self.bag_id}: clip_duration_sec must be positive")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class Bag:
    """One video: features, multi-hot label, and (eval only) annotations."""

    seq: FeatureSequence
    label: np.ndarray  # (C,) in {0, 1}
    segments: list[Segment] | None = None
    key_instances: np.ndarray | None = None  # (T,) planted z, synthetic only

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.label.ndim != 1 or not np.isin(self.label, (0, 1)).all():
            raise DataError(f"bag {self.bag_id}: label must be a 0/1 vector")
        if self.segments is not None:
            for s in self.segments:
                if s.label >= self.num_classes:
                    raise DataError(f"bag {self.bag_id}: segment class {s.label} out of range")
        if self.key_instances is not None:
            self.key_instances = np.asarray(self.key_instances, dtype=np.int64)
            if self.key_instances.shape != (self.seq.T,):
                raise DataError(f"bag {self.bag_id}: key_instances length mismatch")

    @property
    def bag_id(self) -> str:
        return self.seq.bag_id

    @property
    def features(self) -> np.ndarray:
        return self.seq.features

    @property
    def num_classes(self) -> int:
        return self.label.shape[0]

    @property
    def is_positive(self) -> bool:
        return bool(self.label.any())


@dataclass
class ScoreMaps:
    P: np.ndarray  # (T, C)
    Q: np.ndarray  # (T,)


@dataclass
class PseudoLabels:
    z_hat: np.ndarray
    y_hat: np.ndarray


def _fallback(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # positive bag with nothing above threshold: argmax clip, first index on ties
    if not labels.any():
        labels[np.argmax(scores)] = 1
    return labels


def dynamic_threshold(values: np.ndarray, gamma: float = 0.0) -> float:
    """mean + gamma * (max - min), with an exactly rounded mean."""
    values = np.asarray(values, dtype=np.float64)
    return math.fsum(values) / values.size + gamma * (values.max() - values.min())


def above_threshold(values: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """``values > mean(values) + gamma * range(values)`` evaluated exactly.

    Entries within rounding distance of the float threshold are re-decided
    in rational arithmetic, so constant inputs never clear their own mean.
    """
    values = np.asarray(values, dtype=np.float64)
    thr = dynamic_threshold(values, gamma)
    above = values > thr
    near = np.abs(values - thr) <= 1e-12 * max(1.0, abs(thr))
    if near.any():
        exact = [Fraction(v) for v in values.tolist()]
        t = sum(exact, Fraction(0)) / len(exact) + Fraction(gamma) * (max(exact) - min(exact))
        for i in np.flatnonzero(near):
            above[i] = exact[i] > t
    return above


def e_step_pseudo_labels(P: np.ndarray, y: np.ndarray, fallback: bool = True) -> np.ndarray:
    """Key-instance targets from classifier scores.

    A clip is key if, for some class present in the bag, its score is strictly
    above that class's mean score over the bag.
    """
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    if not y.any():
        return np.zeros(P.shape[0], dtype=np.int64)
    cols = P[:, y]
    z = np.zeros(P.shape[0], dtype=bool)
    for j in range(cols.shape[1]):
        z |= above_threshold(cols[:, j])
    z = z.astype(np.int64)
    if fallback:
        z = _fallback(cols.max(axis=1), z)
    return z


def m_step_threshold(Q: np.ndarray, gamma: float) -> float:
    return dynamic_threshold(Q, gamma)


def m_step_pseudo_labels(Q: np.ndarray, y: np.ndarray, gamma: float,
                         fallback: bool = True) -> np.ndarray:
    """Classifier targets (T x C) from assignment scores.

    Row t is the bag label when Q[t] > mean(Q) + gamma * range(Q), zero otherwise.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    Q = np.asarray(Q, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.int64)
    y_hat = np.zeros((Q.shape[0], y.shape[0]), dtype=np.int64)
    if not y.any():
        return y_hat
    key = above_threshold(Q, gamma).astype(np.int64)
    if fallback:
        key = _fallback(Q, key)
    y_hat[:] = np.outer(key, y)
    return y_hat


def masked_targets_for_classifier(y_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every entry is supervised; non-key clips and absent classes are negatives."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    return y_hat.copy(), np.ones_like(y_hat)


def pseudo_labels(maps: ScoreMaps, y: np.ndarray, gamma: float) -> PseudoLabels:
    return PseudoLabels(e_step_pseudo_labels(maps.P, y), m_step_pseudo_labels(maps.Q, y, gamma))


def segments_to_mask(segments: list[Segment], T: int, clip_duration_sec: float,
                     label: int | None = None) -> np.ndarray:
    """Clip mask covered by ``segments`` (clip t spans [t*dur, (t+1)*dur))."""
    mask = np.zeros(T, dtype=np.int64)
    for s in segments:
        if label is not None and s.label != label:
            continue
        lo = int(np.floor(s.start / clip_duration_sec + 1e-9))
        hi = int(np.ceil(s.end / clip_duration_sec - 1e-9))
        mask[max(lo, 0):min(hi, T)] = 1
    return mask
