"""Score fusion and grouping of above-threshold clips into proposals."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from emmil.errors import ConfigError, DataError
from emmil.mil_core import above_threshold


@dataclass(frozen=True)
class Proposal:
    bag_id: str
    label: int
    start: float
    end: float
    confidence: float


def fuse_scores(Q: np.ndarray, P: np.ndarray, lam: float) -> np.ndarray:
    """Localization map ``lam * Q[t] + (1 - lam) * P[t, c]``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 1)
    P = np.asarray(P, dtype=np.float64)
    if Q.shape[0] != P.shape[0]:
        raise ConfigError(f"Q has {Q.shape[0]} clips but P has {P.shape[0]}")
    return lam * Q + (1.0 - lam) * P


def predict_classes(P: np.ndarray, threshold: float = 0.5) -> list[int]:
    return [int(c) for c in np.flatnonzero(np.asarray(P).max(axis=0) > threshold)]


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as half-open ``(start, stop)`` clip index pairs."""
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(m))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def propose(L: np.ndarray, predicted_classes, gamma: float, clip_duration_sec: float,
            bag_id: str = "", score: str = "mean") -> list[Proposal]:
    """Threshold each predicted class column at mean + gamma * range and group runs.

    Proposal confidence is the mean (or max) fused score over the run.
    """
    if score not in ("mean", "max"):
        raise ConfigError(f"unknown proposal score {score!r}")
    L = np.asarray(L, dtype=np.float64)
    out = []
    for c in sorted(predicted_classes):
        if not 0 <= c < L.shape[1]:
            raise ConfigError(f"class {c} out of range for {L.shape[1]} classes")
        col = L[:, c]
        mask = above_threshold(col, gamma)
        for a, b in runs(mask):
            conf = col[a:b].mean() if score == "mean" else col[a:b].max()
            out.append(Proposal(bag_id, c, a * clip_duration_sec, b * clip_duration_sec,
                                float(conf)))
    return out


def proposals_to_mask(proposals: list[Proposal], T: int, clip_duration_sec: float,
                      label: int | None = None) -> np.ndarray:
    mask = np.zeros(T, dtype=np.int64)
    for p in proposals:
        if label is not None and p.label != label:
            continue
        a = int(round(p.start / clip_duration_sec))
        b = int(round(p.end / clip_duration_sec))
        mask[a:b] = 1
    return mask


def write_proposals(proposals: list[Proposal], path: str | Path) -> None:
    lines = [f"{p.bag_id}\t{p.label}\t{p.start:.6f}\t{p.end:.6f}\t{p.confidence:.6f}\n"
             for p in proposals]
    Path(path).write_text("".join(lines))


def read_proposals(path: str | Path) -> list[Proposal]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{n}: expected 5 tab-separated fields")
        bag_id, c, s, e, conf = parts
        out.append(Proposal(bag_id, int(c), float(s), float(e), float(conf)))
    return out
