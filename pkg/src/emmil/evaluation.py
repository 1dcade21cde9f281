"""Detection metrics: tIoU, AP at a tIoU threshold, mAP grids, instance F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emmil.errors import DataError
from emmil.inference import Proposal
from emmil.mil_core import Segment

AVERAGE_ALPHAS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
TABLE_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return inter / union


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """All-point AP from a ranked TP/FP indicator vector (monotone precision envelope)."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, tp.size + 1)
    rec = ctp / num_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_proposals(proposals: list[Proposal], gt: dict[str, list[Segment]], label: int,
                    alpha: float) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching in descending confidence (stable on ties).

    Returns the TP indicator in ranked order and the number of GT segments of ``label``.
    """
    gts = {bid: [s for s in segs if s.label == label] for bid, segs in gt.items()}
    num_gt = sum(len(v) for v in gts.values())
    props = [p for p in proposals if p.label == label]
    order = sorted(range(len(props)), key=lambda i: -props[i].confidence)
    used = {bid: np.zeros(len(v), dtype=bool) for bid, v in gts.items()}
    tp = np.zeros(len(props))
    for rank, i in enumerate(order):
        p = props[i]
        cands = gts.get(p.bag_id, [])
        best, best_iou = -1, -1.0
        for j, s in enumerate(cands):
            if used[p.bag_id][j]:
                continue
            iou = tiou((p.start, p.end), (s.start, s.end))
            if iou >= alpha and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[p.bag_id][best] = True
            tp[rank] = 1.0
    return tp, num_gt


def average_precision(proposals: list[Proposal], gt: dict[str, list[Segment]], label: int,
                      alpha: float) -> float | None:
    """AP for one class, or ``None`` when the class has no ground truth."""
    tp, num_gt = match_proposals(proposals, gt, label, alpha)
    if num_gt == 0:
        return None
    return interpolated_ap(tp, num_gt)


@dataclass
class EvalReport:
    alphas: list[float]
    per_class_ap: dict[float, dict[int, float]]
    mAP: dict[float, float]
    average_mAP: float | None
    instance: dict[str, float] = field(default_factory=dict)
    num_proposals: int = 0
    proposals_per_bag: float = 0.0

    def to_dict(self) -> dict:
        return {
            "alphas": self.alphas,
            "mAP": {f"{a:.2f}": v for a, v in self.mAP.items()},
            "per_class_ap": {f"{a:.2f}": {str(c): v for c, v in d.items()}
                             for a, d in self.per_class_ap.items()},
            "average_mAP": self.average_mAP,
            "instance": self.instance,
            "num_proposals": self.num_proposals,
            "proposals_per_bag": self.proposals_per_bag,
        }


def instance_prf(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def evaluate(proposals: list[Proposal], gt: dict[str, list[Segment]], num_classes: int,
             alphas=None, instance_pred: dict[str, np.ndarray] | None = None,
             instance_truth: dict[str, np.ndarray] | None = None) -> EvalReport:
    """Score proposals against per-bag ground truth.

    mAP at each alpha averages AP over classes that have ground truth. The
    average mAP is taken over 0.5:0.05:0.95 regardless of ``alphas``.
    """
    for p in proposals:
        if p.bag_id not in gt:
            raise DataError(f"proposal refers to unknown bag_id {p.bag_id!r}")
    if alphas is None:
        alphas = sorted(set(TABLE_ALPHAS) | set(AVERAGE_ALPHAS))
    alphas = [float(a) for a in alphas]
    grid = sorted(set(alphas) | set(AVERAGE_ALPHAS))
    per_class: dict[float, dict[int, float]] = {}
    mAP: dict[float, float] = {}
    for a in grid:
        aps = {}
        for c in range(num_classes):
            ap = average_precision(proposals, gt, c, a)
            if ap is not None:
                aps[c] = ap
        per_class[a] = aps
        mAP[a] = float(np.mean(list(aps.values()))) if aps else 0.0
    has_gt = any(per_class[a] for a in AVERAGE_ALPHAS)
    avg = float(np.mean([mAP[a] for a in AVERAGE_ALPHAS])) if has_gt else None
    inst = {}
    if instance_pred is not None and instance_truth is not None:
        ids = sorted(instance_truth)
        inst = instance_prf(np.concatenate([instance_pred[i] for i in ids]),
                            np.concatenate([instance_truth[i] for i in ids]))
    return EvalReport(
        alphas=alphas,
        per_class_ap={a: per_class[a] for a in alphas},
        mAP={a: mAP[a] for a in alphas},
        average_mAP=avg,
        instance=inst,
        num_proposals=len(proposals),
        proposals_per_bag=len(proposals) / max(len(gt), 1),
    )


def format_report(report: EvalReport, title: str = "detection") -> str:
    """Fixed-layout text: table row over alpha 0.1..0.7, then the average-mAP line."""
    lines = [f"# {title}"]
    cols = [a for a in TABLE_ALPHAS if a in report.mAP]
    lines.append("alpha     " + " ".join(f"{a:>7.2f}" for a in cols))
    lines.append("mAP(%)    " + " ".join(f"{100 * report.mAP[a]:>7.2f}" for a in cols))
    extra = [a for a in report.alphas if a not in TABLE_ALPHAS]
    if extra:
        lines.append("alpha     " + " ".join(f"{a:>7.2f}" for a in extra))
        lines.append("mAP(%)    " + " ".join(f"{100 * report.mAP[a]:>7.2f}" for a in extra))
    avg = "n/a" if report.average_mAP is None else f"{100 * report.average_mAP:.2f}"
    lines.append(f"avg mAP@0.50:0.05:0.95 (%) {avg}")
    if report.instance:
        i = report.instance
        lines.append(f"instance precision {i['precision']:.6f} recall {i['recall']:.6f} "
                     f"f1 {i['f1']:.6f}")
    lines.append(f"proposals {report.num_proposals} per-bag {report.proposals_per_bag:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str | Path, title: str = "detection") -> None:
    Path(path).write_text(format_report(report, title))
