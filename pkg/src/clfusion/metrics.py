"""Center-distance detection scoring in the nuScenes style.

Matching is greedy by descending confidence against same-class ground truth
within a planar center-distance threshold.  AP uses 101-point interpolated
precision.  True-positive errors (translation, scale, orientation) are taken
at the 2 m threshold.  The "desk score" is a simplified composite without the
velocity and attribute terms.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scene import CLASS_NAMES, N_CLASSES, ObjectList, ObjectRecord

THRESHOLDS: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, gt index, distance)
    unmatched_preds: tuple[int, ...]
    unmatched_gt: tuple[int, ...]


def match_predictions(preds: ObjectList, gt: ObjectList, threshold: float) -> MatchResult:
    pa, ga = preds.arrays(), gt.arrays()
    order = np.argsort(-pa["confidence"], kind="stable")
    taken = np.zeros(len(gt), dtype=bool)
    pairs = []
    unmatched = []
    for p in order:
        cand = np.flatnonzero((ga["class_id"] == pa["class_id"][p]) & ~taken)
        if cand.size:
            d = np.hypot(*(ga["center"][cand, :2] - pa["center"][p, :2]).T)
            k = int(np.argmin(d))
            if d[k] < threshold:
                taken[cand[k]] = True
                pairs.append((int(p), int(cand[k]), float(d[k])))
                continue
        unmatched.append(int(p))
    return MatchResult(tuple(pairs), tuple(sorted(unmatched)),
                       tuple(int(g) for g in np.flatnonzero(~taken)))


def _frames(preds, gt) -> list[tuple[ObjectList, ObjectList]]:
    if isinstance(preds, ObjectList):
        return [(preds, gt)]
    return list(zip(preds, gt))


def _select(objects: ObjectList, class_id: int) -> ObjectList:
    return objects.with_records(r for r in objects.records if r.class_id == class_id)


def interpolated_ap(confidences: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated average precision."""
    if n_gt == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    if tp.size == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / n_gt
    # running max from the right gives precision interpolated at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def class_ap(frames, class_id: int, threshold: float) -> float | None:
    """AP of one class over frames; ``None`` when the class is absent on both sides."""
    confs, tps, n_gt = [], [], 0
    for preds, gt in frames:
        p, g = _select(preds, class_id), _select(gt, class_id)
        n_gt += len(g)
        if len(p) == 0:
            continue
        m = match_predictions(p, g, threshold)
        flag = np.zeros(len(p), dtype=bool)
        for pi, _, _ in m.pairs:
            flag[pi] = True
        confs.append(p.arrays()["confidence"])
        tps.append(flag)
    if n_gt == 0 and not confs:
        return None
    if not confs:
        return 0.0
    return interpolated_ap(np.concatenate(confs), np.concatenate(tps), n_gt)


def average_precision(preds, gt, threshold: float, n_classes: int = N_CLASSES) -> float:
    """Class-averaged AP; classes absent from both predictions and ground truth are skipped.

    ``preds``/``gt`` are either one pair of object lists or parallel sequences of frames.
    """
    frames = _frames(preds, gt)
    aps = [a for c in range(n_classes) if (a := class_ap(frames, c, threshold)) is not None]
    return float(np.mean(aps)) if aps else float("nan")


def yaw_error(a: float, b: float) -> float:
    d = (a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def scale_error(a, b) -> float:
    """1 - IoU of two boxes aligned at center and yaw."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    inter = float(np.prod(np.minimum(a, b)))
    return 1.0 - inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def error_stats(pairs: Sequence[tuple[ObjectRecord, ObjectRecord]]) -> dict[str, float]:
    """Mean translation, scale and orientation errors over (pred, gt) record pairs."""
    if not pairs:
        return {"mATE": 1.0, "mASE": 1.0, "mAOE": 1.0}
    ate = [math.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1]) for p, g in pairs]
    ase = [scale_error(p.size, g.size) for p, g in pairs]
    aoe = [yaw_error(p.yaw, g.yaw) for p, g in pairs]
    return {"mATE": float(np.mean(ate)), "mASE": float(np.mean(ase)), "mAOE": float(np.mean(aoe))}


@dataclass
class EvalResult:
    ap: dict[int, dict[float, float | None]]
    mean_ap: dict[float, float]
    mATE: float
    mASE: float
    mAOE: float
    thresholds: tuple[float, ...] = THRESHOLDS
    class_names: tuple[str, ...] = field(default=CLASS_NAMES)

    @property
    def mAP(self) -> float:
        v = [self.mean_ap[t] for t in self.thresholds if not math.isnan(self.mean_ap[t])]
        return float(np.mean(v)) if v else 0.0

    @property
    def desk_score(self) -> float:
        tp = np.mean([1.0 - min(max(e, 0.0), 1.0) for e in (self.mATE, self.mASE, self.mAOE)])
        return float(0.5 * self.mAP + 0.5 * tp)

    def summary(self) -> dict[str, float]:
        out = {"desk_score": self.desk_score, "mAP": self.mAP,
               "mATE": self.mATE, "mASE": self.mASE, "mAOE": self.mAOE}
        for t in self.thresholds:
            out[f"mAP@{t:g}"] = self.mean_ap[t]
        return out

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "per_class": {self.class_names[c] if c < len(self.class_names) else str(c):
                          {f"{t:g}": v for t, v in row.items()} for c, row in self.ap.items()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "threshold", "ap"])
        for c, row in self.ap.items():
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            for t, v in row.items():
                w.writerow([name, f"{t:g}", "" if v is None else f"{v:.6f}"])
        s = self.summary()
        w.writerow(["summary", "all", f"{s['mAP']:.6f}"])
        w.writerow(["desk_score", "", f"{s['desk_score']:.6f}"])
        for k in ("mATE", "mASE", "mAOE"):
            w.writerow([k, "", f"{s[k]:.6f}"])
        return buf.getvalue()


def evaluate(preds: Iterable[ObjectList], gt: Iterable[ObjectList], n_classes: int = N_CLASSES,
             thresholds: Sequence[float] = THRESHOLDS) -> EvalResult:
    frames = _frames(preds, gt) if isinstance(preds, ObjectList) else list(zip(preds, gt))
    ap = {c: {t: class_ap(frames, c, t) for t in thresholds} for c in range(n_classes)}
    mean_ap = {}
    for t in thresholds:
        v = [ap[c][t] for c in range(n_classes) if ap[c][t] is not None]
        mean_ap[t] = float(np.mean(v)) if v else float("nan")

    per_class: dict[str, list[float]] = {"mATE": [], "mASE": [], "mAOE": []}
    for c in range(n_classes):
        pairs = []
        for p, g in frames:
            ps, gs = _select(p, c), _select(g, c)
            m = match_predictions(ps, gs, TP_THRESHOLD)
            pairs.extend((ps[i], gs[j]) for i, j, _ in m.pairs)
        if pairs:
            for k, v in error_stats(pairs).items():
                per_class[k].append(v)
    errs = {k: (float(np.mean(v)) if v else 1.0) for k, v in per_class.items()}
    return EvalResult(ap, mean_ap, errs["mATE"], errs["mASE"], errs["mAOE"], tuple(thresholds))
