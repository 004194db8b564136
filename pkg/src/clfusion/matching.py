"""Bipartite matching and the set-prediction / denoising losses.

Boxes are 7-vectors ``(cx, cy, cz, l, w, h, yaw)`` with the center normalized
to ``[0, 1]`` by the scene bounds, sizes in meters and yaw in radians.  For
costs and losses sizes are divided by 10 and yaw differences (wrapped) by pi.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from numba import njit

from .scene import Bounds, ObjectList

SIZE_SCALE = 10.0


class MatchingError(ValueError):
    pass


class DataError(ValueError):
    pass


@njit(cache=True)
def _solve_square(c):
    # shortest augmenting path with potentials; 1-based bookkeeping
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(tight: np.ndarray, match: np.ndarray, n_real: int) -> np.ndarray:
    """Among perfect matchings of the tight graph pick the lexicographically smallest."""
    n = tight.shape[0]
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed_rows = np.zeros(n, dtype=bool)
    fixed_cols = np.zeros(n, dtype=bool)
    for i in range(n_real):
        for j in np.flatnonzero(tight[i]):
            if fixed_cols[j]:
                continue
            if j == match[i]:
                break
            # reroute: i takes j, k = owner(j) must reach the column i frees
            k, freed = owner[j], match[i]
            prev = {}
            queue = deque([k])
            seen_rows = {k}
            end = -1
            while queue and end < 0:
                r = queue.popleft()
                for c in np.flatnonzero(tight[r]):
                    if fixed_cols[c] or c == j or c in prev:
                        continue
                    prev[c] = r
                    if c == freed:
                        end = c
                        break
                    nr = owner[c]
                    if nr not in seen_rows and not fixed_rows[nr] and nr != i:
                        seen_rows.add(nr)
                        queue.append(nr)
            if end < 0:
                continue
            c = end
            while True:
                r = prev[c]
                old = match[r]
                match[r] = c
                owner[c] = r
                if r == k:
                    break
                c = old
            match[i] = j
            owner[j] = i
            break
        fixed_rows[i] = True
        fixed_cols[match[i]] = True
    return match


def hungarian_assign(cost) -> dict[int, int]:
    """Minimum-cost injective map ``gt -> pred`` for a ``(n_pred, n_gt)`` cost matrix.

    Ties between optimal assignments are broken toward the lexicographically
    smallest sequence of prediction indices taken in ground-truth order.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise MatchingError("cost must be a 2-D (n_pred, n_gt) matrix")
    n_pred, n_gt = cost.shape
    if n_pred < n_gt:
        raise MatchingError(f"need n_pred >= n_gt, got {n_pred} < {n_gt}")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix must be finite")
    if n_gt == 0:
        return {}
    square = np.zeros((n_pred, n_pred))
    square[:n_gt] = cost.T
    match, u, v = _solve_square(square)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = square - u[:, None] - v[None, :] <= tol
    if tight[:n_gt].sum() > n_gt:
        match = _lexicographic_refine(tight, match, n_gt)
    return {g: int(match[g]) for g in range(n_gt)}


@dataclass(frozen=True)
class MatchCost:
    w_cls: float = 1.0
    w_box: float = 5.0
    no_object_weight: float = 0.1


def gt_boxes(objects: ObjectList, bounds: Bounds) -> np.ndarray:
    """Ground-truth boxes in the decoder's 7-value layout."""
    a = objects.arrays()
    if len(objects) == 0:
        return np.zeros((0, 7))
    return np.concatenate([bounds.normalize(a["center"]), a["size"], a["yaw"][:, None]], axis=1)


def box_l1_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise normalized L1 box distance, shape (n_pred, n_gt)."""
    dc = np.abs(pred[:, None, :3] - gt[None, :, :3]).sum(-1)
    ds = np.abs(pred[:, None, 3:6] - gt[None, :, 3:6]).sum(-1) / SIZE_SCALE
    dy = pred[:, None, 6] - gt[None, :, 6]
    dy = np.abs(np.arctan2(np.sin(dy), np.cos(dy))) / math.pi
    return dc + ds + dy


def box_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Row-wise normalized L1 distance between matched boxes."""
    dc = (pred[:, :3] - gt[:, :3]).abs().sum(-1)
    ds = (pred[:, 3:6] - gt[:, 3:6]).abs().sum(-1) / SIZE_SCALE
    dy = pred[:, 6] - gt[:, 6]
    dy = torch.atan2(torch.sin(dy), torch.cos(dy)).abs() / math.pi
    return dc + ds + dy


def match_cost_matrix(logits: np.ndarray, boxes: np.ndarray, gt_cls: np.ndarray,
                      gt_box: np.ndarray, cost: MatchCost) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(-1, keepdims=True)
    return cost.w_cls * (1.0 - prob[:, gt_cls]) + cost.w_box * box_l1_matrix(boxes, gt_box)


def set_prediction_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: ObjectList,
                        bounds: Bounds, cost: MatchCost = MatchCost(),
                        n_classes: int | None = None) -> dict[str, torch.Tensor]:
    """Hungarian-matched loss over learnable-query outputs.

    ``cls`` sums matched cross-entropy and down-weighted no-object cross-entropy
    of the unmatched predictions, divided by the number of predictions.
    ``box_l1`` is ``w_box`` times the mean matched L1 distance.
    """
    n_pred = logits.shape[0]
    n_classes = logits.shape[1] - 1 if n_classes is None else n_classes
    gt_cls = gt.arrays()["class_id"]
    gt_box = gt_boxes(gt, bounds)
    target = torch.full((n_pred,), n_classes, dtype=torch.long)
    weight = torch.full((n_pred,), cost.no_object_weight, dtype=logits.dtype)
    box_loss = logits.new_zeros(())
    if len(gt):
        c = match_cost_matrix(logits.detach().cpu().numpy().astype(float),
                              boxes.detach().cpu().numpy().astype(float), gt_cls, gt_box, cost)
        assign = hungarian_assign(c)
        g_idx = np.fromiter(assign.keys(), dtype=np.int64)
        p_idx = np.fromiter(assign.values(), dtype=np.int64)
        target[p_idx] = torch.as_tensor(gt_cls[g_idx])
        weight[p_idx] = 1.0
        gt_t = torch.as_tensor(gt_box[g_idx], dtype=boxes.dtype)
        box_loss = cost.w_box * box_l1(boxes[torch.as_tensor(p_idx)], gt_t).sum() / len(gt)
    ce = F.cross_entropy(logits, target, reduction="none")
    return {"cls": (weight * ce).sum() / max(n_pred, 1), "box_l1": box_loss}


def dn_reconstruction_loss(logits: torch.Tensor, boxes: torch.Tensor, targets,
                           gt: ObjectList, bounds: Bounds, cost: MatchCost = MatchCost(),
                           n_classes: int | None = None) -> dict[str, torch.Tensor]:
    """Direct (unmatched) loss of denoising queries against their own targets.

    ``targets[k]`` is the ground-truth index the k-th query reconstructs, or -1
    for a query derived from a false positive, which only learns no-object.
    """
    n = logits.shape[0]
    n_classes = logits.shape[1] - 1 if n_classes is None else n_classes
    if n == 0:
        z = logits.new_zeros(())
        return {"dn_cls": z, "dn_box": z.clone()}
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DataError("one target per denoising query is required")
    if np.any(targets >= len(gt)) or np.any(targets < -1):
        raise DataError("denoising target points outside the ground-truth list")
    gt_cls = gt.arrays()["class_id"]
    real = targets >= 0
    cls_t = np.full(n, n_classes, dtype=np.int64)
    cls_t[real] = gt_cls[targets[real]]
    dn_cls = F.cross_entropy(logits, torch.as_tensor(cls_t))
    if real.any():
        gt_t = torch.as_tensor(gt_boxes(gt, bounds)[targets[real]], dtype=boxes.dtype)
        dn_box = cost.w_box * box_l1(boxes[torch.as_tensor(np.flatnonzero(real))], gt_t).mean()
    else:
        dn_box = logits.new_zeros(())
    return {"dn_cls": dn_cls, "dn_box": dn_box}
