"""Gaussian target masks and log-bias attention reweighting.

Each target projected into a view yields a Gaussian weighting mask
``exp(-((i - cx)^2 + (j - cy)^2) / (sigma * r^2))`` over grid cells; masks of
one view are merged by pointwise maximum, floored at ``EPS`` and turned into an
additive attention bias ``log(G) / sqrt(d_k)`` shared by every query and head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import CameraRig, project_box
from .scene import ObjectList

EPS = 1e-4
DEFAULT_SIGMA = 2.0
MIN_RADIUS = 1.0


class MaskParamError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMaskParams:
    center: tuple[float, float]
    radius: float
    bandwidth: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.radius > 0:
            raise MaskParamError(f"radius must be > 0, got {self.radius}")
        if not self.bandwidth > 0:
            raise MaskParamError(f"bandwidth must be > 0, got {self.bandwidth}")


def single_target_mask(params: GaussianMaskParams, grid: tuple[int, int]) -> np.ndarray:
    """Mask of shape ``(H, W)``; entry ``[j, i]`` is evaluated at cell center ``(i, j)``."""
    h, w = grid
    cx, cy = params.center
    di = (np.arange(w, dtype=float) - cx) ** 2
    dj = (np.arange(h, dtype=float) - cy) ** 2
    return np.exp(-(dj[:, None] + di[None, :]) / (params.bandwidth * params.radius ** 2))


@dataclass(frozen=True)
class SharedMask:
    grids: np.ndarray  # (N, H, W), values in [eps, 1]
    eps: float = EPS

    @property
    def flat(self) -> np.ndarray:
        """Key-aligned values, length ``N * H * W`` in (view, row, column) order."""
        return self.grids.reshape(-1)

    @classmethod
    def uniform(cls, n_views: int, grid: tuple[int, int], value: float = 1.0,
                eps: float = EPS) -> "SharedMask":
        return cls(np.full((n_views, *grid), value, dtype=float), eps)


def merge_masks(per_view: Sequence[Sequence[np.ndarray]], grid: tuple[int, int],
                eps: float = EPS) -> SharedMask:
    """Pointwise maximum over the targets of each view, clamped to ``[eps, 1]``."""
    h, w = grid
    out = np.full((len(per_view), h, w), eps, dtype=float)
    for v, masks in enumerate(per_view):
        for m in masks:
            m = np.asarray(m, dtype=float)
            if m.shape != (h, w):
                raise ValueError(f"mask shape {m.shape} does not match grid {(h, w)}")
            np.maximum(out[v], m, out=out[v])
    np.clip(out, eps, 1.0, out=out)
    return SharedMask(out, eps)


def shared_mask_for_objects(rig: CameraRig, objects: ObjectList, sigma: float = DEFAULT_SIGMA,
                            eps: float = EPS, min_radius: float = MIN_RADIUS) -> SharedMask:
    """Project every record into every view and merge the resulting masks."""
    per_view: list[list[np.ndarray]] = [[] for _ in range(rig.n_views)]
    for rec in objects.records:
        for v in range(rig.n_views):
            proj = project_box(rig, v, rec)
            if proj is None:
                continue
            params = GaussianMaskParams(proj.center, max(proj.radius, min_radius), sigma)
            per_view[v].append(single_target_mask(params, rig.grid))
    return merge_masks(per_view, rig.grid, eps)


def attention_bias(shared: SharedMask, d_k: int) -> np.ndarray:
    """``log(G) / sqrt(d_k)`` per flattened key."""
    if d_k < 1:
        raise ValueError("d_k must be >= 1")
    return np.log(shared.flat) / math.sqrt(d_k)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def biased_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                     bias: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention with an optional per-key additive bias.

    The bias vector is broadcast over all query rows.  Returns (output, weights).
    """
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError(f"inconsistent shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if not (np.isfinite(Q).all() and np.isfinite(K).all() and np.isfinite(V).all()):
        raise ValueError("non-finite attention inputs")
    logits = Q @ K.T / math.sqrt(Q.shape[1])
    if bias is not None:
        bias = np.asarray(bias, dtype=float)
        if bias.shape != (K.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {K.shape[0]} keys")
        if not np.isfinite(bias).all():
            raise ValueError("non-finite bias")
        logits = logits + bias[None, :]
    weights = softmax_rows(logits)
    return weights @ V, weights
