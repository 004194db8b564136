"""Pinhole multi-view camera rig.

World frame: x forward, y left, z up, ego at the origin.  Camera frame: x right,
y down, z along the optical axis.  Image coordinates are in feature-grid cells;
the center of cell ``(i, j)`` (column ``i``, row ``j``) sits at ``u = i, v = j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import ObjectRecord

NEAR_PLANE = 0.1


@dataclass(frozen=True)
class CameraView:
    fx: float
    fy: float
    u0: float
    v0: float
    rotation: np.ndarray  # 3x3, world -> camera
    translation: np.ndarray  # 3, world -> camera

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10:
            raise ValueError("extrinsic rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraView):
            return NotImplemented
        return ((self.fx, self.fy, self.u0, self.v0) == (other.fx, other.fy, other.u0, other.v0)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class CameraRig:
    views: tuple[CameraView, ...]
    grid: tuple[int, int] = (32, 80)  # (H_F, W_F)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def height(self) -> int:
        return self.grid[0]

    @property
    def width(self) -> int:
        return self.grid[1]

    @property
    def n_keys(self) -> int:
        return self.n_views * self.height * self.width

    def view(self, index: int) -> CameraView:
        if not (0 <= index < self.n_views):
            raise IndexError(f"view index {index} out of range [0, {self.n_views})")
        return self.views[index]

    def to_config(self, prefix: str = "rig") -> dict[str, object]:
        """Flat ``key -> value`` entries; matrices are row-major lists."""
        out: dict[str, object] = {f"{prefix}.grid": list(self.grid), f"{prefix}.n_views": self.n_views}
        for k, v in enumerate(self.views):
            p = f"{prefix}.view{k}"
            out[f"{p}.intrinsics"] = [v.fx, v.fy, v.u0, v.v0]
            out[f"{p}.rotation"] = [float(x) for x in v.rotation.reshape(-1)]
            out[f"{p}.translation"] = [float(x) for x in v.translation]
        return out

    @classmethod
    def from_config(cls, flat: dict, prefix: str = "rig") -> "CameraRig":
        n = int(flat[f"{prefix}.n_views"])
        views = []
        for k in range(n):
            p = f"{prefix}.view{k}"
            fx, fy, u0, v0 = (float(x) for x in flat[f"{p}.intrinsics"])
            views.append(CameraView(fx, fy, u0, v0,
                                    np.asarray(flat[f"{p}.rotation"], dtype=float).reshape(3, 3),
                                    np.asarray(flat[f"{p}.translation"], dtype=float)))
        h, w = (int(x) for x in flat[f"{prefix}.grid"])
        return cls(tuple(views), (h, w))


def yaw_rotation(psi: float) -> np.ndarray:
    """World->camera rotation for a forward-looking camera yawed by ``psi``."""
    c, s = math.cos(psi), math.sin(psi)
    forward = (c, s, 0.0)
    right = (s, -c, 0.0)
    down = (0.0, 0.0, -1.0)
    return np.array([right, down, forward])


def default_rig(n_views: int = 6, grid: tuple[int, int] = (32, 80),
                hfov_deg: float = 70.0, vfov_deg: float = 60.0,
                mount: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> CameraRig:
    """Surround rig: ``n_views`` cameras yawed at equal increments around the ego."""
    h, w = grid
    fx = (w / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    fy = (h / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
    views = []
    for k in range(n_views):
        R = yaw_rotation(2.0 * math.pi * k / n_views)
        t = -R @ np.asarray(mount, dtype=float)
        views.append(CameraView(fx, fy, (w - 1) / 2.0, (h - 1) / 2.0, R, t))
    return CameraRig(tuple(views), (h, w))


@dataclass(frozen=True)
class BoxProjection:
    center: tuple[float, float]
    radius: float
    depth: float


def project_point(rig: CameraRig, view: int, p) -> tuple[float, float, float] | None:
    """Pinhole projection; ``None`` means the point is behind the near plane."""
    cam = rig.view(view)
    pc = cam.rotation @ np.asarray(p, dtype=float) + cam.translation
    if pc[2] <= NEAR_PLANE:
        return None
    return (cam.u0 + cam.fx * pc[0] / pc[2], cam.v0 + cam.fy * pc[1] / pc[2], float(pc[2]))


def box_corners(rec: ObjectRecord) -> np.ndarray:
    """The 8 yaw-rotated corners of a record's box, world frame, shape (8, 3)."""
    l, w, h = rec.size
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2.0)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (w / 2.0)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (h / 2.0)
    c, s = math.cos(rec.yaw), math.sin(rec.yaw)
    x = c * sx - s * sy
    y = s * sx + c * sy
    return np.stack([x, y, sz], axis=1) + np.asarray(rec.center, dtype=float)


def project_box(rig: CameraRig, view: int, rec: ObjectRecord) -> BoxProjection | None:
    """Projected center and radius of a box; ``None`` when not visible in the view."""
    cam = rig.view(view)
    center = project_point(rig, view, rec.center)
    if center is None:
        return None
    pc = box_corners(rec) @ cam.rotation.T + cam.translation
    front = pc[:, 2] > NEAR_PLANE
    if not front.any():
        return None
    pc = pc[front]
    u = cam.u0 + cam.fx * pc[:, 0] / pc[:, 2]
    v = cam.v0 + cam.fy * pc[:, 1] / pc[:, 2]
    umin, umax, vmin, vmax = u.min(), u.max(), v.min(), v.max()
    h, w = rig.grid
    if umax < -0.5 or umin > w - 0.5 or vmax < -0.5 or vmin > h - 0.5:
        return None
    r = 0.5 * math.hypot(umax - umin, vmax - vmin)
    return BoxProjection((center[0], center[1]), float(r), center[2])


def ray_direction(rig: CameraRig, view: int, cell: tuple[int, int]) -> np.ndarray:
    """Unit world-frame direction through the center of cell ``(i, j)``."""
    cam = rig.view(view)
    i, j = cell
    h, w = rig.grid
    if not (0 <= i < w and 0 <= j < h):
        raise IndexError(f"cell {cell} outside grid {w}x{h}")
    d = np.array([(i - cam.u0) / cam.fx, (j - cam.v0) / cam.fy, 1.0])
    d = cam.rotation.T @ d
    return d / np.linalg.norm(d)


def ray_grid(rig: CameraRig) -> np.ndarray:
    """All ray directions, shape (N, H_F, W_F, 3), in key order (view, row, column)."""
    h, w = rig.grid
    jj, ii = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    out = np.empty((rig.n_views, h, w, 3))
    for k, cam in enumerate(rig.views):
        d = np.stack([(ii - cam.u0) / cam.fx, (jj - cam.v0) / cam.fy, np.ones_like(ii)], axis=-1)
        d = d @ cam.rotation  # row-vector form of R^T d
        out[k] = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return out
