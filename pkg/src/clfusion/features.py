"""Synthetic multi-view feature grids standing in for an image backbone.

Every visible object leaves a Gaussian splat in the four channels keyed by its
class.  The first pair holds the cosine and sine of a depth phase (range mapped
onto [0, pi]) and the second pair the cosine and sine of the object's yaw.  Both
pairs survive an unknown splat amplitude: the angle is recoverable with atan2,
which is the kind of cue a monocular backbone would extract.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .camera import CameraRig, project_box
from .io import atomic_write_bytes
from .scene import Scene

CHANNELS_PER_CLASS = 4


@dataclass(frozen=True)
class RenderConfig:
    n_channels: int = 16
    bg_std: float = 0.1
    splat_gain: float = 1.0
    clutter_rate: float = 0.1
    depth_scale: float = 75.0
    min_radius: float = 1.0


@dataclass(frozen=True)
class FeatureGrid:
    data: np.ndarray  # (N, C, H_F, W_F) float32

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def keys(self) -> np.ndarray:
        """Flattened key features, shape (N * H_F * W_F, C) in (view, row, column) order."""
        n, c, h, w = self.data.shape
        return self.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def class_channels(class_id: int, n_channels: int) -> np.ndarray:
    return (CHANNELS_PER_CLASS * class_id + np.arange(CHANNELS_PER_CLASS)) % n_channels


def splat(grid_hw: tuple[int, int], center, radius: float) -> np.ndarray:
    h, w = grid_hw
    cx, cy = center
    di = (np.arange(w, dtype=float) - cx) ** 2
    dj = (np.arange(h, dtype=float) - cy) ** 2
    return np.exp(-(dj[:, None] + di[None, :]) / (radius ** 2))


def _pattern(depth_cue: float, yaw: float) -> np.ndarray:
    phi = math.pi * depth_cue
    return np.array([math.cos(phi), math.sin(phi), math.cos(yaw), math.sin(yaw)])


def render_feature_grids(scene: Scene, rig: CameraRig, config: RenderConfig = RenderConfig(),
                         seed: int = 0) -> FeatureGrid:
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), 0x5EED]))
    n, (h, w), c = rig.n_views, rig.grid, config.n_channels
    data = rng.standard_normal((n, c, h, w)) * config.bg_std if config.bg_std > 0 \
        else np.zeros((n, c, h, w))
    for rec in scene.objects.records:
        for v in range(n):
            proj = project_box(rig, v, rec)
            if proj is None:
                continue
            s = splat((h, w), proj.center, max(proj.radius, config.min_radius))
            cue = min(proj.depth / config.depth_scale, 1.0)
            pat = config.splat_gain * _pattern(cue, rec.yaw)
            for ch, a in zip(class_channels(rec.class_id, c), pat):
                data[v, ch] += a * s
    if config.clutter_rate > 0:
        n_classes = max(c // CHANNELS_PER_CLASS, 1)
        for v in range(n):
            for _ in range(int(rng.poisson(config.clutter_rate))):
                center = (rng.uniform(-0.5, w - 0.5), rng.uniform(-0.5, h - 0.5))
                s = splat((h, w), center, float(rng.uniform(1.0, 3.0)))
                pat = config.splat_gain * _pattern(float(rng.random()),
                                                   float(rng.uniform(-math.pi, math.pi)))
                for ch, a in zip(class_channels(int(rng.integers(n_classes)), c), pat):
                    data[v, ch] += a * s
    return FeatureGrid(data.astype(np.float32))


_HEADER = struct.Struct("<4i")


def grid_to_bytes(array: np.ndarray) -> bytes:
    """Flat binary layout: int32 N, C, H, W header then float32 payload, little-endian."""
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim != 4:
        raise ValueError("expected a 4-D (N, C, H, W) array")
    return _HEADER.pack(*a.shape) + a.tobytes()


def grid_from_bytes(buf: bytes) -> np.ndarray:
    shape = _HEADER.unpack_from(buf, 0)
    payload = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    if payload.size != int(np.prod(shape)):
        raise ValueError("payload size does not match header")
    return payload.reshape(shape).astype(np.float32)


def write_grid(path, grid: FeatureGrid | np.ndarray) -> None:
    atomic_write_bytes(path, grid_to_bytes(grid.data if isinstance(grid, FeatureGrid) else grid))


def read_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        return FeatureGrid(grid_from_bytes(fh.read()))
