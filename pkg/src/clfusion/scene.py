"""Scenes, object records and object lists.

An object list is what a smart sensor or upstream detector hands over: a set
of 3D boxes with position, size, yaw, planar velocity, class and confidence.
Scenes bundle a ground-truth object list with world bounds and a camera rig.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES: tuple[str, ...] = ("car", "pedestrian", "cyclist", "barrier")
N_CLASSES = len(CLASS_NAMES)

# (l, w, h) ranges in meters, per class index
CLASS_SIZE_RANGES: tuple[tuple[tuple[float, float], ...], ...] = (
    ((3.8, 4.9), (1.7, 2.0), (1.4, 1.8)),
    ((0.5, 0.9), (0.5, 0.8), (1.5, 1.9)),
    ((1.6, 1.9), (0.5, 0.8), (1.4, 1.8)),
    ((1.8, 2.6), (0.3, 0.6), (0.9, 1.1)),
)
CLASS_MAX_SPEED: tuple[float, ...] = (10.0, 1.5, 5.0, 0.0)


def no_object(n_classes: int = N_CLASSES) -> int:
    """Classification sentinel; never stored in an object record."""
    return n_classes


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return -math.pi if w >= math.pi else w


class SourceTag(str, enum.Enum):
    GROUND_TRUTH = "GroundTruth"
    POLG = "Polg"
    EXTERNAL = "External"


@dataclass(frozen=True)
class ObjectRecord:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    confidence: float = 1.0

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "velocity": list(self.velocity),
            "class_id": self.class_id,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectRecord":
        return cls(
            center=tuple(float(v) for v in d["center"]),
            size=tuple(float(v) for v in d["size"]),
            yaw=float(d["yaw"]),
            velocity=tuple(float(v) for v in d["velocity"]),
            class_id=int(d["class_id"]),
            confidence=float(d["confidence"]),
        )


@dataclass(frozen=True)
class ObjectList:
    records: tuple[ObjectRecord, ...] = ()
    source_tag: SourceTag = SourceTag.GROUND_TRUTH
    frame_id: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> ObjectRecord:
        return self.records[i]

    def with_records(self, records: Iterable[ObjectRecord], **kw) -> "ObjectList":
        return replace(self, records=tuple(records), **kw)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column view: centers (n,3), sizes (n,3), yaws (n,), classes (n,), scores (n,)."""
        n = len(self.records)
        if n == 0:
            z3 = np.zeros((0, 3))
            return {"center": z3, "size": z3.copy(), "yaw": np.zeros(0),
                    "class_id": np.zeros(0, dtype=np.int64), "confidence": np.zeros(0)}
        return {
            "center": np.array([r.center for r in self.records], dtype=float),
            "size": np.array([r.size for r in self.records], dtype=float),
            "yaw": np.array([r.yaw for r in self.records], dtype=float),
            "class_id": np.array([r.class_id for r in self.records], dtype=np.int64),
            "confidence": np.array([r.confidence for r in self.records], dtype=float),
        }

    def to_dict(self) -> dict:
        return {
            "source_tag": self.source_tag.value,
            "frame_id": self.frame_id,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectList":
        return cls(
            records=tuple(ObjectRecord.from_dict(r) for r in d["records"]),
            source_tag=SourceTag(d["source_tag"]),
            frame_id=int(d["frame_id"]),
        )


@dataclass(frozen=True)
class Bounds:
    lo: tuple[float, float, float] = (-50.0, -50.0, -4.0)
    hi: tuple[float, float, float] = (50.0, 50.0, 4.0)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, p) -> bool:
        return all(self.lo[k] <= p[k] <= self.hi[k] for k in range(3))

    def normalize(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - np.asarray(self.lo)) / self.extent

    def denormalize(self, q: np.ndarray) -> np.ndarray:
        return np.asarray(self.lo) + np.asarray(q) * self.extent


@dataclass(frozen=True)
class Scene:
    objects: ObjectList
    bounds: Bounds = field(default_factory=Bounds)
    rig: str = "default"
    seed: int = 0

    @property
    def frame_id(self) -> int:
        return self.objects.frame_id

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rig": self.rig,
            "bounds": {"lo": list(self.bounds.lo), "hi": list(self.bounds.hi)},
            "objects": self.objects.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        b = d["bounds"]
        return cls(
            objects=ObjectList.from_dict(d["objects"]),
            bounds=Bounds(tuple(float(v) for v in b["lo"]), tuple(float(v) for v in b["hi"])),
            rig=str(d["rig"]),
            seed=int(d["seed"]),
        )


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Violation:
    record: int | None
    field: str
    message: str

    def __str__(self) -> str:
        where = "scene" if self.record is None else f"record {self.record}"
        return f"{where}: {self.field}: {self.message}"


def validate_record(rec: ObjectRecord, index: int | None = None,
                    n_classes: int = N_CLASSES) -> list[Violation]:
    out = []
    values = list(rec.center) + list(rec.size) + [rec.yaw] + list(rec.velocity) + [rec.confidence]
    if not all(math.isfinite(v) for v in values):
        out.append(Violation(index, "finite", "non-finite coordinate"))
    for name, v in zip("lwh", rec.size):
        if not v > 0:
            out.append(Violation(index, f"size.{name}", f"must be > 0, got {v}"))
    if not (-math.pi <= rec.yaw < math.pi):
        out.append(Violation(index, "yaw", f"outside [-pi, pi): {rec.yaw}"))
    if not (0.0 <= rec.confidence <= 1.0):
        out.append(Violation(index, "confidence", f"outside [0, 1]: {rec.confidence}"))
    if not (0 <= rec.class_id < n_classes):
        out.append(Violation(index, "class_id", f"not in [0, {n_classes}): {rec.class_id}"))
    return out


def validate_scene(scene: Scene, n_classes: int = N_CLASSES) -> list[Violation]:
    """Check every type invariant; violations are returned, never raised."""
    report: list[Violation] = []
    lo, hi = scene.bounds.lo, scene.bounds.hi
    if not all(h > l for l, h in zip(lo, hi)):
        report.append(Violation(None, "bounds", "degenerate bounds"))
    for i, rec in enumerate(scene.objects.records):
        report.extend(validate_record(rec, i, n_classes))
        if all(math.isfinite(c) for c in rec.center) and not scene.bounds.contains(rec.center):
            report.append(Violation(i, "center", "outside scene bounds"))
    return report


@dataclass(frozen=True)
class SceneGenConfig:
    n_objects: tuple[int, int] = (4, 12)
    bounds: Bounds = field(default_factory=Bounds)
    class_weights: tuple[float, ...] = (0.5, 0.2, 0.15, 0.15)
    ground_z: float = -1.0
    min_separation: float = 0.5
    min_ego_distance: float = 1.0
    max_attempts: int = 10_000


def sample_size(rng: np.random.Generator, class_id: int) -> tuple[float, float, float]:
    ranges = CLASS_SIZE_RANGES[class_id % len(CLASS_SIZE_RANGES)]
    return tuple(float(rng.uniform(a, b)) for a, b in ranges)


def sample_random_scene(config: SceneGenConfig, seed: int, frame_id: int = 0) -> Scene:
    lo_n, hi_n = config.n_objects
    if hi_n < lo_n:
        raise ValueError("empty n_objects range")
    b = config.bounds
    if not all(h > l for l, h in zip(b.lo, b.hi)):
        raise ValueError("degenerate bounds")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo_n, hi_n + 1))
    w = np.asarray(config.class_weights, dtype=float)
    w = w / w.sum()

    records: list[ObjectRecord] = []
    xy = np.zeros((0, 2))
    attempts = 0
    while len(records) < n:
        attempts += 1
        if attempts > config.max_attempts:
            raise GenerationError(
                f"placed {len(records)}/{n} objects after {config.max_attempts} attempts")
        p = rng.uniform(b.lo[:2], b.hi[:2])
        if math.hypot(p[0], p[1]) < config.min_ego_distance:
            continue
        if len(xy) and np.min(np.hypot(*(xy - p).T)) < config.min_separation:
            continue
        cls = int(rng.choice(len(w), p=w))
        size = sample_size(rng, cls)
        cz = min(max(config.ground_z + size[2] / 2.0, b.lo[2]), b.hi[2])
        yaw = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
        speed = float(rng.uniform(0.0, CLASS_MAX_SPEED[cls % len(CLASS_MAX_SPEED)]))
        records.append(ObjectRecord(
            center=(float(p[0]), float(p[1]), float(cz)),
            size=size,
            yaw=yaw,
            velocity=(speed * math.cos(yaw), speed * math.sin(yaw)),
            class_id=cls,
            confidence=1.0,
        ))
        xy = np.vstack([xy, p])
    return Scene(ObjectList(tuple(records), SourceTag.GROUND_TRUTH, frame_id), b, "default", seed)


# -- line-delimited files ---------------------------------------------------

def _encode(obj) -> str:
    # floats are written with 17 significant digits so they round-trip exactly
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite float cannot be serialized")
        return format(obj, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, np.floating):
        return _encode(float(obj))
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps_line(obj) -> str:
    return _encode(obj)


def scene_to_line(scene: Scene) -> str:
    return dumps_line(scene.to_dict())


def scene_from_line(line: str) -> Scene:
    return Scene.from_dict(json.loads(line))


def write_scenes(path, scenes: Sequence[Scene]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(scene_to_line(s) + "\n" for s in scenes))


def read_scenes(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [scene_from_line(line) for line in fh if line.strip()]


def write_object_lists(path, lists: Sequence[ObjectList]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(dumps_line(o.to_dict()) + "\n" for o in lists))


def read_object_lists(path) -> list[ObjectList]:
    with open(path, encoding="utf-8") as fh:
        return [ObjectList.from_dict(json.loads(line)) for line in fh if line.strip()]
