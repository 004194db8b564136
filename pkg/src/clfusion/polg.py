"""Pseudo object-list generation.

Simulates a black-box detector by corrupting ground truth in a fixed order:
state noise, drops, false positives, label flips.  Each scene draws its own
noise profile uniformly below the configured maxima.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .io import atomic_write_text
from .scene import (
    N_CLASSES,
    ObjectList,
    ObjectRecord,
    Scene,
    SourceTag,
    dumps_line,
    sample_size,
    wrap_angle,
)

MIN_SIZE = 0.1
_MASK64 = (1 << 64) - 1


class PolgConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolgConfig:
    max_pos_std_ratio: float = 0.06
    max_drop_rate: float = 0.2
    max_fp_rate: float = 0.1
    max_label_change_rate: float = 0.3
    noise_size: bool = True
    seed: int = 0
    n_classes: int = N_CLASSES
    ground_z: float = -1.0

    def __post_init__(self):
        if self.max_pos_std_ratio < 0:
            raise PolgConfigError("max_pos_std_ratio must be >= 0")
        if not 0.0 <= self.max_drop_rate <= 1.0:
            raise PolgConfigError("max_drop_rate must be in [0, 1]")
        if self.max_fp_rate < 0:
            raise PolgConfigError("max_fp_rate must be >= 0")
        if not 0.0 <= self.max_label_change_rate <= 1.0:
            raise PolgConfigError("max_label_change_rate must be in [0, 1]")

    @classmethod
    def from_tuple(cls, setting, **kw) -> "PolgConfig":
        """Build from a ``(std, drop, fp, label)`` maxima tuple."""
        s, d, f, lab = setting
        return cls(max_pos_std_ratio=s, max_drop_rate=d, max_fp_rate=f,
                   max_label_change_rate=lab, **kw)

    def maxima(self) -> tuple[float, float, float, float]:
        return (self.max_pos_std_ratio, self.max_drop_rate, self.max_fp_rate,
                self.max_label_change_rate)


@dataclass(frozen=True)
class PolgProfile:
    pos_std_ratio: float = 0.0
    drop_rate: float = 0.0
    fp_rate: float = 0.0
    label_change_rate: float = 0.0

    def to_dict(self) -> dict:
        return {"pos_std_ratio": self.pos_std_ratio, "drop_rate": self.drop_rate,
                "fp_rate": self.fp_rate, "label_change_rate": self.label_change_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "PolgProfile":
        return cls(**{k: float(d[k]) for k in ("pos_std_ratio", "drop_rate", "fp_rate",
                                                "label_change_rate")})

    @classmethod
    def at_maxima(cls, config: PolgConfig) -> "PolgProfile":
        return cls(*config.maxima())


def stage_rng(config_seed: int, scene_seed: int, stage: str) -> np.random.Generator:
    """Independent stream per (config seed, scene seed, stage name)."""
    ss = np.random.SeedSequence([config_seed & _MASK64, scene_seed & _MASK64,
                                 zlib.crc32(stage.encode())])
    return np.random.default_rng(ss)


def sample_noise_profile(config: PolgConfig, scene_seed: int) -> PolgProfile:
    rng = stage_rng(config.seed, scene_seed, "profile")
    u = rng.random(4)
    return PolgProfile(*(float(x * m) for x, m in zip(u, config.maxima())))


def apply_state_noise(objects: ObjectList, profile: PolgProfile, rng: np.random.Generator,
                      noise_size: bool = True) -> ObjectList:
    """Gaussian center/size/yaw noise scaled by each object's own dimensions."""
    if objects.source_tag is not SourceTag.GROUND_TRUTH:
        raise ValueError("state noise applies to ground-truth lists only")
    ratio = profile.pos_std_ratio
    if ratio == 0 or len(objects) == 0:
        return objects.with_records(objects.records, source_tag=SourceTag.POLG)
    n = len(objects)
    dc = rng.standard_normal((n, 3))
    ds = rng.standard_normal((n, 3))
    dy = rng.standard_normal(n)
    out = []
    for k, rec in enumerate(objects.records):
        size = np.asarray(rec.size)
        center = np.asarray(rec.center) + ratio * size * dc[k]
        if noise_size:
            size = np.maximum(size + ratio * size * ds[k], MIN_SIZE)
        out.append(replace(
            rec,
            center=tuple(float(v) for v in center),
            size=tuple(float(v) for v in size),
            yaw=wrap_angle(rec.yaw + ratio * math.pi * float(dy[k])),
        ))
    return objects.with_records(out, source_tag=SourceTag.POLG)


def apply_drops(objects: ObjectList, profile: PolgProfile,
                rng: np.random.Generator) -> tuple[ObjectList, list[int]]:
    """Independently drop each record with probability ``drop_rate``."""
    keep = rng.random(len(objects)) >= profile.drop_rate
    kept = [r for r, k in zip(objects.records, keep) if k]
    dropped = [i for i, k in enumerate(keep) if not k]
    return objects.with_records(kept), dropped


def sample_false_positive(rng: np.random.Generator, scene: Scene, n_classes: int,
                          ground_z: float) -> ObjectRecord:
    b = scene.bounds
    cls = int(rng.integers(n_classes))
    size = sample_size(rng, cls)
    x, y = (float(v) for v in rng.uniform(b.lo[:2], b.hi[:2]))
    z = min(max(ground_z + size[2] / 2.0, b.lo[2]), b.hi[2])
    return ObjectRecord(
        center=(x, y, float(z)),
        size=size,
        yaw=wrap_angle(float(rng.uniform(-math.pi, math.pi))),
        velocity=(0.0, 0.0),
        class_id=cls,
        confidence=float(rng.uniform(0.3, 0.7)),
    )


def inject_false_positives(objects: ObjectList, profile: PolgProfile, scene: Scene,
                           rng: np.random.Generator, n_classes: int = N_CLASSES,
                           ground_z: float = -1.0) -> tuple[ObjectList, list[int]]:
    """Append ``Binomial(n_gt, fp_rate)`` spurious records; returns their indices."""
    n_gt = len(scene.objects)
    p = min(profile.fp_rate, 1.0)
    n_fp = int(rng.binomial(n_gt, p)) if n_gt and p > 0 else 0
    fps = [sample_false_positive(rng, scene, n_classes, ground_z) for _ in range(n_fp)]
    start = len(objects)
    return objects.with_records(objects.records + tuple(fps)), list(range(start, start + n_fp))


def corrupt_labels(objects: ObjectList, profile: PolgProfile, rng: np.random.Generator,
                   n_classes: int = N_CLASSES) -> ObjectList:
    """Swap each label, with probability ``label_change_rate``, for a different class."""
    rate = profile.label_change_rate
    if rate > 0 and n_classes < 2:
        raise PolgConfigError("label corruption needs at least 2 classes")
    if rate == 0 or len(objects) == 0:
        return objects
    n = len(objects)
    flip = rng.random(n) < rate
    shift = rng.integers(1, n_classes, size=n)
    out = [replace(r, class_id=int((r.class_id + s) % n_classes)) if f else r
           for r, f, s in zip(objects.records, flip, shift)]
    return objects.with_records(out)


@dataclass(frozen=True)
class PolgResult:
    objects: ObjectList
    provenance: tuple[int | None, ...]  # gt index -> output index, None when dropped
    fp_indices: tuple[int, ...]
    profile: PolgProfile

    def targets(self) -> list[int]:
        """Output index -> gt index, ``-1`` for false positives."""
        t = [-1] * len(self.objects)
        for g, i in enumerate(self.provenance):
            if i is not None:
                t[i] = g
        return t

    def to_dict(self) -> dict:
        return {"profile": self.profile.to_dict(),
                "provenance": [(-1 if i is None else i) for i in self.provenance],
                "fp_indices": list(self.fp_indices)}


def generate_object_list(scene: Scene, config: PolgConfig,
                         profile: PolgProfile | None = None) -> PolgResult:
    """Full pipeline: profile -> state noise -> drops -> false positives -> labels.

    Passing ``profile`` skips sampling and uses those rates as given.
    """
    if profile is None:
        profile = sample_noise_profile(config, scene.seed)

    def rng(stage):
        return stage_rng(config.seed, scene.seed, stage)

    gt = scene.objects
    noisy = apply_state_noise(gt, profile, rng("state"), config.noise_size)
    kept, dropped = apply_drops(noisy, profile, rng("drop"))
    with_fp, fp_idx = inject_false_positives(kept, profile, scene, rng("fp"),
                                             config.n_classes, config.ground_z)
    final = corrupt_labels(with_fp, profile, rng("label"), config.n_classes)
    final = final.with_records(final.records, source_tag=SourceTag.POLG, frame_id=gt.frame_id)

    dropped_set = set(dropped)
    provenance: list[int | None] = []
    nxt = 0
    for g in range(len(gt)):
        if g in dropped_set:
            provenance.append(None)
        else:
            provenance.append(nxt)
            nxt += 1
    return PolgResult(final, tuple(provenance), tuple(fp_idx), profile)


# -- files: one metadata header line, then the object-list line, per scene -----

def polg_file_text(scenes: Sequence[Scene], results: Sequence[PolgResult]) -> str:
    lines = []
    for s, r in zip(scenes, results):
        lines.append(dumps_line({"polg": {"scene_seed": s.seed, "frame_id": s.frame_id,
                                          **r.to_dict()}}))
        lines.append(dumps_line(r.objects.to_dict()))
    return "".join(line + "\n" for line in lines)


def write_polg_file(path, scenes: Sequence[Scene], results: Sequence[PolgResult]) -> None:
    atomic_write_text(path, polg_file_text(scenes, results))


def read_polg_file(path) -> list[tuple[dict, ObjectList]]:
    """``(metadata, object list)`` per scene."""
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if len(lines) % 2 or not all("polg" in m for m in lines[::2]):
        raise ValueError(f"{path}: expected alternating metadata and object-list lines")
    return [(m["polg"], ObjectList.from_dict(o)) for m, o in zip(lines[::2], lines[1::2])]
