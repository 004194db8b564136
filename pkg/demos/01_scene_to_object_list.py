"""
From a synthetic scene to a noisy object list
=============================================

A scene is a handful of boxes around the ego car. The camera side of the
pipeline sees it as per-view feature grids. The object-level side sees it
through a simulated detector (the pseudo object-list generator) that jitters,
drops, invents and mislabels objects.

Run:  python demos/01_scene_to_object_list.py [output-dir]
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from clfusion import (PolgConfig, RenderConfig, SceneGenConfig, default_rig, generate_object_list,
                      render_feature_grids, sample_random_scene)
from clfusion.camera import project_box

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# one scene, six surround cameras with a coarse 16 x 40 feature grid
scene = sample_random_scene(SceneGenConfig(n_objects=(6, 6)), seed=3)
rig = default_rig(grid=(16, 40))
for rec in scene.objects:
    print(f"class {rec.class_id}  center ({rec.center[0]:6.1f}, {rec.center[1]:6.1f})  "
          f"yaw {rec.yaw:+.2f}")

# the detector simulation, with every rate at its maximum so something happens
res = generate_object_list(scene, PolgConfig(max_drop_rate=0.3, max_fp_rate=0.3, seed=1))
print("profile:", res.profile)
print("ground truth -> list index:", res.provenance)
print("false positives at:", res.fp_indices)

# features: each class owns four channels; energy makes objects visible
grids = render_feature_grids(scene, rig, RenderConfig(splat_gain=2.0), seed=0)
energy = (grids.data ** 2).sum(axis=1)

fig, axes = plt.subplots(2, 3, figsize=(12, 4))
for v, ax in enumerate(axes.flat):
    ax.imshow(energy[v], cmap="magma")
    for rec in scene.objects:
        p = project_box(rig, v, rec)
        if p is not None:
            ax.plot(*p.center, "c+")
    for rec in res.objects:
        p = project_box(rig, v, rec)
        if p is not None:
            ax.plot(*p.center, "wx", ms=4)
    ax.set_title(f"view {v}")
    ax.axis("off")
fig.suptitle("feature energy; + ground truth, x object list")
fig.savefig(out / "views.png", dpi=100, bbox_inches="tight")

# bird's-eye view of the two lists
fig, ax = plt.subplots(figsize=(5, 5))
gt = scene.objects.arrays()["center"]
pl = res.objects.arrays()["center"] if len(res.objects) else np.zeros((0, 3))
ax.scatter(gt[:, 1], gt[:, 0], s=60, facecolors="none", edgecolors="k", label="ground truth")
ax.scatter(pl[:, 1], pl[:, 0], s=15, c="r", label="object list")
ax.invert_xaxis()
ax.set_xlabel("y (left)")
ax.set_ylabel("x (forward)")
ax.legend()
fig.savefig(out / "bev.png", dpi=100, bbox_inches="tight")
print("figures in", out)
