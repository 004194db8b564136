"""
A tiny ablation you can run in a few minutes
=============================================

Trains Baseline (camera only) and the two fusion variants on a small split,
evaluates each with and without object lists at inference, and writes a
report. Numbers at this size are noisy. The benchmark suite uses the desk
preset with five seeds.

Run:  python demos/03_tiny_ablation.py [output-dir]
"""

import sys
from pathlib import Path

from clfusion.harness import Variant, desk_benchmark, noise_sweep, report, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "ablation"

dirs = []
for variant in (Variant.BASELINE, Variant.QDN, Variant.SMCA_QDN):
    cfg = desk_benchmark(variant, seed=0, output_dir=str(out / variant.value), n_train=300, epochs=3)
    dirs.append(run_experiment(cfg))
    print("trained", variant.value)

summary = report(dirs, out / "report")
for v in summary["variants"]:
    row = summary["table"][v]
    print(f"{v:9s} desk {row['with_object_lists.desk_score'][0]:.3f}   "
          f"without lists {row['without_object_lists.desk_score'][0]:.3f}")

# the same fused model against cleaner and noisier object lists
for r in noise_sweep(dirs[-1]):
    print("setting", r["setting"], "mAP", round(r["mAP"], 3))
print("report in", out / "report")
