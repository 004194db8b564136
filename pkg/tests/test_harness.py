import json
import math

import numpy as np
import pytest

from clfusion.camera import default_rig
from clfusion.decoder import DecoderConfig, NumericFault, OptimizerConfig
from clfusion.scene import SceneGenConfig
from clfusion.harness import (
    LOSS_COLUMNS,
    ExperimentConfig,
    Variant,
    derive_seed,
    epochs_to_reach,
    noise_sweep,
    read_losses,
    report,
    run_experiment,
)


def tiny(tmp_path, variant=Variant.SMCA_QDN, seed=0, name=None, **kw):
    base = dict(variant=variant, seed=seed, epochs=1, batch_size=4, n_train=8, n_eval=4,
                output_dir=str(tmp_path / (name or f"{Variant(variant).value}_{seed}")),
                decoder=DecoderConfig(d_model=16, n_heads=2, n_layers=1, n_learnable_queries=8,
                                      n_dn_groups=1),
                scene=SceneGenConfig(n_objects=(1, 4)), rig=default_rig(grid=(4, 8)))
    base.update(kw)
    return ExperimentConfig(**base)


def test_derive_seed_stable():
    assert derive_seed(1, "train", 3) == derive_seed(1, "train", 3)
    assert derive_seed(1, "train", 3) != derive_seed(1, "eval", 3)
    assert 0 <= derive_seed(2 ** 64 - 1) < 2 ** 64


def test_run_artifacts_and_determinism(tmp_path):
    a = run_experiment(tiny(tmp_path, name="a"))
    b = run_experiment(tiny(tmp_path, name="b"))
    names = {"config.txt", "losses.csv", "model.ckpt", "eval.json", "eval_with_lists.csv",
             "eval_without_lists.csv"}
    assert names <= {p.name for p in a.iterdir()}
    assert not list(a.glob("*.tmp*"))
    for n in names - {"config.txt"}:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    rows = read_losses(a / "losses.csv")
    assert len(rows) == 1 and tuple(rows[0]) == LOSS_COLUMNS
    ev = json.loads((a / "eval.json").read_text())
    assert set(ev) == {"variant", "seed", "with_object_lists", "without_object_lists"}


def test_rerun_after_delete_is_identical(tmp_path):
    cfg = tiny(tmp_path, Variant.DN)
    first = (run_experiment(cfg) / "model.ckpt").read_bytes()
    for p in (tmp_path / "DN_0").iterdir():
        p.unlink()
    assert (run_experiment(cfg) / "model.ckpt").read_bytes() == first


def test_seed_changes_losses(tmp_path):
    a = run_experiment(tiny(tmp_path, Variant.QDN, seed=0))
    b = run_experiment(tiny(tmp_path, Variant.QDN, seed=1))
    assert (a / "losses.csv").read_text() != (b / "losses.csv").read_text()


def test_zero_epochs_still_complete(tmp_path):
    out = run_experiment(tiny(tmp_path, Variant.BASELINE, epochs=0))
    assert read_losses(out / "losses.csv") == []
    assert (out / "model.ckpt").exists() and (out / "eval.json").exists()


def test_numeric_fault_recorded(tmp_path):
    cfg = tiny(tmp_path, Variant.QDN, epochs=2, optimizer=OptimizerConfig(lr=1e30, grad_clip=0.0))
    with pytest.raises(NumericFault) as e:
        run_experiment(cfg)
    assert "epoch" in str(e.value)
    fail = json.loads((tmp_path / "QDN_0" / "failure.json").read_text())
    assert fail["error"] == "numeric fault" and "step" in fail["message"]


def test_sweep_rows_and_csv(tmp_path):
    out = run_experiment(tiny(tmp_path))
    rows = noise_sweep(out, [(0.06, 0.2, 0.1, 0.3)], out / "sweep.csv")
    assert len(rows) == 1 and 0 <= rows[0]["mAP"] <= 1
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("std,drop,fp,label") and len(lines) == 2


def test_report_orders_variants_and_skips_incomplete(tmp_path):
    dirs = [run_experiment(tiny(tmp_path, v)) for v in (Variant.SMCA_QDN, Variant.BASELINE)]
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "config.txt").write_text("")
    summary = report(dirs + [broken], tmp_path / "rep")
    assert summary["variants"] == ["Baseline", "SMCA_QDN"]
    assert len(summary["warnings"]) == 1 and "broken" in summary["warnings"][0]
    header = (tmp_path / "rep" / "report.csv").read_text().splitlines()[0]
    assert header == "metric,Baseline,SMCA_QDN"
    svg = (tmp_path / "rep" / "learning_curves.svg").read_bytes()
    report(dirs, tmp_path / "rep2")
    assert (tmp_path / "rep2" / "learning_curves.svg").read_bytes() == svg
    assert (tmp_path / "rep2" / "scores.svg").read_bytes() == (tmp_path / "rep" / "scores.svg").read_bytes()


def test_report_single_run(tmp_path):
    d = run_experiment(tiny(tmp_path, Variant.QDN))
    s = report([d], tmp_path / "rep")
    assert s["variants"] == ["QDN"]
    med, lo, hi = s["table"]["QDN"]["with_object_lists.desk_score"]
    assert lo == med == hi


def test_epochs_to_reach():
    rows = [{"epoch": e, "det_loss": v} for e, v in enumerate([3.0, 2.0, 1.0], 1)]
    assert epochs_to_reach(rows, 2.5) == 2
    assert epochs_to_reach(rows, 3.0) == 1
    assert epochs_to_reach(rows, 0.5) is None
    assert epochs_to_reach([], 1.0) is None


def test_loss_columns_consistent(tmp_path):
    rows = read_losses(run_experiment(tiny(tmp_path, epochs=2)) / "losses.csv")
    for r in rows:
        assert math.isclose(r["total"], r["cls"] + r["box_l1"] + r["dn_cls"] + r["dn_box"], rel_tol=1e-6)
        assert math.isclose(r["set_loss"], r["cls"] + r["box_l1"], rel_tol=1e-6)
        assert np.isfinite(r["det_loss"])
