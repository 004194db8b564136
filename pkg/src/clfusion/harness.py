"""Experiment orchestration: data splits, training, evaluation, sweeps, reports."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .camera import CameraRig, default_rig
from .config import (
    ConfigError,
    dataclass_from_flat,
    dataclass_to_flat,
    dump_flat,
    parse_flat,
)
from .decoder import (
    DecoderConfig,
    MaskMode,
    NumericFault,
    OptimizerConfig,
    QdnDecoder,
    TrainSample,
    build_model,
    encode_dn_queries,
    gaussian_bias,
    load_checkpoint,
    make_optimizer,
    predict_batch,
    save_checkpoint,
    train_step,
)
from .features import RenderConfig, render_feature_grids
from .io import atomic_write_text
from .matching import MatchCost
from .metrics import EvalResult, evaluate
from .polg import PolgConfig, generate_object_list
from .scene import Scene, SceneGenConfig, sample_random_scene

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class Variant(str, enum.Enum):
    BASELINE = "Baseline"
    DN = "DN"
    QDN = "QDN"
    SMCA_QDN = "SMCA_QDN"


VARIANT_ORDER = (Variant.BASELINE, Variant.DN, Variant.QDN, Variant.SMCA_QDN)

VARIANT_MODES = {
    Variant.BASELINE: (MaskMode.NODN, False),
    Variant.DN: (MaskMode.DNDETR, False),
    Variant.QDN: (MaskMode.NOMASK_QDN, False),
    Variant.SMCA_QDN: (MaskMode.NOMASK_QDN, True),
}

# (std, drop, fp, label) maxima at inference; the middle one is the training setting
REFERENCE_SWEEP = ((0.03, 0.1, 0.05, 0.1), (0.06, 0.2, 0.1, 0.3), (0.1, 0.3, 0.2, 0.5))


_RIG_KEY = re.compile(r"rig\.(grid|n_views|view\d+\.(intrinsics|rotation|translation))")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from ints and strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode()))
        else:
            words.append(int(p) & _MASK64)
    a, b = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(a) << 32) | int(b)


@dataclass(frozen=True)
class ExperimentConfig:
    variant: Variant = Variant.SMCA_QDN
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    epochs: int = 24
    batch_size: int = 8
    n_train: int = 400
    n_eval: int = 100
    output_dir: str = "runs/run"
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    polg: PolgConfig = field(default_factory=PolgConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cost: MatchCost = field(default_factory=MatchCost)
    rig: CameraRig = field(default_factory=default_rig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        mode, bias = VARIANT_MODES[self.variant]
        dec = self.decoder
        if dec.mask_mode is not mode or dec.use_gaussian_bias != bias:
            object.__setattr__(self, "decoder", replace(dec, mask_mode=mode, use_gaussian_bias=bias))
        if self.render.n_channels != self.decoder.n_channels:
            raise ConfigError("render.n_channels must equal decoder.n_channels")
        if self.decoder.n_learnable_queries < self.scene.n_objects[1]:
            raise ConfigError("decoder.n_learnable_queries must cover scene.n_objects maximum")

    def with_variant(self, variant, **kw) -> "ExperimentConfig":
        return replace(self, variant=Variant(variant), **kw)

    @property
    def uses_object_lists(self) -> bool:
        return self.decoder.uses_dn or self.decoder.use_gaussian_bias

    def to_flat(self) -> dict:
        flat = {
            "experiment.variant": self.variant.value,
            "experiment.seed": self.seed,
            "experiment.seeds": list(self.seeds),
            "experiment.epochs": self.epochs,
            "experiment.batch_size": self.batch_size,
            "experiment.n_train": self.n_train,
            "experiment.n_eval": self.n_eval,
            "experiment.output_dir": self.output_dir,
        }
        for name in ("scene", "polg", "render", "decoder", "optimizer", "cost"):
            flat.update(dataclass_to_flat(getattr(self, name), name))
        flat.update(self.rig.to_config("rig"))
        return flat

    def to_text(self) -> str:
        return dump_flat(self.to_flat())

    @classmethod
    def from_flat(cls, flat: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        known = set(cls().to_flat())
        unknown = [k for k in flat if k not in known and not _RIG_KEY.fullmatch(k)]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        exp = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("experiment.")}
        for name, v in exp.items():
            if name == "variant":
                try:
                    kw[name] = Variant(v)
                except ValueError:
                    raise ConfigError(f"unknown variant {v!r}") from None
            elif name == "seeds":
                kw[name] = tuple(int(x) for x in v)
            elif name == "output_dir":
                kw[name] = str(v)
            elif name in ("seed", "epochs", "batch_size", "n_train", "n_eval"):
                kw[name] = int(v)
            else:
                raise ConfigError(f"unknown key experiment.{name}")
        for name in ("scene", "polg", "render", "decoder", "optimizer", "cost"):
            kw[name] = dataclass_from_flat(getattr(base, name), flat, name)
        if any(k.startswith("rig.") for k in flat):
            grid_only = set(k for k in flat if k.startswith("rig.")) <= {"rig.grid", "rig.n_views"}
            if grid_only:
                kw["rig"] = default_rig(int(flat.get("rig.n_views", base.rig.n_views)),
                                        tuple(flat.get("rig.grid", base.rig.grid)))
            else:
                kw["rig"] = CameraRig.from_config(flat, "rig")
        try:
            return replace(base, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_flat(parse_flat(text), base)

    @classmethod
    def load(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def desk_benchmark(variant=Variant.SMCA_QDN, seed: int = 0, output_dir: str = "runs/run",
                   **overrides) -> ExperimentConfig:
    """Reduced setting used by the ablation benchmark (single CPU core budget)."""
    cfg = ExperimentConfig(
        variant=Variant(variant),
        seed=seed,
        seeds=(0, 1, 2, 3, 4),
        epochs=4,
        batch_size=8,
        n_train=1200,
        n_eval=100,
        output_dir=output_dir,
        decoder=DecoderConfig(d_model=32, n_heads=4, n_layers=2, n_learnable_queries=40,
                              n_dn_groups=2),
        optimizer=OptimizerConfig(lr=3e-3),
        render=RenderConfig(splat_gain=2.0),
        rig=default_rig(grid=(8, 20)),
    )
    return replace(cfg, **overrides) if overrides else cfg


# -- data -------------------------------------------------------------------

@dataclass
class Split:
    scenes: list[Scene]
    keys: list[np.ndarray]


def make_split(cfg: ExperimentConfig, name: str, n: int) -> Split:
    scenes, keys = [], []
    for i in range(n):
        s = sample_random_scene(cfg.scene, derive_seed(cfg.seed, name, i), frame_id=i)
        g = render_feature_grids(s, cfg.rig, cfg.render, seed=derive_seed(cfg.seed, name, i, "render"))
        scenes.append(s)
        keys.append(g.keys())
    return Split(scenes, keys)


def eval_object_lists(cfg: ExperimentConfig, split: Split, polg: PolgConfig | None = None):
    pc = replace(polg or cfg.polg, seed=derive_seed(cfg.seed, "eval-polg"))
    return [generate_object_list(s, pc).objects for s in split.scenes]


def make_sample(cfg: ExperimentConfig, split: Split, i: int, polg: PolgConfig,
                rng: np.random.Generator) -> TrainSample:
    scene = split.scenes[i]
    dn, bias = None, None
    if cfg.uses_object_lists:
        res = generate_object_list(scene, polg)
        if cfg.decoder.uses_dn and len(res.objects):
            dn = encode_dn_queries(res.objects, res.targets(), cfg.decoder.n_dn_groups, scene.bounds,
                                   rng, cfg.decoder.dn_jitter_ratio)
        if cfg.decoder.use_gaussian_bias:
            bias = gaussian_bias(cfg.rig, res.objects, cfg.decoder)
    return TrainSample(split.keys[i], scene.objects, dn, bias, scene.bounds)


LOSS_COLUMNS = ("epoch", "total", "cls", "box_l1", "dn_cls", "dn_box", "det_loss", "set_loss")


def train_model(cfg: ExperimentConfig, split: Split, on_epoch=None) -> tuple[QdnDecoder, list[dict]]:
    model = build_model(cfg.decoder, cfg.rig, cfg.scene.bounds, seed=derive_seed(cfg.seed, "init"))
    opt = make_optimizer(model, cfg.optimizer)
    rows = []
    n = len(split.scenes)
    for epoch in range(1, cfg.epochs + 1):
        polg = replace(cfg.polg, seed=derive_seed(cfg.seed, "train-polg", epoch))
        rng = np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch))
        order = rng.permutation(n)
        acc = {k: 0.0 for k in LOSS_COLUMNS[1:7]}
        steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [make_sample(cfg, split, int(i), polg, rng)
                     for i in order[start:start + cfg.batch_size]]
            try:
                parts = train_step(model, opt, batch, cfg.cost, cfg.optimizer.grad_clip)
            except NumericFault as e:
                raise NumericFault(f"epoch {epoch} step {step}: {e}", e.layer) from e
            for k in acc:
                acc[k] += parts[k]
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in acc.items()}}
        row["set_loss"] = row["cls"] + row["box_l1"]
        rows.append(row)
        log.info("%s seed %d epoch %d loss %.4f", cfg.variant.value, cfg.seed, epoch, row["total"])
        if on_epoch is not None:
            on_epoch(row)
    return model, rows


def predict_split(model: QdnDecoder, cfg: ExperimentConfig, split: Split, lists, batch: int = 16):
    out = []
    for s in range(0, len(split.scenes), batch):
        out.extend(predict_batch(model, split.keys[s:s + batch], cfg.rig, lists[s:s + batch]))
    return out


def evaluate_model(model: QdnDecoder, cfg: ExperimentConfig, split: Split,
                   lists: Sequence | None) -> EvalResult:
    lists = list(lists) if lists is not None else [None] * len(split.scenes)
    preds = predict_split(model, cfg, split, lists)
    return evaluate(preds, [s.objects for s in split.scenes], cfg.decoder.n_classes)


def losses_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.10g}" for k in LOSS_COLUMNS[1:]])
    return buf.getvalue()


def read_losses(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Train, evaluate with and without object lists, write the run directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.txt", cfg.to_text())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed & 0x7FFFFFFF)
        train = make_split(cfg, "train", cfg.n_train)
        try:
            model, rows = train_model(cfg, train)
        except NumericFault as e:
            atomic_write_text(out / "failure.json", json.dumps(
                {"error": "numeric fault", "message": str(e), "layer": e.layer}, indent=2))
            raise
        atomic_write_text(out / "losses.csv", losses_csv(rows))
        save_checkpoint(out / "model.ckpt", model, {"variant": cfg.variant.value, "seed": cfg.seed})
        test = make_split(cfg, "eval", cfg.n_eval)
        ev_with = evaluate_model(model, cfg, test, eval_object_lists(cfg, test))
        ev_without = evaluate_model(model, cfg, test, None)
    atomic_write_text(out / "eval_with_lists.csv", ev_with.to_csv())
    atomic_write_text(out / "eval_without_lists.csv", ev_without.to_csv())
    atomic_write_text(out / "eval.json", json.dumps({
        "variant": cfg.variant.value,
        "seed": cfg.seed,
        "with_object_lists": ev_with.to_dict(),
        "without_object_lists": ev_without.to_dict(),
    }, indent=2, sort_keys=True))
    return out


def load_run(run_dir) -> tuple[ExperimentConfig, QdnDecoder]:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.txt")
    model, _ = load_checkpoint(run_dir / "model.ckpt")
    return cfg, model


def evaluate_run(run_dir, with_object_lists: bool = True, polg: PolgConfig | None = None) -> EvalResult:
    cfg, model = load_run(run_dir)
    test = make_split(cfg, "eval", cfg.n_eval)
    lists = eval_object_lists(cfg, test, polg) if with_object_lists else None
    return evaluate_model(model, cfg, test, lists)


def noise_sweep(run_dir, settings: Sequence[Sequence[float]] = REFERENCE_SWEEP,
                out_path=None) -> list[dict]:
    """Evaluate one trained model under several inference-time POLG maxima."""
    cfg, model = load_run(run_dir)
    test = make_split(cfg, "eval", cfg.n_eval)
    rows = []
    for setting in settings:
        pc = PolgConfig.from_tuple(tuple(float(x) for x in setting), n_classes=cfg.polg.n_classes,
                                   noise_size=cfg.polg.noise_size, ground_z=cfg.polg.ground_z)
        ev = evaluate_model(model, cfg, test, eval_object_lists(cfg, test, pc))
        s = ev.summary()
        rows.append({"setting": list(setting), "mAP": s["mAP"], "desk_score": s["desk_score"],
                     "mAP@2": s["mAP@2"]})
    if out_path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["std", "drop", "fp", "label", "mAP", "mAP@2", "desk_score"])
        for r in rows:
            w.writerow([f"{x:g}" for x in r["setting"]] +
                       [f"{r['mAP']:.6f}", f"{r['mAP@2']:.6f}", f"{r['desk_score']:.6f}"])
        atomic_write_text(out_path, buf.getvalue())
    return rows


# -- reports ----------------------------------------------------------------

REPORT_METRICS = ("desk_score", "mAP", "mAP@2", "mATE", "mASE", "mAOE")


def _median_range(values: Sequence[float]) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    return float(np.median(v)), float(v.min()), float(v.max())


def collect_runs(run_dirs: Iterable) -> tuple[list[dict], list[str]]:
    runs, warnings = [], []
    for d in run_dirs:
        d = Path(d)
        missing = [f for f in ("eval.json", "losses.csv", "config.txt") if not (d / f).exists()]
        if missing:
            warnings.append(f"{d}: incomplete run (missing {', '.join(missing)}), skipped")
            continue
        ev = json.loads((d / "eval.json").read_text())
        runs.append({"dir": str(d), "variant": ev["variant"], "seed": ev["seed"], "eval": ev,
                     "losses": read_losses(d / "losses.csv")})
    return runs, warnings


def report(run_dirs: Iterable, out_dir) -> dict:
    """Aggregate runs per variant (median, min, max over seeds); write CSV, JSON and SVGs."""
    runs, warns = collect_runs(run_dirs)
    for w in warns:
        log.warning(w)
    order = [v.value for v in VARIANT_ORDER]
    variants = sorted({r["variant"] for r in runs}, key=lambda v: order.index(v) if v in order else 99)
    table = {}
    for v in variants:
        rs = [r for r in runs if r["variant"] == v]
        row = {"n_runs": len(rs), "seeds": sorted(r["seed"] for r in rs)}
        for side in ("with_object_lists", "without_object_lists"):
            for m in REPORT_METRICS:
                row[f"{side}.{m}"] = _median_range([r["eval"][side]["summary"][m] for r in rs])
        for col in ("set_loss", "det_loss"):
            final = [r["losses"][-1][col] for r in rs if r["losses"]]
            if final:
                row[f"final_{col}"] = _median_range(final)
        table[v] = row
    _convergence(runs, table)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric"] + variants)
    keys = [f"{s}.{m}" for s in ("with_object_lists", "without_object_lists") for m in REPORT_METRICS]
    for k in keys:
        w.writerow([k] + ["%.4f [%.4f, %.4f]" % table[v][k] for v in variants])
    atomic_write_text(out / "report.csv", buf.getvalue())
    summary = {"variants": variants, "table": table, "warnings": warns}
    atomic_write_text(out / "report.json", json.dumps(summary, indent=2, sort_keys=True))
    if runs:
        atomic_write_text(out / "learning_curves.svg", learning_curve_svg(runs, variants))
        atomic_write_text(out / "scores.svg", score_bar_svg(table, variants))
    return summary


def epochs_to_reach(losses: Sequence[dict], target: float, column: str = "det_loss") -> int | None:
    """First epoch whose ``column`` is at or below ``target``; ``None`` if never."""
    for row in losses:
        if row[column] <= target:
            return int(row["epoch"])
    return None


def _convergence(runs: list[dict], table: dict, column: str = "det_loss") -> None:
    """Per seed, epochs each variant needs to reach the Baseline's final loss."""
    base = {r["seed"]: r["losses"][-1][column] for r in runs
            if r["variant"] == Variant.BASELINE.value and r["losses"]}
    for v, row in table.items():
        hits = []
        for r in runs:
            if r["variant"] == v and r["seed"] in base and r["losses"]:
                e = epochs_to_reach(r["losses"], base[r["seed"]], column)
                hits.append(math.inf if e is None else e)
        if hits:
            med = float(np.median(hits))
            row["epochs_to_baseline_loss"] = med if math.isfinite(med) else None


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def learning_curve_svg(runs: list[dict], variants: Sequence[str]) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "clfusion", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for v in variants:
            curves = [[row["det_loss"] for row in r["losses"]] for r in runs if r["variant"] == v]
            curves = [c for c in curves if c]
            if not curves:
                continue
            n = min(len(c) for c in curves)
            arr = np.array([c[:n] for c in curves])
            ax.plot(np.arange(1, n + 1), np.median(arr, axis=0), label=v)
            ax.fill_between(np.arange(1, n + 1), arr.min(0), arr.max(0), alpha=0.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("detection-set loss (median over seeds)")
        ax.legend()
        fig.tight_layout()
        text = _svg(fig)
        plt.close(fig)
    return text


def score_bar_svg(table: dict, variants: Sequence[str]) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "clfusion", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        x = np.arange(len(variants))
        for off, side, label in ((-0.2, "with_object_lists", "with lists"),
                                 (0.2, "without_object_lists", "without lists")):
            med = [table[v][f"{side}.desk_score"][0] for v in variants]
            ax.bar(x + off, med, width=0.4, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(variants)
        ax.set_ylabel("desk score (median)")
        ax.legend()
        fig.tight_layout()
        text = _svg(fig)
        plt.close(fig)
    return text
