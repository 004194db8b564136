"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError
from .decoder import NumericFault
from .features import render_feature_grids, write_grid
from .harness import (
    REFERENCE_SWEEP,
    VARIANT_ORDER,
    ExperimentConfig,
    Variant,
    derive_seed,
    desk_benchmark,
    evaluate_run,
    noise_sweep,
    report,
    run_experiment,
)
from .io import atomic_write_text
from .matching import DataError
from .polg import PolgConfigError, generate_object_list, write_polg_file
from .scene import read_scenes, sample_random_scene, write_scenes

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _setting(text: str) -> tuple[float, ...]:
    parts = tuple(float(x) for x in text.split(","))
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected std,drop,fp,label")
    return parts


def load_config(args) -> ExperimentConfig:
    base = desk_benchmark() if getattr(args, "desk", False) else ExperimentConfig()
    cfg = ExperimentConfig.load(args.config, base) if args.config else base
    kw = {}
    if getattr(args, "variant", None):
        kw["variant"] = Variant(args.variant)
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "out", None):
        kw["output_dir"] = str(args.out)
    return replace(cfg, **kw) if kw else cfg


def cmd_gen_scenes(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n if args.n is not None else cfg.n_train
    scenes = [sample_random_scene(cfg.scene, derive_seed(cfg.seed, args.split, i), frame_id=i)
              for i in range(n)]
    write_scenes(out / "scenes.jsonl", scenes)
    if not args.no_grids:
        (out / "grids").mkdir(exist_ok=True)
        for i, s in enumerate(scenes):
            g = render_feature_grids(s, cfg.rig, cfg.render,
                                     seed=derive_seed(cfg.seed, args.split, i, "render"))
            write_grid(out / "grids" / f"{i:05d}.bin", g)
    print(f"wrote {n} scenes to {out}")
    return EXIT_OK


def cmd_polg(args) -> int:
    cfg = load_config(args)
    scenes = read_scenes(args.scenes)
    pc = cfg.polg if args.seed is None else replace(cfg.polg, seed=args.seed)
    results = [generate_object_list(s, pc) for s in scenes]
    write_polg_file(args.out, scenes, results)
    print(f"wrote {len(results)} object lists to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = run_experiment(cfg)
    summary = json.loads((out / "eval.json").read_text())
    for side in ("with_object_lists", "without_object_lists"):
        s = summary[side]["summary"]
        print(f"{side}: desk_score {s['desk_score']:.4f} mAP {s['mAP']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ev = evaluate_run(args.run, with_object_lists=not args.no_object_lists)
    text = json.dumps(ev.to_dict(), indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text)
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings = args.setting or REFERENCE_SWEEP
    rows = noise_sweep(args.run, settings, args.out)
    for r in rows:
        print("(" + ", ".join(f"{x:g}" for x in r["setting"]) + f")  mAP {r['mAP']:.4f}  "
              f"desk_score {r['desk_score']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = report(args.runs, args.out)
    for w in summary["warnings"]:
        print("warning:", w, file=sys.stderr)
    if not summary["variants"]:
        raise DataError("no complete run directories")
    print(Path(args.out, "report.csv").read_text(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    """Full matrix: every variant and seed, a noise sweep per SMCA_QDN run, then a report."""
    cfg = load_config(args)
    root = Path(args.out)
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    dirs = []
    for seed in seeds:
        for v in VARIANT_ORDER:
            d = run_experiment(replace(cfg, variant=v, seed=seed,
                                       output_dir=str(root / f"{v.value}_seed{seed}")))
            dirs.append(d)
            if v is Variant.SMCA_QDN:
                noise_sweep(d, REFERENCE_SWEEP, d / "sweep.csv")
    report(dirs, root / "report")
    print((root / "report" / "report.csv").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clfusion", description="Object-list / camera cross-level fusion testbed.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, variant=False, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--desk", action="store_true",
                        help="start from the desk benchmark preset instead of the defaults")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", required=out_required)
        if variant:
            sp.add_argument("--variant", choices=[v.value for v in Variant])

    sp = sub.add_parser("gen-scenes", help="sample scenes and render feature grids")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--split", default="train")
    sp.add_argument("--no-grids", action="store_true")
    sp.set_defaults(func=cmd_gen_scenes)

    sp = sub.add_parser("polg", help="pseudo object lists for a scene file")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.set_defaults(func=cmd_polg)

    sp = sub.add_parser("train", help="train and evaluate one variant")
    common(sp, variant=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="re-evaluate a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--no-object-lists", action="store_true",
                    help="withhold object lists at inference (modality loss)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="evaluate a run under several inference POLG settings")
    sp.add_argument("--run", required=True)
    sp.add_argument("--setting", type=_setting, action="append",
                    help="std,drop,fp,label maxima; repeatable (default: the three reference settings)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("bench", help="every variant over the configured seeds, sweeps and report")
    common(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PolgConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
