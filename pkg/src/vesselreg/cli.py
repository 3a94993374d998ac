"""Command-line surface: synth, train, register, evaluate.

Exit codes: 0 success, 1 usage or IO error, 2 registration failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .detector import DetectorConfig, VesselKeypointNet
from .evaluation import (
    EvalError,
    checkerboard_overlay,
    evaluate_dataset,
    load_eval_manifest,
    write_report,
)
from .geometry import GeometryError, Homography
from .matcher import GraphMatcher, MatcherConfig, dump_matches
from .phantom import threshold_vessel_mask
from .pipeline import (
    NoHomographyError,
    PipelineError,
    TrainConfig,
    config_from_dict,
    load_checkpoint,
    make_pair,
    register,
    train,
)
from .synthdata import (
    SynthError,
    load_image,
    read_pair_manifest,
    save_image,
    write_pair_manifest,
)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_HOMOGRAPHY = 2


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; the CLI contract
    reserves 2 for registration failures, so remap usage errors to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_run_config(path: str | Path | None
                     ) -> tuple[TrainConfig, DetectorConfig, MatcherConfig]:
    """Run configuration file: {"train": {...}, "detector": {...},
    "matcher": {...}}, every section and field optional."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
    train_cfg = config_from_dict(raw.get("train", {}))
    det_cfg = DetectorConfig(**raw.get("detector", {}))
    mcfg_raw = dict(raw.get("matcher", {}))
    if "encoder_hidden" in mcfg_raw:
        mcfg_raw["encoder_hidden"] = tuple(mcfg_raw["encoder_hidden"])
    # the matcher dimension must track the descriptor dimension
    mcfg_raw.setdefault("dim", det_cfg.descriptor_dim)
    mat_cfg = MatcherConfig(**mcfg_raw)
    if mat_cfg.dim != det_cfg.descriptor_dim:
        mat_cfg = MatcherConfig(**{**asdict(mat_cfg), "dim": det_cfg.descriptor_dim})
    return train_cfg, det_cfg, mat_cfg


def _list_sources(input_dir: Path) -> list[Path]:
    files = sorted(p for p in input_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    return files


def cmd_synth(args) -> int:
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        print(f"error: input directory not found: {input_dir}", file=sys.stderr)
        return EXIT_USAGE
    sources = _list_sources(input_dir)
    unreadable = []
    for p in sources:
        try:
            load_image(p)
        except Exception as e:
            unreadable.append(f"{p}: {e}")
    if unreadable:
        for line in unreadable:
            print(f"error: unreadable input: {line}", file=sys.stderr)
        return EXIT_USAGE
    if args.count > 0 and not sources:
        print(f"error: no images ({'/'.join(IMAGE_SUFFIXES)}) in {input_dir}",
              file=sys.stderr)
        return EXIT_USAGE

    entries = [{"source_path": str(sources[i % len(sources)]),
                "seed": args.seed + i, "mode": args.mode}
               for i in range(args.count)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pair_manifest(out, entries)
    print(f"wrote {len(entries)} manifest entries to {out}")

    if args.materialize is not None:
        cfg, _, _ = parse_run_config(args.config)
        mat_dir = Path(args.materialize)
        mat_dir.mkdir(parents=True, exist_ok=True)
        cache: dict[str, np.ndarray] = {}
        eval_pairs = []
        for i, entry in enumerate(entries):
            cache.setdefault(entry["source_path"],
                             load_image(entry["source_path"]))
            pair = make_pair(entry, cfg, cache)
            names = {"img_a": f"p{i:04d}_a.png", "img_b": f"p{i:04d}_b.png",
                     "gt_homography": f"p{i:04d}_h.json"}
            save_image(mat_dir / names["img_a"], pair.patch_a)
            save_image(mat_dir / names["img_b"], pair.patch_b)
            pair.h_gt.save(mat_dir / names["gt_homography"])
            if args.masks:
                names["mask_a"] = f"p{i:04d}_ma.png"
                names["mask_b"] = f"p{i:04d}_mb.png"
                save_image(mat_dir / names["mask_a"],
                           threshold_vessel_mask(pair.patch_a).astype(float))
                save_image(mat_dir / names["mask_b"],
                           threshold_vessel_mask(pair.patch_b).astype(float))
            eval_pairs.append(names)
        eval_manifest = {"kind": "synthetic", "pairs": eval_pairs}
        (mat_dir / "eval_manifest.json").write_text(
            json.dumps(eval_manifest, indent=2, sort_keys=True) + "\n")
        print(f"materialized {len(eval_pairs)} pairs in {mat_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        print(f"error: manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_USAGE
    entries = read_pair_manifest(manifest_path)
    cfg, det_cfg, mat_cfg = parse_run_config(args.config)
    detector = VesselKeypointNet(det_cfg)
    matcher = GraphMatcher(mat_cfg)
    history = train(detector, matcher, entries, cfg, args.out_dir,
                    source_root=args.source_root, max_epochs=args.max_epochs)
    print(json.dumps({"checkpoint": history["checkpoint"],
                      "epochs_run": len(history["train_loss"]),
                      "final_train_loss": history["train_loss"][-1]
                      if history["train_loss"] else None,
                      "best_val_loss": min(history["val_loss"])
                      if history["val_loss"] else None}, sort_keys=True))
    return EXIT_OK


def cmd_register(args) -> int:
    for name in ("fixed", "moving", "model"):
        p = Path(getattr(args, name))
        if not p.exists():
            print(f"error: {name} file not found: {p}", file=sys.stderr)
            return EXIT_USAGE
    detector, matcher, _ = load_checkpoint(args.model)
    fixed = load_image(args.fixed)
    moving = load_image(args.moving)
    try:
        out = register(detector, matcher, moving, fixed, n_max=args.n_max,
                       score_threshold=args.threshold)
    except NoHomographyError as e:
        print(json.dumps({"status": "no_homography",
                          "diagnostics": e.diagnostics}, sort_keys=True))
        return EXIT_NO_HOMOGRAPHY

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out.h.save(out_path)
    print(json.dumps({"status": "ok", "homography": str(out_path),
                      "diagnostics": out.diagnostics}, sort_keys=True))
    if args.overlay is not None:
        overlay = checkerboard_overlay(fixed, moving, out.h)
        save_image(args.overlay, overlay)
    if args.matches is not None:
        dump_matches(args.matches, out.matches, out.keypoints_a, out.keypoints_b)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        print(f"error: manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_USAGE
    manifest = load_eval_manifest(manifest_path)
    detector = matcher = None
    if not args.use_gt:
        if args.model is None:
            print("error: --model is required unless --use-gt is set",
                  file=sys.stderr)
            return EXIT_USAGE
        if not Path(args.model).exists():
            print(f"error: model file not found: {args.model}", file=sys.stderr)
            return EXIT_USAGE
        detector, matcher, _ = load_checkpoint(args.model)
    eps_list = tuple(float(v) for v in args.eps.split(","))
    report = evaluate_dataset(
        manifest, detector, matcher, eps_list=eps_list,
        me_threshold=args.me_threshold, mae_threshold=args.mae_threshold,
        use_gt_as_prediction=args.use_gt,
        register_params={"n_max": args.n_max, "score_threshold": args.threshold})
    paths = write_report(report, args.out_dir, figures=not args.no_figures,
                         reference_footnote=args.reference_footnote)
    sys.stdout.write(report.to_text_table(args.reference_footnote))
    print(f"report written to {paths['json']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vesselreg",
                     description="Self-supervised vessel-structure keypoint "
                                 "registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="build training pair manifests "
                       "and optionally materialize evaluation pairs")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out", required=True, help="output pair manifest (JSONL)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="invert",
                   choices=["none", "invert", "gamma_remap", "vesselness_contrast"])
    p.add_argument("--materialize", default=None,
                   help="directory to render patches + eval manifest into")
    p.add_argument("--masks", action="store_true",
                   help="write threshold vessel masks for Dice smoke tests")
    p.add_argument("--config", default=None, help="run-config JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the detector and matcher end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="run-config JSON")
    p.add_argument("--source-root", default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register a moving image onto a fixed "
                       "image; the output homography maps moving to fixed "
                       "pixel coordinates")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output homography JSON")
    p.add_argument("--overlay", default=None,
                   help="write a checkerboard overlay PNG (fixed image "
                        "dimensions)")
    p.add_argument("--matches", default=None, help="write a JSONL match dump")
    p.add_argument("--n-max", type=int, default=1024)
    p.add_argument("--threshold", type=float, default=0.2)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="batch evaluation with JSON/CSV/text "
                       "reports and figures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eps", default="1,2,3,4,5,10",
                   help="comma-separated MHE thresholds (synthetic kind)")
    p.add_argument("--me-threshold", type=float, default=7.0)
    p.add_argument("--mae-threshold", type=float, default=10.0)
    p.add_argument("--use-gt", action="store_true",
                   help="bypass the model and score the ground-truth "
                        "homographies (synthetic manifests)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--reference-footnote", action="store_true",
                   help="append published full-scale context values")
    p.add_argument("--n-max", type=int, default=1024)
    p.add_argument("--threshold", type=float, default=0.2)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (EvalError, SynthError, GeometryError, PipelineError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
