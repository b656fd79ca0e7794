"""Command-line entry point: ``drseverity <command> ...``.

Exit codes: 0 ok, 1 check failed, 2 configuration error, 3 data error,
4 training/pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .cleaner import CleanConfig, clean_image
from .config import ConfigError, PipelineConfig
from .dataio import (DataError, FundusImage, ManifestError, VesselMask, load_image_dir, read_grade_csv,
                     read_mask, read_rgb, write_mask, write_rgb)
from .metrics import full_report, segmentation_report
from .training import TrainingDivergedError

log = logging.getLogger("drseverity")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3, 4


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
        cfg.apply_seed()
    if getattr(args, "no_cache", False):
        cfg.run.cache = "off"
    return cfg


def cmd_run(args) -> int:
    from .pipeline import run_pipeline
    cfg = _config(args)
    manifest = run_pipeline(cfg)
    print(Path(cfg.run.output_root) / manifest.run_id / "manifest.json")
    _print_json(manifest.metrics.to_dict(decimals=6))
    return EXIT_OK


def cmd_prep(args) -> int:
    from .pipeline import execute
    out = execute(_config(args), "patches")
    print(out["patches"][1])
    return EXIT_OK


def cmd_train_seg(args) -> int:
    from .pipeline import execute, load_patchset
    from .segnet import kfold_evaluate
    cfg = _config(args)
    if args.kfold:
        out = execute(cfg, "patches")
        reports, mean = kfold_evaluate(load_patchset(out["patches"][1]), cfg.segtrain, cfg.segnet,
                                       cfg.segment.threshold)
        result = {"folds": [r.to_dict(decimals=cfg.metrics.decimals) for r in reports],
                  "mean": mean.to_dict(decimals=cfg.metrics.decimals)}
        (out["run_dir"] / "kfold.json").write_text(json.dumps(result, indent=2))
        _print_json(result["mean"])
        return EXIT_OK
    out = execute(cfg, "segnet")
    print(out["segnet"][1] / "segnet.pt")
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    from .pipeline import load_vessel_pairs
    from .preprocess import extract_patches
    from .segnet import load_segnet, predict_patches
    cfg = _config(args)
    cfg.validate_inputs(need_vessels=True, need_aptos=False)
    model = load_segnet(args.checkpoint)
    if args.tiled:
        from .segnet import probability_map
        pairs = load_vessel_pairs(cfg)
        probs = np.concatenate([probability_map(model, im.pixels, cfg.preprocess.patch_size,
                                                cfg.segment.tile_stride).ravel() for im, _ in pairs])
        truth = np.concatenate([m.pixels.ravel() for _, m in pairs])
    else:
        ps = extract_patches(load_vessel_pairs(cfg), cfg.preprocess.per_image, cfg.run.seed,
                             cfg.preprocess.patch_size)
        probs, truth = predict_patches(model, ps.patches), ps.mask_patches
    _print_json(segmentation_report(truth, probs, cfg.segment.threshold).to_dict(decimals=cfg.metrics.decimals))
    return EXIT_OK


def cmd_segment(args) -> int:
    from .segnet import load_segnet, predict_mask
    model = load_segnet(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for im in load_image_dir(args.input):
        mask = predict_mask(model, im, args.threshold, args.tile, args.stride)
        write_mask(out / f"{im.id}.png", mask.pixels)
        log.info("%s: %.2f%% vessel pixels", im.id, 100 * mask.pixels.mean())
    return EXIT_OK


def _find_mask(masks: Path, image_id: str) -> Path:
    for name in (f"{image_id}.png", f"{image_id}_mask.png"):
        if (masks / name).exists():
            return masks / name
    raise DataError(f"no mask for {image_id} in {masks}")


def golden_check(cfg: CleanConfig | None = None) -> bool:
    """Clean the bundled golden input and compare byte-for-byte with the stored result."""
    root = resources.files("drseverity") / "data" / "golden"
    with resources.as_file(root) as d:
        image = FundusImage("golden", read_rgb(d / "input.png"))
        mask = VesselMask("golden", read_mask(d / "mask.png"))
        expected = read_rgb(d / "cleaned.png")
    got = clean_image(image, mask, cfg).pixels
    return bool(np.array_equal(got, expected))


def cmd_clean(args) -> int:
    cfg = CleanConfig(filter_sizes=args.filter_sizes, padding=args.padding)
    if args.golden_check:
        ok = golden_check(cfg)
        print("golden check:", "PASS" if ok else "FAIL")
        return EXIT_OK if ok else EXIT_CHECK
    if not (args.images and args.masks and args.out):
        raise ConfigError("clean needs --images, --masks and --out (or --golden-check)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for im in load_image_dir(args.images):
        mask = VesselMask(im.id, read_mask(_find_mask(Path(args.masks), im.id)))
        write_rgb(out / f"{im.id}.png", clean_image(im, mask, cfg).pixels)
    return EXIT_OK


def cmd_train_clf(args) -> int:
    from .pipeline import execute
    out = execute(_config(args), f"classifier-{args.path}")
    print(out[f"clf_{args.path}"][1] / "classifier.pt")
    return EXIT_OK


def cmd_train_fusion(args) -> int:
    from .pipeline import execute
    out = execute(_config(args), "fusion")
    d = out["fusion"][1]
    print(d / "fusion.pt")
    table = d / "decision_table.json"
    if table.exists():
        for g1, row in enumerate(json.loads(table.read_text())):
            print(f"E1={g1}: " + " ".join(str(v) for v in row))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = dict(read_grade_csv(args.pred, id_column=args.id_column, grade_column=args.grade_column))
    truth = dict(read_grade_csv(args.truth, id_column=args.id_column, grade_column=args.grade_column))
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise DataError(f"{len(missing)} ids have no prediction, e.g. {missing[:3]}")
    ids = sorted(truth)
    rep = full_report([truth[i] for i in ids], [pred[i] for i in ids])
    _print_json(rep.to_dict(decimals=args.decimals))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .pipeline import predict_one
    _print_json(predict_one(args.image, args.manifest, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drseverity", description="Retinopathy severity grading pipeline")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="pipeline TOML file")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--no-cache", action="store_true", help="recompute every stage")
        return sp

    with_config(sub.add_parser("run", help="run every stage and write a manifest")).set_defaults(fn=cmd_run)
    with_config(sub.add_parser("prep", help="extract vessel training patches")).set_defaults(fn=cmd_prep)
    sp = with_config(sub.add_parser("train-seg", help="train the vessel segmenter"))
    sp.add_argument("--kfold", action="store_true", help="K-fold evaluation instead of a single model")
    sp.set_defaults(fn=cmd_train_seg)
    sp = with_config(sub.add_parser("eval-seg", help="pixel metrics of a segmenter on the vessel data"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tiled", action="store_true", help="score whole images instead of patches")
    sp.set_defaults(fn=cmd_eval_seg)

    sp = sub.add_parser("segment", help="write vessel masks for a directory of images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", "--input", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--tile", type=int, default=256)
    sp.add_argument("--stride", type=int, default=128)
    sp.set_defaults(fn=cmd_segment)

    sp = sub.add_parser("clean", help="remove vessels using masks")
    sp.add_argument("--in", "--images", dest="images", help="directory of fundus images")
    sp.add_argument("--masks", help="directory of <id>.png masks")
    sp.add_argument("--out")
    sp.add_argument("--filter-sizes", type=int, nargs="+", default=[4, 16, 32, 64])
    sp.add_argument("--padding", choices=["REFLECT", "ZERO"], default="REFLECT")
    sp.add_argument("--golden-check", action="store_true", help="verify against the bundled golden output")
    sp.set_defaults(fn=cmd_clean)

    sp = with_config(sub.add_parser("train-clf", help="train one grading classifier"))
    sp.add_argument("--path", choices=["original", "cleaned"], required=True)
    sp.set_defaults(fn=cmd_train_clf)
    with_config(sub.add_parser("train-fusion", help="train the fusion network")).set_defaults(fn=cmd_train_fusion)

    sp = sub.add_parser("evaluate", help="grading metrics from prediction and truth CSVs")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--id-column", default="id")
    sp.add_argument("--grade-column", default="grade")
    sp.add_argument("--decimals", type=int, default=6)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("predict", help="grade one image with a trained run")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", default=None, help="where to write the mask and cleaned image")
    sp.set_defaults(fn=cmd_predict)
    return p


def _exit_code(exc: BaseException) -> int:
    from .pipeline import PipelineError
    if isinstance(exc, PipelineError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, ManifestError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_TRAIN


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DataError, ManifestError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:
        from .pipeline import PipelineError
        if not isinstance(exc, PipelineError):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
