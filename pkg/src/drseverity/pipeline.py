"""End-to-end orchestration with a content-addressed stage cache.

Stages: patches -> segmenter -> masks/cleaned images -> classifier inputs ->
classifiers (original, cleaned) -> fusion -> evaluation. Each stage's cache
key hashes the stage name, the keys or content hashes of its inputs, and its
own config sections, so a stage only sees data it declares.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import traceback
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import classifier as clf
from . import fusion as fus
from .cleaner import clean_image
from .config import PipelineConfig
from .dataio import (DatasetSplit, FundusImage, RunManifest, SplitStrategy, Source, VesselMask,
                     load_aptos, load_vessel_dataset, make_split, read_rgb, save_manifest,
                     write_mask, write_rgb)
from .metrics import MetricsReport, full_report, segmentation_report
from .preprocess import PatchSet, extract_patches, preprocess_for_classifier
from .segnet import build_segnet, load_segnet, predict_mask, predict_patches, split_validation, train_segnet
from .training import Checkpoint

log = logging.getLogger(__name__)

CACHE_ENV = "DRSEVERITY_CACHE"

PREDICTION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["grade_e1", "grade_e2", "final_grade", "probabilities", "scores_e1", "scores_e2",
                 "cleaned_image_path", "mask_path", "tie_break"],
    "properties": {
        "grade_e1": {"type": "integer", "minimum": 0, "maximum": 4},
        "grade_e2": {"type": "integer", "minimum": 0, "maximum": 4},
        "final_grade": {"type": "integer", "minimum": 0, "maximum": 4},
        "probabilities": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                          "minItems": 5, "maxItems": 5},
        "scores_e1": {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5},
        "scores_e2": {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5},
        "cleaned_image_path": {"type": "string"},
        "mask_path": {"type": "string"},
        "tie_break": {"type": "string"},
    },
    "additionalProperties": False,
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def images_digest(images) -> str:
    h = hashlib.sha256()
    for im in images:
        h.update(im.id.encode())
        h.update(str(im.pixels.shape).encode())
        h.update(np.ascontiguousarray(im.pixels).tobytes())
        g = getattr(im, "grade", None)
        h.update(str(g).encode())
    return h.hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageCache:
    """Directory-per-key cache. ``enabled=False`` recomputes but still writes outputs."""

    def __init__(self, root, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.status: dict[str, str] = {}

    @staticmethod
    def key(stage: str, *parts) -> str:
        blob = json.dumps([stage, *parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def dir(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def hit(self, stage: str, key: str) -> bool:
        done = self.dir(stage, key) / ".complete"
        return self.enabled and done.exists()

    def run(self, stage: str, key: str, compute: Callable[[Path], None]) -> Path:
        d = self.dir(stage, key)
        if self.hit(stage, key):
            self.status[stage] = "cached"
            return d
        d.mkdir(parents=True, exist_ok=True)
        try:
            compute(d)
        except Exception as exc:
            raise PipelineError(stage, exc) from exc
        (d / ".complete").write_text(key)
        self.status[stage] = "computed"
        return d


def cache_for(cfg: PipelineConfig) -> StageCache:
    root = os.environ.get(CACHE_ENV) or cfg.run.cache_root or str(Path(cfg.run.output_root) / "cache")
    return StageCache(root, enabled=cfg.run.cache != "off")


# -- stage helpers -------------------------------------------------------------

def load_vessel_pairs(cfg: PipelineConfig) -> list[tuple[FundusImage, VesselMask]]:
    d = cfg.data
    pairs = []
    for root, ds, ann in ((d.drive_root, Source.DRIVE, d.drive_annotator),
                          (d.stare_root, Source.STARE, d.stare_annotator),
                          (d.chase_root, Source.CHASE_DB1, d.chase_annotator)):
        if root:
            pairs.extend(load_vessel_dataset(root, ds, annotator=ann))
    return pairs


def _save_images(path: Path, images: list[FundusImage]) -> None:
    np.savez_compressed(path, ids=np.array([im.id for im in images]),
                        grades=np.array([-1 if im.grade is None else im.grade for im in images]),
                        **{f"px_{k}": im.pixels for k, im in enumerate(images)})


def _load_images(path: Path) -> list[FundusImage]:
    with np.load(path) as z:
        ids, grades = z["ids"], z["grades"]
        return [FundusImage(str(i), z[f"px_{k}"], Source.APTOS, None if g < 0 else int(g))
                for k, (i, g) in enumerate(zip(ids, grades))]


def save_patchset(d: Path, ps: PatchSet) -> None:
    np.savez_compressed(d / "patches.npz", patches=ps.patches, masks=ps.mask_patches, seed=ps.seed)
    (d / "index.json").write_text(json.dumps(ps.index(), indent=1))


def load_patchset(d: Path) -> PatchSet:
    with np.load(d / "patches.npz") as z:
        index = json.loads((d / "index.json").read_text())
        return PatchSet(z["patches"], z["masks"], [(e["image_id"], e["top"], e["left"]) for e in index],
                        int(z["seed"]))


def stage_patches(cfg: PipelineConfig, cache: StageCache, pairs) -> tuple[str, Path]:
    key = cache.key("patches", images_digest([p[0] for p in pairs]), images_digest([p[1] for p in pairs]),
                    cfg.section("preprocess"), cfg.run.seed)

    def compute(d):
        ps = extract_patches(pairs, cfg.preprocess.per_image, cfg.run.seed, cfg.preprocess.patch_size)
        save_patchset(d, ps)

    return key, cache.run("patches", key, compute)


def stage_segnet(cfg: PipelineConfig, cache: StageCache, patches_key: Optional[str],
                 patches_dir: Optional[Path]) -> tuple[str, Path]:
    if cfg.segment.checkpoint is not None:
        key = cache.key("segnet", file_digest(cfg.segment.checkpoint))

        def compute_load(d):
            Checkpoint.load(cfg.segment.checkpoint).save(d / "segnet.pt")

        return key, cache.run("segnet", key, compute_load)

    key = cache.key("segnet", patches_key, cfg.section("segnet"), cfg.section("segtrain"), cfg.run.seed)

    def compute(d):
        ps = load_patchset(patches_dir)
        train, val = split_validation(ps, cfg.segtrain.val_fraction, cfg.run.seed)
        model = build_segnet(cfg.segnet, seed=cfg.run.seed)
        ckpt, tlog = train_segnet(model, train, cfg.segtrain, val_patches=val)
        ckpt.save(d / "segnet.pt")
        (d / "log.json").write_text(json.dumps(tlog.to_dict(), indent=1))
        probs = predict_patches(model, val.patches, cfg.segtrain.batch_size)
        rep = segmentation_report(val.mask_patches, probs, cfg.segment.threshold)
        (d / "metrics.json").write_text(json.dumps(rep.to_dict()))

    return key, cache.run("segnet", key, compute)


def stage_clean(cfg: PipelineConfig, cache: StageCache, images, images_key: str,
                seg_key: str, seg_dir: Path) -> tuple[str, Path]:
    key = cache.key("clean", images_key, seg_key, cfg.section("segment"), cfg.section("cleaner"),
                    cfg.preprocess.patch_size)

    def compute(d):
        model = load_segnet(seg_dir / "segnet.pt")
        cleaned, masks = [], []
        for im in images:
            mask = predict_mask(model, im, cfg.segment.threshold, cfg.preprocess.patch_size,
                                cfg.segment.tile_stride)
            masks.append(mask.pixels)
            cleaned.append(clean_image(im, mask, cfg.cleaner))
        _save_images(d / "cleaned.npz", cleaned)
        np.savez_compressed(d / "masks.npz", **{f"m_{k}": m for k, m in enumerate(masks)})

    return key, cache.run("clean", key, compute)


def _prep_kwargs(cfg: PipelineConfig) -> dict:
    p = cfg.preprocess
    return {"crop_threshold": p.crop_threshold, "sigma_fraction": p.sigma_fraction,
            "noise_std": p.noise_std, "seed": cfg.run.seed}


def stage_prepare(cfg: PipelineConfig, cache: StageCache, name: str, images, source_key: str) -> tuple[str, Path]:
    size = cfg.classifier.input_size
    key = cache.key(f"prep_{name}", source_key, cfg.section("preprocess"), size)

    def compute(d):
        out = [preprocess_for_classifier(im, (size, size), **_prep_kwargs(cfg)) for im in images]
        _save_images(d / "images.npz", out)

    return key, cache.run(f"prep_{name}", key, compute)


def stage_classifier(cfg: PipelineConfig, cache: StageCache, name: str, prep_key: str, prep_dir: Path,
                     split: DatasetSplit) -> tuple[str, Path]:
    key = cache.key(f"clf_{name}", prep_key, split.to_dict(), cfg.section("classifier"),
                    cfg.section("clftrain"), cfg.section("augment"), cfg.run.seed)

    def compute(d):
        by_id = {im.id: im for im in _load_images(prep_dir / "images.npz")}
        train = [by_id[i] for i in split.train_ids]
        val = [by_id[i] for i in split.val_ids]
        model = clf.build_classifier(cfg.classifier, seed=cfg.run.seed)
        ckpt, tlog = clf.train_classifier(model, train, cfg.clftrain, use_cleaned=(name == "cleaned"),
                                          val_images=val)
        ckpt.save(d / "classifier.pt")
        (d / "log.json").write_text(json.dumps(tlog.to_dict(), indent=1))
        ids = list(by_id)
        scores = clf.predict_scores(model, [by_id[i] for i in ids], rescale=cfg.augment.rescale)
        np.savez(d / "scores.npz", ids=np.array(ids), scores=scores)

    return key, cache.run(f"clf_{name}", key, compute)


def _scores(d: Path) -> dict[str, clf.OrdinalPrediction]:
    with np.load(d / "scores.npz") as z:
        return {str(i): clf.OrdinalPrediction.from_scores(s) for i, s in zip(z["ids"], z["scores"])}


def stage_fusion(cfg: PipelineConfig, cache: StageCache, e1_key: str, e1_dir: Path, e2_key: str,
                 e2_dir: Path, split: DatasetSplit, grades: dict[str, int]) -> tuple[str, Path]:
    key = cache.key("fusion", e1_key, e2_key, split.to_dict(), cfg.section("fusion"),
                    cfg.section("fusiontrain"), cfg.run.seed)

    def compute(d):
        p1, p2 = _scores(e1_dir), _scores(e2_dir)
        pairs = [((p1[i], p2[i]), grades[i]) for i in split.val_ids]
        model = fus.build_fusion(cfg.fusion, seed=cfg.run.seed)
        ckpt, tlog = fus.train_fusion(model, pairs, cfg.fusiontrain)
        ckpt.save(d / "fusion.pt")
        (d / "log.json").write_text(json.dumps(tlog.to_dict(), indent=1))
        if cfg.fusion.input_mode == "grades":
            table = fus.decision_table(model)
            fus.write_decision_table(table, d / "decision_table.csv")
            (d / "decision_table.json").write_text(json.dumps(table))

    return key, cache.run("fusion", key, compute)


def _grade_report(truth, preds: list[clf.OrdinalPrediction]) -> MetricsReport:
    return full_report(truth, [p.grade for p in preds], scores=[p.scores[2] for p in preds])


def make_aptos_split(cfg: PipelineConfig, images) -> DatasetSplit:
    kind = cfg.split.strategy
    strategy = SplitStrategy(kind) if kind != "KFOLD" else SplitStrategy.kfold(0, 5)
    return make_split(images, strategy, cfg.run.seed, test_size=cfg.split.test_size,
                      val_fraction=cfg.split.val_fraction)


STAGE_ORDER = ("patches", "segnet", "clean", "prepare", "classifier-original", "classifier-cleaned",
               "fusion", "evaluate")


def run_id_for(cfg: PipelineConfig) -> str:
    """Hash of everything that affects results; output and cache locations are excluded."""
    from .config import SECTIONS
    h = cfg.digest(*[n for n in SECTIONS if n not in ("run", "data")])
    data = json.dumps([cfg.section("data"), cfg.run.seed], sort_keys=True)
    return hashlib.sha256((h + data).encode()).hexdigest()[:16]


def run_dir_for(cfg: PipelineConfig) -> Path:
    return Path(cfg.run.output_root) / run_id_for(cfg)


def execute(cfg: PipelineConfig, until: str = "evaluate", cache: Optional[StageCache] = None) -> dict:
    """Run stages in order up to and including ``until``; returns stage outputs by name.

    Failures are written to ``<run dir>/failure.json`` and raised as PipelineError.
    """
    if until not in STAGE_ORDER:
        raise ValueError(f"unknown stage {until!r}; expected one of {STAGE_ORDER}")
    last = STAGE_ORDER.index(until)
    need_aptos = last >= STAGE_ORDER.index("clean")
    cfg.validate_inputs(need_vessels=True, need_aptos=need_aptos)
    cache = cache or cache_for(cfg)
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    out: dict = {"cache": cache, "run_dir": run_dir}
    stage = "load"

    def reached(name):
        return STAGE_ORDER.index(name) <= last

    try:
        if cfg.segment.checkpoint is None:
            stage = "load-vessels"
            pairs = load_vessel_pairs(cfg)
            stage = "patches"
            out["patches"] = stage_patches(cfg, cache, pairs)
        else:
            out["patches"] = (None, None)
        if not reached("segnet"):
            return out
        stage = "segnet"
        out["segnet"] = stage_segnet(cfg, cache, *out["patches"])
        if not reached("clean"):
            return out

        stage = "load-aptos"
        aptos = load_aptos(cfg.data.aptos_root, cfg.data.aptos_labels)
        aptos_key = images_digest(aptos)
        out["grades"] = {im.id: im.grade for im in aptos}
        out["split"] = split = make_aptos_split(cfg, aptos)

        stage = "clean"
        out["clean"] = clean_key, clean_dir = stage_clean(cfg, cache, aptos, aptos_key, *out["segnet"])
        if not reached("prepare"):
            return out
        stage = "prepare"
        cleaned = _load_images(clean_dir / "cleaned.npz")
        out["prep_original"] = stage_prepare(cfg, cache, "original", aptos, aptos_key)
        out["prep_cleaned"] = stage_prepare(cfg, cache, "cleaned", cleaned, clean_key)
        for name in ("original", "cleaned"):
            stage = f"classifier-{name}"
            if not reached(stage):
                return out
            out[f"clf_{name}"] = stage_classifier(cfg, cache, name, *out[f"prep_{name}"], split)
        if not reached("fusion"):
            return out
        stage = "fusion"
        out["fusion"] = stage_fusion(cfg, cache, *out["clf_original"], *out["clf_cleaned"], split,
                                     out["grades"])
        if not reached("evaluate"):
            return out
        stage = "evaluate"
        out["manifest"] = _evaluate(cfg, out)
    except PipelineError as exc:
        _write_failure(run_dir, exc.stage, exc.cause, cache)
        raise
    except Exception as exc:
        _write_failure(run_dir, stage, exc, cache)
        raise PipelineError(stage, exc) from exc
    return out


def _evaluate(cfg: PipelineConfig, out: dict) -> RunManifest:
    split, grades = out["split"], out["grades"]
    seg_dir, e1_dir, e2_dir, fu_dir = (out[k][1] for k in ("segnet", "clf_original", "clf_cleaned", "fusion"))
    p1, p2 = _scores(e1_dir), _scores(e2_dir)
    fmodel = fus.load_fusion(fu_dir / "fusion.pt")
    truth = [grades[i] for i in split.test_ids]
    fused = [fus.fuse_predict(fmodel, p1[i], p2[i]) for i in split.test_ids]
    final = full_report(truth, [f.grade for f in fused], scores=[sum(f.probabilities[2:]) for f in fused])
    stage_metrics = {
        "e1": _grade_report(truth, [p1[i] for i in split.test_ids]),
        "e2": _grade_report(truth, [p2[i] for i in split.test_ids]),
    }
    if (seg_dir / "metrics.json").exists():
        stage_metrics["segnet"] = MetricsReport.from_dict(json.loads((seg_dir / "metrics.json").read_text()))
    fckpt = Checkpoint.load(fu_dir / "fusion.pt")
    table_path = fu_dir / "decision_table.json"
    table = json.loads(table_path.read_text()) if table_path.exists() else None
    cache: StageCache = out["cache"]
    manifest = RunManifest(
        run_id=out["run_dir"].name,
        config_snapshot=cfg.to_toml(),
        seed=cfg.run.seed,
        split=split,
        checkpoint_path=str(fu_dir / "fusion.pt"),
        metrics=final,
        checkpoints={"segnet": str(seg_dir / "segnet.pt"), "e1": str(e1_dir / "classifier.pt"),
                     "e2": str(e2_dir / "classifier.pt"), "fusion": str(fu_dir / "fusion.pt")},
        stage_metrics=stage_metrics,
        fusion_table=table,
        warnings=list(fckpt.meta.get("warnings", [])),
        stages=dict(cache.status),
    )
    save_manifest(manifest, out["run_dir"] / "manifest.json")
    if table is not None:
        fus.write_decision_table(table, out["run_dir"] / "decision_table.csv")
    return manifest


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    """Run every stage (reusing cached results) and write ``<run dir>/manifest.json``."""
    return execute(cfg, "evaluate")["manifest"]


def _write_failure(run_dir: Path, stage: str, exc: BaseException, cache: StageCache) -> None:
    (run_dir / "failure.json").write_text(json.dumps({
        "stage": stage, "error": f"{type(exc).__name__}: {exc}", "stages": cache.status,
        "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__),
    }, indent=1))


# -- inference -----------------------------------------------------------------

def predict_one(image_path, manifest_path, out_dir=None) -> dict:
    """Full dual-path prediction for one image, using a run manifest's checkpoints."""
    from .dataio import load_manifest

    manifest = load_manifest(manifest_path)
    cfg = PipelineConfig.from_toml(manifest.config_snapshot)
    pixels = read_rgb(image_path)
    image = FundusImage(Path(image_path).stem, pixels)
    out_dir = Path(out_dir) if out_dir else Path(manifest_path).parent / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)

    seg = load_segnet(manifest.checkpoints["segnet"])
    e1 = clf.load_classifier(manifest.checkpoints["e1"])
    e2 = clf.load_classifier(manifest.checkpoints["e2"])
    fmodel = fus.load_fusion(manifest.checkpoints["fusion"])

    def mask_fn(im):
        return predict_mask(seg, im, cfg.segment.threshold, cfg.preprocess.patch_size,
                            cfg.segment.tile_stride)

    cleaned, mask = clf.cleaned_input(image, mask_fn, cfg.cleaner)
    kw = _prep_kwargs(cfg)
    size = cfg.classifier.input_size
    p1 = clf.OrdinalPrediction.from_scores(
        clf.predict_scores(e1, [preprocess_for_classifier(image, (size, size), **kw)], rescale=cfg.augment.rescale)[0])
    p2 = clf.OrdinalPrediction.from_scores(
        clf.predict_scores(e2, [preprocess_for_classifier(cleaned, (size, size), **kw)], rescale=cfg.augment.rescale)[0])
    fused = fus.fuse_predict(fmodel, p1, p2)

    mask_path = out_dir / f"{image.id}_mask.png"
    cleaned_path = out_dir / f"{image.id}_cleaned.png"
    write_mask(mask_path, mask.pixels)
    write_rgb(cleaned_path, cleaned.pixels)
    return {
        "grade_e1": p1.grade,
        "grade_e2": p2.grade,
        "final_grade": fused.grade,
        "probabilities": fused.probabilities,
        "scores_e1": p1.scores,
        "scores_e2": p2.scores,
        "cleaned_image_path": str(cleaned_path),
        "mask_path": str(mask_path),
        "tie_break": fused.tie_break,
    }
