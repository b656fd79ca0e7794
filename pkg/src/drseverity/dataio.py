"""Dataset loading, reproducible splits and run manifests.

Vessel datasets are read from their public distribution layouts::

    DRIVE/     {training,test}/images/NN_{training,test}.tif
               {training,test}/1st_manual/NN_manual1.gif
    STARE/     images/im0001.ppm
               labels-ah/im0001.ah.ppm   (labels-vk/ for the second annotator)
    CHASE_DB1/ Image_01L.jpg
               Image_01L_1stHO.png       (_2ndHO for the second annotator)

APTOS images sit under ``<root>/train_images/<id_code>.png`` (or directly in
``<root>``), with labels in a ``id_code,diagnosis`` CSV.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .metrics import MetricsReport

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".gif", ".ppm", ".bmp")
MANIFEST_SCHEMA_VERSION = 1


class Source(str, enum.Enum):
    DRIVE = "DRIVE"
    STARE = "STARE"
    CHASE_DB1 = "CHASE_DB1"
    APTOS = "APTOS"
    EXTERNAL = "EXTERNAL"


CANONICAL_COUNTS = {Source.DRIVE: 40, Source.STARE: 20, Source.CHASE_DB1: 28, Source.APTOS: 3662}


class DataError(Exception):
    """Dataset content or layout problem."""


class ManifestError(Exception):
    """Unreadable manifest or unsupported schema version."""


@dataclass(eq=False)
class FundusImage:
    id: str
    pixels: np.ndarray
    source_dataset: Source = Source.EXTERNAL
    grade: Optional[int] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"{self.id}: expected an HxWx3 raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"{self.id}: pixels must be uint8, got {px.dtype}")
        if self.grade is not None and self.grade not in range(5):
            raise ValueError(f"{self.id}: grade {self.grade} outside 0..4")
        self.pixels = px
        self.source_dataset = Source(self.source_dataset)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "FundusImage":
        return FundusImage(self.id, pixels, self.source_dataset, self.grade)


@dataclass(eq=False)
class VesselMask:
    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"{self.id}: mask must be HxW, got shape {px.shape}")
        if not np.isin(px, (0, 1)).all():
            raise ValueError(f"{self.id}: mask values must be 0 or 1")
        self.pixels = px.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def read_rgb(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: Union[str, Path]) -> np.ndarray:
    """Annotation raster binarized as ``pixel > 0``, whatever its bit depth."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr > 0).astype(np.uint8)


def write_rgb(path: Union[str, Path], pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


def write_mask(path: Union[str, Path], mask: np.ndarray) -> None:
    """1-bit PNG."""
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_with_stem(directory: Path, stem: str) -> Optional[Path]:
    for p in _images_in(directory):
        if p.stem == stem:
            return p
    return None


def _drive_pairs(root: Path, annotator: int) -> list[tuple[str, Path, Optional[Path]]]:
    out = []
    for part in ("training", "test"):
        img_dir = root / part / "images"
        for img in _images_in(img_dir):
            num = img.stem.split("_")[0]
            mask = _find_with_stem(root / part / f"{'1st' if annotator == 1 else '2nd'}_manual",
                                   f"{num}_manual{annotator}")
            out.append((img.stem, img, mask))
    return out


def _stare_pairs(root: Path, annotator: int) -> list[tuple[str, Path, Optional[Path]]]:
    tag = {1: "ah", 2: "vk"}[annotator]
    img_dir = root / "images" if (root / "images").is_dir() else root
    out = []
    for img in _images_in(img_dir):
        if "." in img.stem:  # label files share the stem prefix
            continue
        out.append((img.stem, img, _find_with_stem(root / f"labels-{tag}", f"{img.stem}.{tag}")))
    return out


def _chase_pairs(root: Path, annotator: int) -> list[tuple[str, Path, Optional[Path]]]:
    tag = {1: "1stHO", 2: "2ndHO"}[annotator]
    out = []
    for img in _images_in(root):
        if re.search(r"_(1st|2nd)HO$", img.stem):
            continue
        out.append((img.stem, img, _find_with_stem(root, f"{img.stem}_{tag}")))
    return out


_LAYOUTS = {Source.DRIVE: _drive_pairs, Source.STARE: _stare_pairs, Source.CHASE_DB1: _chase_pairs}


def load_vessel_dataset(root, dataset, annotator: int = 1,
                        strict: bool = False) -> list[tuple[FundusImage, VesselMask]]:
    """Load (image, mask) pairs for DRIVE, STARE or CHASE_DB1.

    ``annotator`` selects the manual labelling (1 = first observer). With
    ``strict`` the pair count must equal the public dataset size; otherwise a
    differing count is only logged.
    """
    dataset = Source(dataset)
    if dataset not in _LAYOUTS:
        raise ValueError(f"{dataset.value} is not a vessel dataset")
    root = Path(root)
    entries = _LAYOUTS[dataset](root, annotator)
    if not entries:
        raise DataError(f"no images found under {root} for {dataset.value}")
    pairs = []
    for image_id, img_path, mask_path in entries:
        if mask_path is None:
            raise DataError(f"{dataset.value}: no annotation mask for image '{image_id}' ({img_path})")
        pixels = read_rgb(img_path)
        mask = read_mask(mask_path)
        if mask.shape != pixels.shape[:2]:
            raise DataError(f"{image_id}: mask {mask.shape} does not match image {pixels.shape[:2]}")
        pairs.append((FundusImage(image_id, pixels, dataset), VesselMask(image_id, mask)))
    expected = CANONICAL_COUNTS[dataset]
    if len(pairs) != expected:
        msg = f"{dataset.value}: found {len(pairs)} pairs, public dataset has {expected}"
        if strict:
            raise DataError(msg)
        log.warning(msg)
    return pairs


def read_grade_csv(path, id_column: str = "id_code", grade_column: str = "diagnosis") -> list[tuple[str, int]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {id_column, grade_column} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing CSV columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                grade = int(row[grade_column])
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade '{row[grade_column]}' is not an integer") from None
            if grade not in range(5):
                raise DataError(f"{path}:{lineno}: grade {grade} for '{row[id_column]}' outside 0..4")
            rows.append((row[id_column], grade))
    return rows


def load_aptos(root, labels_csv) -> list[FundusImage]:
    root = Path(root)
    rows = read_grade_csv(labels_csv)
    search = [root / "train_images", root]
    index: dict[str, Path] = {}
    for d in search:
        for p in _images_in(d):
            index.setdefault(p.stem, p)
    images = []
    for id_code, grade in rows:
        path = index.get(id_code)
        if path is None:
            raise DataError(f"APTOS: no image file for id_code '{id_code}' under {root}")
        images.append(FundusImage(id_code, read_rgb(path), Source.APTOS, grade))
    if len(images) != CANONICAL_COUNTS[Source.APTOS]:
        log.info("APTOS: loaded %d of %d public images", len(images), CANONICAL_COUNTS[Source.APTOS])
    return images


def load_image_dir(directory) -> list[FundusImage]:
    paths = _images_in(Path(directory))
    if not paths:
        raise DataError(f"no images found in {directory}")
    return [FundusImage(p.stem, read_rgb(p)) for p in paths]


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitStrategy:
    kind: str
    fold_index: Optional[int] = None
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("RANDOM", "STRATIFIED_BALANCED", "KFOLD"):
            raise ValueError(f"unknown split strategy {self.kind}")
        if self.kind == "KFOLD":
            if self.k is None or self.k < 2:
                raise ValueError("KFOLD needs k >= 2")
            if self.fold_index is None or not 0 <= self.fold_index < self.k:
                raise ValueError(f"fold_index must be in 0..{self.k - 1}")

    @classmethod
    def random(cls):
        return cls("RANDOM")

    @classmethod
    def balanced(cls):
        return cls("STRATIFIED_BALANCED")

    @classmethod
    def kfold(cls, fold_index: int, k: int):
        return cls("KFOLD", fold_index, k)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "fold_index": self.fold_index, "k": self.k}


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int
    strategy: SplitStrategy

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split partitions overlap")

    def to_dict(self) -> dict:
        return {"train_ids": list(self.train_ids), "val_ids": list(self.val_ids),
                "test_ids": list(self.test_ids), "seed": self.seed,
                "strategy": self.strategy.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train_ids"]), list(d["val_ids"]), list(d["test_ids"]),
                   int(d["seed"]), SplitStrategy(**d["strategy"]))


def _ids_and_grades(items: Iterable) -> tuple[list[str], list[Optional[int]]]:
    ids, grades = [], []
    for it in items:
        if isinstance(it, str):
            ids.append(it)
            grades.append(None)
        else:
            ids.append(it.id)
            grades.append(it.grade)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in split input")
    return ids, grades


def kfold_partitions(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` near-equal folds."""
    if k < 2:
        raise ValueError("K must be at least 2")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of items ({n})")
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, k)


def make_split(images: Sequence, strategy: SplitStrategy, seed: int,
               test_size: Union[int, float] = 0.2, val_fraction: float = 0.1) -> DatasetSplit:
    """Partition ids into train/val/test.

    ``images`` may be FundusImages or bare id strings. ``test_size`` is a count
    or a fraction (ignored for KFOLD, where the test part is the selected fold).
    ``val_fraction`` is taken from what remains after the test part. The result
    depends only on the id order, strategy and seed.
    """
    ids, grades = _ids_and_grades(images)
    rng = np.random.default_rng(seed)
    n = len(ids)
    if n == 0:
        raise ValueError("cannot split an empty collection")
    if isinstance(test_size, float):
        test_count = int(round(test_size * n))
    else:
        test_count = int(test_size)

    if strategy.kind == "KFOLD":
        folds = kfold_partitions(n, strategy.k, seed)
        test_idx = folds[strategy.fold_index]
        rest = np.concatenate([f for i, f in enumerate(folds) if i != strategy.fold_index])
    elif strategy.kind == "STRATIFIED_BALANCED":
        if any(g is None for g in grades):
            raise ValueError("STRATIFIED_BALANCED needs graded images")
        if test_count % 5:
            raise ValueError(f"balanced test size {test_count} is not a multiple of 5")
        per_grade = test_count // 5
        garr = np.asarray(grades)
        test_parts = []
        for g in range(5):
            members = np.flatnonzero(garr == g)
            if len(members) < per_grade:
                feasible = 5 * min(int(np.count_nonzero(garr == h)) for h in range(5))
                raise DataError(f"grade {g} has {len(members)} images, balanced test needs {per_grade} "
                                f"per grade; the largest feasible balanced test size is {feasible}")
            test_parts.append(rng.choice(members, size=per_grade, replace=False))
        test_idx = np.sort(np.concatenate(test_parts))
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        rest = rng.permutation(np.flatnonzero(mask))
    else:
        if not 0 <= test_count < n:
            raise ValueError(f"test size {test_count} invalid for {n} items")
        order = rng.permutation(n)
        test_idx, rest = order[:test_count], order[test_count:]

    n_val = int(round(val_fraction * len(rest)))
    val_idx, train_idx = rest[:n_val], rest[n_val:]
    return DatasetSplit(
        train_ids=[ids[i] for i in train_idx],
        val_ids=[ids[i] for i in val_idx],
        test_ids=[ids[i] for i in test_idx],
        seed=seed,
        strategy=strategy,
    )


# -- manifests ---------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    config_snapshot: str
    seed: int
    split: DatasetSplit
    checkpoint_path: str
    metrics: MetricsReport
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    checkpoints: dict = field(default_factory=dict)
    stage_metrics: dict = field(default_factory=dict)
    fusion_table: Optional[list] = None
    warnings: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)  # stage name -> "computed" | "cached"

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "run_id": self.run_id,
            "config_snapshot": self.config_snapshot,
            "seed": self.seed,
            "split": self.split.to_dict(),
            "checkpoint_path": self.checkpoint_path,
            "metrics": self.metrics.to_dict(),
            "created_at": self.created_at,
            "checkpoints": dict(self.checkpoints),
            "stage_metrics": {k: v.to_dict() for k, v in self.stage_metrics.items()},
            "fusion_table": self.fusion_table,
            "warnings": list(self.warnings),
            "stages": dict(self.stages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        version = d.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(f"manifest schema version {version!r} is not supported "
                                f"(expected {MANIFEST_SCHEMA_VERSION})")
        return cls(
            run_id=d["run_id"],
            config_snapshot=d["config_snapshot"],
            seed=int(d["seed"]),
            split=DatasetSplit.from_dict(d["split"]),
            checkpoint_path=d["checkpoint_path"],
            metrics=MetricsReport.from_dict(d["metrics"]),
            created_at=d["created_at"],
            checkpoints=dict(d.get("checkpoints", {})),
            stage_metrics={k: MetricsReport.from_dict(v) for k, v in d.get("stage_metrics", {}).items()},
            fusion_table=d.get("fusion_table"),
            warnings=list(d.get("warnings", [])),
            stages=dict(d.get("stages", {})),
        )


def save_manifest(manifest: RunManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    tmp.replace(path)


def load_manifest(path) -> RunManifest:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at offset {exc.pos} "
                            f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    try:
        return RunManifest.from_dict(data)
    except KeyError as exc:
        raise ManifestError(f"{path}: missing field {exc}") from exc
