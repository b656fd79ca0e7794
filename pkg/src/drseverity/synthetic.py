"""Synthetic fundus-like rasters with known vessel masks and graded lesions.

Used for fixtures and smoke runs; not a model of real retinal appearance.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .dataio import FundusImage, Source, VesselMask, write_mask, write_rgb


def _disk(h: int, w: int) -> tuple[np.ndarray, np.ndarray, float]:
    yy, xx = np.mgrid[:h, :w]
    cy, cx, r = (h - 1) / 2, (w - 1) / 2, 0.46 * min(h, w)
    d = np.hypot(yy - cy, xx - cx)
    return d <= r, d / r, r


def synthetic_fundus(rng: np.random.Generator, size: tuple[int, int] = (288, 288),
                     n_vessels: int = 7, grade: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (HxWx3 uint8 image, HxW {0,1} vessel mask)."""
    h, w = size
    inside, rad, r = _disk(h, w)
    base = np.array([190.0, 85.0, 40.0]) * rng.uniform(0.85, 1.1)
    shade = (1.0 - 0.35 * rad ** 2)[..., None]
    img = base * shade + rng.normal(0, 4, size=(h, w, 3))

    mask = np.zeros((h, w), np.uint8)
    disc = np.array([w / 2 + rng.uniform(-0.15, 0.15) * w, h / 2 + rng.uniform(-0.1, 0.1) * h])
    for _ in range(n_vessels):
        ang = rng.uniform(0, 2 * np.pi)
        pts = [disc.copy()]
        step = 0.04 * min(h, w)
        for _ in range(40):
            ang += rng.normal(0, 0.25)
            pts.append(pts[-1] + step * np.array([np.cos(ang), np.sin(ang)]))
        poly = np.round(np.array(pts)).astype(np.int32)
        cv2.polylines(mask, [poly], False, 1, thickness=int(rng.integers(2, 5)))
    mask &= inside.astype(np.uint8)
    vessel_col = np.array([105.0, 25.0, 20.0])
    img[mask == 1] = vessel_col + rng.normal(0, 5, size=(int(mask.sum()), 3))

    # lesions: bright exudates and dark haemorrhages, more with higher grade
    for _ in range(4 * grade):
        c = (int(rng.uniform(0.25, 0.75) * w), int(rng.uniform(0.25, 0.75) * h))
        rad_px = int(rng.integers(2, 5))
        if rng.random() < 0.5:
            cv2.circle(img, c, rad_px, (235.0, 220.0, 90.0), -1)
        else:
            cv2.circle(img, c, rad_px, (80.0, 10.0, 10.0), -1)

    img[~inside] = 0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def vessel_pairs(n: int, seed: int = 0, size=(288, 288)) -> list[tuple[FundusImage, VesselMask]]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        img, mask = synthetic_fundus(rng, size)
        iid = f"{k + 1:02d}_synthetic"
        out.append((FundusImage(iid, img, Source.EXTERNAL), VesselMask(iid, mask)))
    return out


def graded_images(per_grade: int, seed: int = 0, size=(160, 160)) -> list[FundusImage]:
    rng = np.random.default_rng(seed)
    out = []
    for g in range(5):
        for k in range(per_grade):
            img, _ = synthetic_fundus(rng, size, grade=g)
            out.append(FundusImage(f"g{g}_{k:03d}", img, Source.APTOS, g))
    return out


def write_drive_fixture(root, n: int = 12, seed: int = 0, size=(288, 288)) -> Path:
    """DRIVE-style layout: first half under training/, second half under test/."""
    root = Path(root)
    for k, (img, mask) in enumerate(vessel_pairs(n, seed, size)):
        part = "training" if k < (n + 1) // 2 else "test"
        num = f"{k + 1:02d}"
        (root / part / "images").mkdir(parents=True, exist_ok=True)
        (root / part / "1st_manual").mkdir(parents=True, exist_ok=True)
        write_rgb(root / part / "images" / f"{num}_{part}.png", img.pixels)
        write_mask(root / part / "1st_manual" / f"{num}_manual1.png", mask.pixels)
    return root


def write_aptos_fixture(root, per_grade: int = 5, seed: int = 0, size=(160, 160)) -> tuple[Path, Path]:
    """Returns (image root, labels CSV path)."""
    root = Path(root)
    (root / "train_images").mkdir(parents=True, exist_ok=True)
    rows = ["id_code,diagnosis"]
    for im in graded_images(per_grade, seed, size):
        write_rgb(root / "train_images" / f"{im.id}.png", im.pixels)
        rows.append(f"{im.id},{im.grade}")
    csv_path = root / "train.csv"
    csv_path.write_text("\n".join(rows) + "\n")
    return root, csv_path
