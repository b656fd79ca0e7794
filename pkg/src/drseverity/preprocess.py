"""Deterministic image transforms: crop, Graham enhancement, resize, patches, augmentation."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .dataio import FundusImage, VesselMask

PATCH_SIZE = 256
CLASSIFIER_SIZE = (224, 224)


def item_seed(seed: int, item_id: str) -> np.random.SeedSequence:
    """Per-item seed derived from (global seed, item id), independent of batch order."""
    return np.random.SeedSequence([seed, zlib.crc32(item_id.encode())])


def auto_crop(image: FundusImage, intensity_threshold: float = 7) -> FundusImage:
    """Trim to the bounding box of rows/columns whose max channel value exceeds the threshold."""
    px = image.pixels
    fg = px.max(axis=2) > intensity_threshold
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    if rows.size == 0:
        raise ValueError(f"{image.id}: no foreground content above intensity {intensity_threshold}")
    return image.with_pixels(px[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].copy())


def local_average(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-weighted local mean, symmetric borders, kernel truncated at 4 sigma."""
    return gaussian_filter(channel.astype(np.float64), sigma=sigma, mode="reflect", truncate=4.0)


def graham_enhance(image: FundusImage, sigma_fraction: float = 1 / 30, gain: float = 4.0,
                   noise_std: float = 0.0, seed: int = 0) -> FundusImage:
    """``clip(gain * (I - G_sigma(I)) + 128)`` per channel, sigma = fraction * min(H, W).

    ``noise_std > 0`` additionally adds zero-mean Gaussian noise (seeded) before
    clipping; it is off by default.
    """
    if sigma_fraction <= 0:
        raise ValueError("sigma_fraction must be positive")
    px = image.pixels.astype(np.float64)
    sigma = sigma_fraction * min(image.shape)
    out = np.empty_like(px)
    for c in range(3):
        out[..., c] = gain * px[..., c] - gain * local_average(px[..., c], sigma) + 128.0
    if noise_std > 0:
        rng = np.random.default_rng(item_seed(seed, image.id))
        out += rng.normal(0.0, noise_std, size=out.shape)
    return image.with_pixels(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def resize(image: FundusImage, target: tuple[int, int] = CLASSIFIER_SIZE,
           antialias: bool = True) -> FundusImage:
    """Bilinear resize to ``target = (H, W)`` with half-pixel centers."""
    if image.shape == tuple(target):
        return image.with_pixels(image.pixels.copy())
    t = torch.from_numpy(image.pixels).permute(2, 0, 1)[None].to(torch.float64)
    out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False,
                        antialias=antialias)
    arr = out[0].permute(1, 2, 0).numpy()
    return image.with_pixels(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def preprocess_for_classifier(image: FundusImage, size: tuple[int, int] = CLASSIFIER_SIZE,
                              crop_threshold: float = 7, sigma_fraction: float = 1 / 30,
                              noise_std: float = 0.0, seed: int = 0) -> FundusImage:
    """Auto-crop, resize, then Graham-enhance."""
    img = auto_crop(image, crop_threshold)
    img = resize(img, size)
    return graham_enhance(img, sigma_fraction, noise_std=noise_std, seed=seed)


# -- patches -------------------------------------------------------------------

@dataclass(eq=False)
class PatchSet:
    """Index-aligned image/mask patches. Origins are (image_id, top, left)."""

    patches: np.ndarray
    mask_patches: np.ndarray
    origins: list
    seed: int

    def __post_init__(self):
        if len(self.patches) != len(self.mask_patches) or len(self.patches) != len(self.origins):
            raise ValueError("patches, mask_patches and origins must have equal length")

    def __len__(self) -> int:
        return len(self.patches)

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.patches[idx], self.mask_patches[idx],
                        [self.origins[i] for i in idx], self.seed)

    def index(self) -> list[dict]:
        return [{"index": i, "image_id": o[0], "top": int(o[1]), "left": int(o[2])}
                for i, o in enumerate(self.origins)]


def pad_to_min(arr: np.ndarray, size: int) -> np.ndarray:
    """Symmetric-reflect pad at the bottom/right so both axes reach ``size``."""
    h, w = arr.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="symmetric")


def extract_patches(pairs: Sequence[tuple[FundusImage, VesselMask]], per_image: int = 68,
                    seed: int = 0, size: int = PATCH_SIZE) -> PatchSet:
    """Sample ``per_image`` random windows per pair, then shuffle globally.

    Top-left positions are uniform over all valid positions (with replacement),
    drawn from a per-image generator so results do not depend on pair order
    within the sampling step. Images smaller than ``size`` are reflect-padded
    first; origins then refer to the padded raster.
    """
    if per_image <= 0:
        raise ValueError("per_image must be positive")
    patches, masks, origins = [], [], []
    for image, mask in pairs:
        if mask.shape != image.shape:
            raise ValueError(f"{image.id}: mask {mask.shape} vs image {image.shape}")
        px = pad_to_min(image.pixels, size)
        mk = pad_to_min(mask.pixels, size)
        h, w = mk.shape
        rng = np.random.default_rng(item_seed(seed, image.id))
        tops = rng.integers(0, h - size + 1, size=per_image)
        lefts = rng.integers(0, w - size + 1, size=per_image)
        for t, l in zip(tops, lefts):
            patches.append(px[t:t + size, l:l + size])
            masks.append(mk[t:t + size, l:l + size])
            origins.append((image.id, int(t), int(l)))
    order = np.random.default_rng(seed).permutation(len(patches))
    return PatchSet(
        patches=np.stack([patches[i] for i in order]) if patches else np.zeros((0, size, size, 3), np.uint8),
        mask_patches=np.stack([masks[i] for i in order]) if masks else np.zeros((0, size, size), np.uint8),
        origins=[origins[i] for i in order],
        seed=seed,
    )


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    """Random affine + flip policy.

    ``shear_degrees`` defaults to a moderate symmetric range; use
    :meth:`literal_shear` for the 20..200 degree range. ``rescale`` is the
    intensity factor applied when an augmented raster becomes network input.
    """

    rotation_degrees: tuple = (0.0, 360.0)
    shear_degrees: tuple = (-20.0, 20.0)
    flip_horizontal: bool = True
    flip_vertical: bool = True
    flip_probability: float = 0.5
    zoom_range: float = 0.15
    rescale: float = 1 / 255
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls((0.0, 0.0), (0.0, 0.0), False, False, 0.5, 0.0, 1 / 255, seed)

    @classmethod
    def literal_shear(cls, **kwargs) -> "AugmentationPolicy":
        return cls(shear_degrees=(20.0, 200.0), **kwargs)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator) -> AffineParams:
    """Draw one transform. A fixed generator state yields a fixed sequence."""
    rot = rng.uniform(*policy.rotation_degrees)
    shear = rng.uniform(*policy.shear_degrees)
    zoom = rng.uniform(1.0 - policy.zoom_range, 1.0 + policy.zoom_range)
    fh = bool(policy.flip_horizontal and rng.random() < policy.flip_probability)
    fv = bool(policy.flip_vertical and rng.random() < policy.flip_probability)
    return AffineParams(float(rot), float(shear), float(zoom), fh, fv)


def affine_matrix(params: AffineParams, shape: tuple[int, int]) -> np.ndarray:
    """2x3 forward map about the raster center; positive rotation is counter-clockwise."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(params.rotation)
    # y axis points down, so a counter-clockwise turn on screen uses -theta.
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, s], [-s, c]])
    sh = np.array([[1.0, math.tan(math.radians(params.shear))], [0.0, 1.0]])
    lin = rot @ sh * params.zoom
    center = np.array([cx, cy])
    offset = center - lin @ center
    return np.hstack([lin, offset[:, None]])


def apply_params(image: FundusImage, params: AffineParams) -> FundusImage:
    px = image.pixels
    m = affine_matrix(params, image.shape)
    if not np.allclose(m, [[1, 0, 0], [0, 1, 0]], atol=1e-12):
        px = cv2.warpAffine(px, m, (px.shape[1], px.shape[0]), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if params.flip_h:
        px = px[:, ::-1]
    if params.flip_v:
        px = px[::-1]
    return image.with_pixels(np.ascontiguousarray(px))


def augment(image: FundusImage, policy: AugmentationPolicy,
            rng: Optional[np.random.Generator] = None) -> FundusImage:
    """Apply one random transform; the grade is carried over untouched."""
    if rng is None:
        rng = policy.rng()
    return apply_params(image, sample_params(policy, rng))


def to_tensor(image: FundusImage, rescale: float = 1 / 255) -> torch.Tensor:
    """HxWx3 uint8 -> 3xHxW float32."""
    return torch.from_numpy(np.ascontiguousarray(image.pixels)).permute(2, 0, 1).float() * rescale
