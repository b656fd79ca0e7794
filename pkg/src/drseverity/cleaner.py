"""Vessel removal: replace masked pixels with a cascade box-blurred background."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .dataio import FundusImage, VesselMask

_SCIPY_MODES = {"REFLECT": "reflect", "ZERO": "constant"}


@dataclass
class CleanConfig:
    filter_sizes: list = field(default_factory=lambda: [4, 16, 32, 64])
    padding: str = "REFLECT"

    def __post_init__(self):
        if not self.filter_sizes or any(int(k) < 1 for k in self.filter_sizes):
            raise ValueError("filter_sizes must be a non-empty list of positive sizes")
        if self.padding not in _SCIPY_MODES:
            raise ValueError(f"padding must be one of {sorted(_SCIPY_MODES)}")


def cascade_blur(channel: np.ndarray, cfg: CleanConfig) -> np.ndarray:
    """k x k mean filters applied in sequence on the running blur, in float64.

    For even k the window covering output pixel (y, x) spans rows
    ``y - k//2 .. y - k//2 + k - 1`` (same for columns).
    """
    blur = channel.astype(np.float64)
    for k in cfg.filter_sizes:
        blur = uniform_filter(blur, size=int(k), mode=_SCIPY_MODES[cfg.padding], cval=0.0)
    return blur


def clean_image(image: FundusImage, mask: VesselMask, cfg: CleanConfig | None = None) -> FundusImage:
    cfg = cfg or CleanConfig()
    if mask.shape != image.shape:
        raise ValueError(f"{image.id}: mask {mask.shape} does not match image {image.shape}")
    sel = mask.pixels == 1
    out = image.pixels.copy()
    if not sel.any():
        return image.with_pixels(out)
    for c in range(3):
        blur = cascade_blur(image.pixels[..., c], cfg)
        out[..., c][sel] = np.clip(np.rint(blur[sel]), 0, 255).astype(np.uint8)
    return image.with_pixels(out)


def clean_batch(pairs: Sequence[tuple[FundusImage, VesselMask]],
                cfg: CleanConfig | None = None) -> list[FundusImage]:
    """Clean every pair; all-or-nothing, a failure names the offending id."""
    results = []
    for image, mask in pairs:
        try:
            results.append(clean_image(image, mask, cfg))
        except Exception as exc:
            raise ValueError(f"cleaning failed for '{image.id}': {exc}") from exc
    return results
