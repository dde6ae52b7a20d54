"""Test-time distortions: brightness, rain streaks and Gaussian blur.

The rain model draws seeded, slightly slanted line segments whose count and
length scale with the frame size; "torrential" is denser, longer and darker
than "heavy".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

RAIN_LEVELS = {
    # streaks per 1000 px, streak length as a fraction of frame height, scene dimming, streak intensity
    "none": None,
    "heavy": dict(density=4.0, length=0.12, dim=0.85, intensity=0.78, slant=10.0),
    "torrential": dict(density=8.0, length=0.20, dim=0.75, intensity=0.78, slant=15.0),
}


@dataclass(frozen=True)
class DistortionSpec:
    brightness: float = 1.0
    blur_sigma: float = 0.0
    rain_level: str = "none"

    def __post_init__(self):
        if not 0.0 < self.brightness <= 1.0:
            raise ValueError(f"brightness must be in (0, 1], got {self.brightness}")
        if self.blur_sigma < 0.0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.rain_level not in RAIN_LEVELS:
            raise ValueError(f"unknown rain level {self.rain_level!r}; expected one of {sorted(RAIN_LEVELS)}")

    @property
    def is_identity(self) -> bool:
        return self.brightness == 1.0 and self.blur_sigma == 0.0 and self.rain_level == "none"

    def label(self) -> str:
        return f"b{self.brightness:g}_rain-{self.rain_level}_blur{self.blur_sigma:g}"


def _add_rain(img: np.ndarray, level: str, rng: np.random.Generator) -> np.ndarray:
    p = RAIN_LEVELS[level]
    h, w = img.shape[:2]
    out = img * p["dim"]
    n_drops = max(1, int(round(p["density"] * h * w / 1000.0)))
    length = max(2, int(round(p["length"] * h)))
    angle = np.deg2rad(rng.uniform(-p["slant"], p["slant"]))
    dx, dy = np.sin(angle), np.cos(angle)
    x0 = rng.uniform(0, w, n_drops)
    y0 = rng.uniform(-length, h, n_drops)
    steps = np.arange(length)
    xs = np.round(x0[:, None] + dx * steps[None]).astype(int).ravel()
    ys = np.round(y0[:, None] + dy * steps[None]).astype(int).ravel()
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out[ys[keep], xs[keep]] = np.maximum(out[ys[keep], xs[keep]], p["intensity"])
    return out


def distort(frame: np.ndarray, spec: DistortionSpec, seed: Optional[int] = 0) -> np.ndarray:
    """Apply brightness -> rain -> blur to an H x W x 3 image in [0, 1]."""
    out = np.asarray(frame, dtype=np.float32)
    if spec.is_identity:
        return out.copy()
    out = np.clip(out * spec.brightness, 0.0, 1.0)
    if spec.rain_level != "none":
        out = _add_rain(out, spec.rain_level, np.random.default_rng(seed))
    if spec.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def distort_video(frames: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    """Distort every frame; each frame gets its own rain pattern derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).spawn(len(frames))
    return np.stack([distort(f, spec, np.random.default_rng(s)) for f, s in zip(frames, seeds)])
