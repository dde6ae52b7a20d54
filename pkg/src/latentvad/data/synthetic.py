"""Moving-object videos (moving-MNIST style) with per-frame anomaly labels.

Digit glyphs come from the 8x8 handwritten digits bundled with scikit-learn
(upscaled bilinearly), so generation works offline.  Each video holds a single
object that translates along one axis at a constant speed and reflects off the
canvas edges.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from .frames import Video, resize_bilinear

SHAPES = ("circle", "square")
DIGITS = tuple(str(d) for d in range(10))


@dataclass(frozen=True)
class SyntheticSpec:
    canvas_size: Tuple[int, int] = (32, 32)
    object_set: Tuple[str, ...] = ("4", "7")
    speed: int = 2
    direction: str = "random"  # horizontal | vertical | random (per video)
    sequence_length: int = 40
    seed: int = 0
    object_size: int = 16
    digit_split: str = "train"  # which half of the glyph pool digits are drawn from
    normal_objects: Tuple[str, ...] = ("4", "7")
    normal_speeds: Tuple[int, ...] = (2,)

    def __post_init__(self):
        object.__setattr__(self, "canvas_size", tuple(int(v) for v in self.canvas_size))
        object.__setattr__(self, "object_set", tuple(str(o) for o in self.object_set))
        object.__setattr__(self, "normal_objects", tuple(str(o) for o in self.normal_objects))
        object.__setattr__(self, "normal_speeds", tuple(int(s) for s in self.normal_speeds))
        if self.speed < 1:
            raise ValueError(f"speed must be >= 1, got {self.speed}")
        if self.direction not in ("horizontal", "vertical", "random"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.digit_split not in ("train", "test"):
            raise ValueError(f"digit_split must be 'train' or 'test', got {self.digit_split!r}")
        if not self.object_set:
            raise ValueError("object_set is empty")
        for name in self.object_set:
            if name not in DIGITS and name not in SHAPES:
                raise ValueError(f"unknown object {name!r}")
        if self.object_size > min(self.canvas_size):
            raise ValueError(f"object size {self.object_size} exceeds canvas {self.canvas_size}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")

    def is_normal(self, obj: str) -> bool:
        return obj in self.normal_objects and self.speed in self.normal_speeds

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "SyntheticSpec":
        return cls(**d)


@functools.lru_cache(maxsize=None)
def _digit_pool() -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images.astype(np.float32) / 16.0
    pool = {}
    for d in range(10):
        imgs = images[digits.target == d]
        half = len(imgs) // 2
        pool[str(d)] = (imgs[:half], imgs[half:])
    return pool


def _shape_glyph(name: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    stroke = max(1.5, size / 8.0)
    if name == "circle":
        r = np.hypot(yy - c, xx - c)
        outer = size / 2.0 - 1.0
        return ((r <= outer) & (r >= outer - stroke)).astype(np.float32)
    m = 1.0
    d = np.minimum.reduce([yy - m, xx - m, size - m - yy, size - m - xx])
    return ((d >= 0) & (d < stroke)).astype(np.float32)


def object_glyph(name: str, size: int, rng: np.random.Generator, split: str = "train") -> np.ndarray:
    """A size x size intensity mask in [0, 1] for a digit or shape."""
    if name in SHAPES:
        return _shape_glyph(name, size)
    train, test = _digit_pool()[name]
    imgs = train if split == "train" else test
    img = imgs[rng.integers(len(imgs))]
    return np.clip(resize_bilinear(img[..., None], (size, size))[..., 0], 0.0, 1.0)


def bounce_positions(start: int, velocity: int, limit: int, n: int) -> List[int]:
    """Positions of a 1D point moving at ``velocity`` inside [0, limit], reflecting at both ends.

    Touching a boundary flips the direction for the following steps.
    """
    if limit < 0:
        raise ValueError("object larger than canvas")
    pos, v = int(start), int(velocity)
    out = [pos]
    for _ in range(n - 1):
        if limit == 0:
            out.append(0)
            continue
        pos += v
        # fold back until inside; handles speeds larger than the free range
        while pos < 0 or pos > limit:
            pos = -pos if pos < 0 else 2 * limit - pos
            v = -v
        if pos == 0 or pos == limit:
            v = abs(v) if pos == 0 else -abs(v)
        out.append(pos)
    return out


def generate_moving_objects(spec: SyntheticSpec, video_id: str = None) -> Video:
    """Render one video of ``spec.sequence_length`` frames with per-frame labels."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas_size
    size = spec.object_size
    obj = spec.object_set[rng.integers(len(spec.object_set))]
    glyph = object_glyph(obj, size, rng, spec.digit_split)
    direction = spec.direction
    if direction == "random":
        direction = ("horizontal", "vertical")[rng.integers(2)]
    sign = 1 if rng.integers(2) else -1
    x0 = int(rng.integers(0, w - size + 1))
    y0 = int(rng.integers(0, h - size + 1))
    n = spec.sequence_length
    if direction == "horizontal":
        xs = bounce_positions(x0, sign * spec.speed, w - size, n)
        ys = [y0] * n
    else:
        ys = bounce_positions(y0, sign * spec.speed, h - size, n)
        xs = [x0] * n
    frames = np.zeros((n, h, w, 3), dtype=np.float32)
    for i, (x, y) in enumerate(zip(xs, ys)):
        frames[i, y:y + size, x:x + size, :] = glyph[..., None]
    label = 0 if spec.is_normal(obj) else 1
    vid = video_id or f"synth-{obj}-s{spec.speed}-{spec.seed}"
    return Video(vid, frames, labels=np.full(n, label, dtype=np.int64))


def generate_dataset(spec: SyntheticSpec, n_videos: int, tag: str = "") -> List[Video]:
    """``n_videos`` independent videos; video i uses a seed derived from (spec.seed, i)."""
    videos = []
    for i in range(n_videos):
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        videos.append(generate_moving_objects(replace(spec, seed=seed), video_id=f"{tag}{i:04d}"))
    return videos
