"""Frame containers, background model, preprocessing and sequence sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


class FrameDecodeError(ValueError):
    """Raised when a raw frame cannot be turned into an image array."""

    def __init__(self, frame_index, reason: str = "undecodable frame"):
        super().__init__(f"frame {frame_index}: {reason}")
        self.frame_index = frame_index


@dataclass
class FrameTensor:
    """One preprocessed frame, ``pixels`` is H x W x 3 float32."""

    pixels: np.ndarray
    frame_index: int = 0
    video_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"non-finite pixels in frame {self.frame_index}")


@dataclass
class Video:
    """An ordered stack of frames of one video.

    ``frames`` is (L, H, W, 3) float32. ``frame_indices`` holds the position of
    each frame in the source video, so subsampled videos keep their raw indices.
    ``labels`` is an optional per-frame 0/1 array (1 = anomalous).
    """

    video_id: str
    frames: np.ndarray
    frame_indices: np.ndarray = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (L, H, W, 3) frames, got {self.frames.shape}")
        if self.frame_indices is None:
            self.frame_indices = np.arange(len(self.frames))
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.frames):
                raise ValueError("labels and frames differ in length")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, pos: int) -> FrameTensor:
        return FrameTensor(self.frames[pos], int(self.frame_indices[pos]), self.video_id)

    def subsample(self, d: int) -> "Video":
        """Keep every d-th frame."""
        if d < 1:
            raise ValueError(f"stride must be >= 1, got {d}")
        labels = None if self.labels is None else self.labels[::d]
        return Video(self.video_id, self.frames[::d], self.frame_indices[::d], labels)

    def with_frames(self, frames: np.ndarray) -> "Video":
        return Video(self.video_id, frames, self.frame_indices, self.labels)


@dataclass
class BackgroundModel:
    mean_frame: np.ndarray
    frame_count: int

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if self.mean_frame.min() < 0.0 or self.mean_frame.max() > 1.0:
            raise ValueError("background pixels must lie in [0, 1]")

    @property
    def size(self) -> Tuple[int, int]:
        return self.mean_frame.shape[0], self.mean_frame.shape[1]


def compute_background(training_frames: Iterable) -> BackgroundModel:
    """Per-pixel mean RGB over all training frames, in a single pass.

    Accepts any iterable of H x W x 3 arrays in [0, 1] (FrameTensor objects or
    whole (L, H, W, 3) videos are also accepted).
    """
    total = None
    count = 0
    for item in training_frames:
        if isinstance(item, FrameTensor):
            item = item.pixels
        elif isinstance(item, Video):
            item = item.frames
        arr = np.asarray(item, dtype=np.float64)
        batch = arr[None] if arr.ndim == 3 else arr
        if total is None:
            total = np.zeros(batch.shape[1:], dtype=np.float64)
        elif batch.shape[1:] != total.shape:
            raise ValueError(f"frame shape {batch.shape[1:]} != {total.shape}")
        total += batch.sum(axis=0)
        count += batch.shape[0]
    if count == 0:
        raise ValueError("no training frames")
    mean = np.clip(total / count, 0.0, 1.0).astype(np.float32)
    return BackgroundModel(mean, count)


def as_unit_image(raw, frame_index=None) -> np.ndarray:
    """Convert a decoded image (uint8 or float in [0, 1], gray or RGB) to float32 H x W x 3."""
    if raw is None:
        raise FrameDecodeError(frame_index)
    try:
        arr = np.asarray(raw)
    except Exception as exc:  # pragma: no cover - exotic inputs
        raise FrameDecodeError(frame_index, str(exc)) from exc
    if arr.dtype == object or arr.ndim not in (2, 3) or arr.size == 0:
        raise FrameDecodeError(frame_index)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    elif arr.shape[2] != 3:
        raise FrameDecodeError(frame_index, f"unsupported channel count {arr.shape[2]}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def resize_bilinear(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of H x W x C images (half-pixel centres, no antialiasing)."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32, copy=False)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resize_unit(raw, target_size: Tuple[int, int], frame_index=None) -> np.ndarray:
    return np.clip(resize_bilinear(as_unit_image(raw, frame_index), target_size), 0.0, 1.0)


def preprocess(raw_frame, bg: BackgroundModel, target_size: Tuple[int, int],
               frame_index: int = 0, video_id: str = "") -> FrameTensor:
    """Resize, scale to [0, 1] and subtract the background mean frame."""
    if tuple(bg.size) != tuple(target_size):
        raise ValueError(f"background size {bg.size} != target size {tuple(target_size)}")
    img = resize_unit(raw_frame, target_size, frame_index)
    return FrameTensor(img - bg.mean_frame, frame_index, video_id)


def subtract_background(video: Video, bg: BackgroundModel) -> Video:
    """Background-subtract a whole video of [0, 1] frames already at the model size."""
    if video.size != bg.size:
        raise ValueError(f"video frame size {video.size} != background size {bg.size}")
    return video.with_frames(video.frames - bg.mean_frame[None])


@dataclass
class SequenceSample:
    """k input frames plus a future target, referenced by position in ``video``.

    ``positions`` index into ``video.frames``; ``target_position`` is the frame
    ``t_offset`` sampled steps after the last input.
    """

    video: Video = field(repr=False)
    positions: np.ndarray
    target_position: int
    t_offset: int

    @property
    def k(self) -> int:
        return len(self.positions)

    @property
    def inputs(self) -> np.ndarray:
        return self.video.frames[self.positions]

    @property
    def recon_targets(self) -> np.ndarray:
        return self.video.frames[self.positions[1:]]

    @property
    def future_target(self) -> np.ndarray:
        return self.video.frames[self.target_position]

    @property
    def input_indices(self) -> np.ndarray:
        return self.video.frame_indices[self.positions]

    @property
    def target_index(self) -> int:
        return int(self.video.frame_indices[self.target_position])

    def stacked(self) -> np.ndarray:
        """(k + 1, H, W, 3) array: inputs followed by the future target."""
        return self.video.frames[np.append(self.positions, self.target_position)]


def make_samples(video: Video, k: int, t_offset: int = 6, stride: int = 1) -> List[SequenceSample]:
    """Sliding windows over the d-subsampled video, advancing one sampled frame at a time.

    Returns an empty list when the subsampled video is shorter than k + t_offset.
    """
    if k < 1 or t_offset < 1 or stride < 1:
        raise ValueError(f"need k, t_offset, stride >= 1 (got {k}, {t_offset}, {stride})")
    sampled = np.arange(0, len(video), stride)
    n = len(sampled) - (k + t_offset) + 1
    samples = []
    for i in range(max(0, n)):
        samples.append(SequenceSample(video, sampled[i:i + k], int(sampled[i + k - 1 + t_offset]), t_offset))
    return samples


def count_samples(n_frames: int, k: int, t_offset: int, stride: int = 1) -> int:
    n_sampled = -(-n_frames // stride)
    return max(0, n_sampled - (k + t_offset) + 1)


def stack_samples(samples: Sequence[SequenceSample]) -> torch.Tensor:
    """Batch tensor of shape (N, k + 1, 3, H, W)."""
    arr = np.stack([s.stacked() for s in samples])
    return torch.from_numpy(arr).permute(0, 1, 4, 2, 3).contiguous()
