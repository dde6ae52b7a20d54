"""Reading and writing datasets on disk.

Layout::

    <dataset>/<split>/<video_id>/frame_000000.png   (per-frame images)
    <dataset>/<split>/<video_id>.avi                 (or a video file)
    <dataset>/<split>/labels.csv                     (video_id,frame_index,label)
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from .frames import FrameDecodeError, Video, resize_unit

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
VIDEO_EXTS = {".avi", ".mp4", ".mov", ".mkv", ".mpg", ".mpeg"}
LABELS_FILE = "labels.csv"


def _decode_image(path: Path, frame_index: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise FrameDecodeError(frame_index, f"cannot decode {path}: {exc}") from exc


def iter_raw_frames(source: Path) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield (frame_index, uint8 RGB array) from a frame directory or a video file."""
    source = Path(source)
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_EXTS)
        for i, p in enumerate(files):
            yield i, _decode_image(p, i)
    elif source.suffix.lower() in VIDEO_EXTS:
        import cv2

        cap = cv2.VideoCapture(str(source))
        if not cap.isOpened():
            raise FrameDecodeError(0, f"cannot open video {source}")
        i = 0
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                yield i, cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
                i += 1
        finally:
            cap.release()
    else:
        raise FileNotFoundError(f"not a frame directory or video file: {source}")


def list_videos(split_dir: Path) -> List[Path]:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")
    out = [p for p in sorted(split_dir.iterdir())
           if p.is_dir() or p.suffix.lower() in VIDEO_EXTS]
    return out


def read_labels(path: Path) -> Dict[str, np.ndarray]:
    """Per-video label arrays from a ``video_id,frame_index,label`` CSV."""
    rows: Dict[str, Dict[int, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["video_id"], {})[int(row["frame_index"])] = int(row["label"])
    out = {}
    for vid, m in rows.items():
        arr = np.zeros(max(m) + 1, dtype=np.int64)
        for i, lab in m.items():
            arr[i] = lab
        out[vid] = arr
    return out


def write_labels(path: Path, videos: List[Video]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame_index", "label"])
        for v in videos:
            if v.labels is None:
                continue
            for idx, lab in zip(v.frame_indices, v.labels):
                w.writerow([v.video_id, int(idx), int(lab)])


def load_video(source: Path, size: Tuple[int, int], labels: Optional[np.ndarray] = None,
               video_id: str = None) -> Video:
    """Decode and resize a video to ``size``; pixel values in [0, 1] (no background subtraction)."""
    source = Path(source)
    frames = [resize_unit(raw, size, i) for i, raw in iter_raw_frames(source)]
    if not frames:
        raise FrameDecodeError(0, f"no frames found in {source}")
    if labels is not None:
        if len(labels) < len(frames):
            labels = np.pad(labels, (0, len(frames) - len(labels)))
        labels = labels[:len(frames)]
    if video_id is None:
        video_id = source.stem if source.is_file() else source.name
    return Video(video_id, np.stack(frames), labels=labels)


def load_split(root: Path, split: str, size: Tuple[int, int]) -> List[Video]:
    """Load every video of ``<root>/<split>`` with labels when a labels.csv exists."""
    split_dir = Path(root) / split
    label_path = split_dir / LABELS_FILE
    labels = read_labels(label_path) if label_path.exists() else {}
    videos = []
    for p in list_videos(split_dir):
        vid = p.stem if p.is_file() else p.name
        videos.append(load_video(p, size, labels.get(vid), video_id=vid))
        log.debug("loaded %s (%d frames)", vid, len(videos[-1]))
    return videos


def write_split(root: Path, split: str, videos: List[Video]) -> List[Path]:
    """Write videos as 8-bit PNG frame directories plus labels.csv; returns written paths."""
    split_dir = Path(root) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for v in videos:
        vdir = split_dir / v.video_id
        vdir.mkdir(exist_ok=True)
        for idx, frame in zip(v.frame_indices, v.frames):
            p = vdir / f"frame_{int(idx):06d}.png"
            img = np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
            Image.fromarray(img).save(p)
            written.append(p)
    if any(v.labels is not None for v in videos):
        write_labels(split_dir / LABELS_FILE, videos)
        written.append(split_dir / LABELS_FILE)
    return written
