"""Per-frame anomaly scores, normalisation and anomaly localisation."""

from __future__ import annotations

import csv
from pathlib import Path
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data.frames import Video
from .model import AnomalyNet

LATENT_METRICS = ("latent_mse", "latent_cosine")
PIXEL_METRICS = ("pixel_prediction_mse", "pixel_reconstruction_mse")
METRICS = LATENT_METRICS + PIXEL_METRICS
_ALIASES = {"pixel_prediction": "pixel_prediction_mse", "pixel_reconstruction": "pixel_reconstruction_mse",
            "z-mse": "latent_mse", "p-mse": "pixel_prediction_mse"}


def canonical_metric(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in METRICS:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")
    return name


def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def latent_mse(pred, actual) -> float:
    """Mean squared difference over all latent elements."""
    p, a = _as_array(pred), _as_array(actual)
    if p.shape != a.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {a.shape}")
    return float(np.mean((p - a) ** 2))


def latent_cosine(pred, actual) -> float:
    """Cosine distance 1 - <p, a> / (|p| |a|) of the flattened codes, in [0, 2]."""
    p, a = _as_array(pred).ravel(), _as_array(actual).ravel()
    if p.shape != a.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {a.shape}")
    npn, nan = np.linalg.norm(p), np.linalg.norm(a)
    if npn == 0.0 or nan == 0.0:
        raise ValueError("undefined cosine: zero-norm latent code")
    return float(np.clip(1.0 - np.dot(p, a) / (npn * nan), 0.0, 2.0))


def latent_score(pred, actual, metric: str) -> float:
    metric = canonical_metric(metric)
    if metric == "latent_mse":
        return latent_mse(pred, actual)
    if metric == "latent_cosine":
        return latent_cosine(pred, actual)
    raise ValueError(f"{metric} is not a latent metric")


def pixel_mse(decoded, target) -> float:
    d, t = _as_array(decoded), _as_array(target)
    if d.shape != t.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {t.shape}")
    return float(np.mean((d - t) ** 2))


def normalize_scores(raw: Sequence[float], window: Optional[int] = None) -> np.ndarray:
    """Min-max scale scores to [0, 1].

    Without ``window`` the whole series is one group.  With ``window`` each
    frame uses the min/max of the centred window of that size, clipped at the
    series ends.  Flat groups (max == min) map to 0.
    """
    s = np.asarray(raw, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores to normalise")
    if window is None or window >= len(s):
        lo = np.full_like(s, s.min())
        hi = np.full_like(s, s.max())
    else:
        if window < 1:
            raise ValueError("window must be >= 1")
        size = int(window)
        lo = ndimage.minimum_filter1d(s, size, mode="nearest")
        hi = ndimage.maximum_filter1d(s, size, mode="nearest")
    span = hi - lo
    out = np.zeros_like(s)
    ok = span > 0
    out[ok] = (s[ok] - lo[ok]) / span[ok]
    return np.clip(out, 0.0, 1.0)


def trailing_normalize(history: Sequence[float], window: int) -> float:
    """Normalised value of the last score against the trailing ``window`` scores."""
    tail = np.asarray(history[-window:], dtype=np.float64)
    lo, hi = tail.min(), tail.max()
    return 0.0 if hi == lo else float((tail[-1] - lo) / (hi - lo))


@dataclass
class Region:
    x: int
    y: int
    w: int
    h: int
    mean_error: float
    area: int = 0


def quantile_threshold(error_map: np.ndarray, q: float = 0.99) -> float:
    return float(np.quantile(np.asarray(error_map, dtype=np.float64), q))


def localize(pixel_error_map: np.ndarray, threshold: float, min_area: int = 25) -> List[Region]:
    """Bounding boxes of 8-connected regions where the error exceeds ``threshold``.

    Components smaller than ``min_area`` pixels are dropped; regions are sorted
    by mean error, highest first.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    err = np.asarray(pixel_error_map, dtype=np.float64)
    if err.ndim == 3:
        err = err.mean(axis=-1)
    mask = err > threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    regions = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == i
        area = int(comp.sum())
        if area < min_area:
            continue
        ys, xs = sl
        regions.append(Region(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start,
                              float(err[sl][comp].mean()), area))
    regions.sort(key=lambda r: r.mean_error, reverse=True)
    return regions


@dataclass
class AnomalyScoreSeries:
    video_id: str
    raw_scores: np.ndarray
    normalized_scores: np.ndarray
    metric: str
    frame_offset: int
    frame_indices: np.ndarray  # source-frame index of each scored frame
    positions: np.ndarray      # position of each scored frame inside the scored Video

    def __len__(self):
        return len(self.raw_scores)


def _to_nchw(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).to(dtype)


@torch.no_grad()
def encode_frames(model: AnomalyNet, frames: np.ndarray, chunk: int = 64) -> torch.Tensor:
    """Latent codes of (L, H, W, 3) frames, computed in chunks."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [model.encode(_to_nchw(frames[i:i + chunk], dtype))[0] for i in range(0, len(frames), chunk)]
    return torch.cat(out)


@torch.no_grad()
def reconstruction_errors(model: AnomalyNet, frames: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Per-frame reconstruction MSE; entry q uses frame q-1 as shortcut source (entry 0 is NaN)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    errs = np.full(len(frames), np.nan)
    for start in range(1, len(frames), chunk):
        stop = min(len(frames), start + chunk)
        x = _to_nchw(frames[start - 1:stop], dtype)
        z, pyr = model.encode(x)
        recon = model.decode(z[1:], [p[:-1] for p in pyr])
        diff = (recon.double() - x[1:].double()) ** 2
        errs[start:stop] = diff.flatten(1).mean(1).numpy()
    return errs


@torch.no_grad()
def predicted_frames(model: AnomalyNet, frames: np.ndarray, positions: np.ndarray, z_hat: torch.Tensor,
                     chunk: int = 32) -> torch.Tensor:
    """Decode predicted codes using the pyramid of the last input frame (``positions``)."""
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, len(positions), chunk):
        _, pyr = model.encode(_to_nchw(frames[positions[i:i + chunk]], dtype))
        outs.append(model.decode(z_hat[i:i + chunk].to(dtype), pyr))
    return torch.cat(outs)


def pixel_scores(model: AnomalyNet, clips: torch.Tensor, mode: str) -> np.ndarray:
    """Pixel-space ablation scores for a batch of (N, k + 1, 3, H, W) clips.

    ``prediction`` decodes the predicted future code with the last input frame's
    pyramid and compares it with the future frame; ``reconstruction`` averages
    the per-frame reconstruction MSE of frames 2..k.
    """
    if model.decoder is None:
        raise ValueError("model has no decoder weights")
    model.eval()
    k = model.cfg.k
    dtype = next(model.parameters()).dtype
    clips = clips.to(dtype)
    with torch.no_grad():
        recon, targets, z_hat, _ = model(clips)
        if mode == "reconstruction":
            return ((recon.double() - targets.double()) ** 2).flatten(2).mean(2).mean(1).numpy()
        if mode == "prediction":
            _, pyr = model.encode(clips[:, k - 1])
            pred = model.decode(z_hat, pyr)
            return ((pred.double() - clips[:, k].double()) ** 2).flatten(1).mean(1).numpy()
    raise ValueError(f"unknown pixel score mode {mode!r}")


@torch.no_grad()
def score_video(model: AnomalyNet, video: Video, metric: str = "latent_cosine",
                window: Optional[int] = None, stride: int = 1, normalize: bool = True,
                chunk: int = 64) -> AnomalyScoreSeries:
    """Score every scoreable frame of a background-subtracted video.

    Scores align with the future frame of each k-frame window, so the first
    ``k - 1 + t_offset`` sampled frames receive no score.
    """
    metric = canonical_metric(metric)
    model.eval()
    cfg = model.cfg
    if video.size != cfg.input_size:
        raise ValueError(f"video frame size {video.size} does not match model input size {cfg.input_size}")
    sampled = np.arange(0, len(video), stride)
    frames = video.frames[sampled]
    n = len(sampled) - cfg.frame_offset
    if n <= 0:
        empty = np.zeros(0)
        return AnomalyScoreSeries(video.video_id, empty, empty, metric, cfg.frame_offset,
                                  np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    k, t = cfg.k, cfg.t_offset
    targets = np.arange(n) + cfg.frame_offset  # sampled positions of scored frames
    if metric == "pixel_reconstruction_mse":
        errs = reconstruction_errors(model, frames, chunk=chunk // 2 or 1)
        raw = np.array([errs[i + 1:i + k].mean() for i in range(n)])
    else:
        z = encode_frames(model, frames, chunk=chunk)
        stacks = torch.stack([z[i:i + k] for i in range(n)])
        z_hat = torch.cat([model.predict_latent(stacks[i:i + chunk]) for i in range(0, n, chunk)])
        if metric in LATENT_METRICS:
            actual = z[targets]
            raw = np.array([latent_score(z_hat[i], actual[i], metric) for i in range(n)])
        else:
            pred = predicted_frames(model, frames, np.arange(n) + k - 1, z_hat, chunk=chunk // 2 or 1)
            tgt = _to_nchw(frames[targets], torch.float64)
            raw = ((pred.double() - tgt) ** 2).flatten(1).mean(1).numpy()
    norm = normalize_scores(raw, window) if normalize else raw.copy()
    return AnomalyScoreSeries(video.video_id, raw, norm, metric, cfg.frame_offset,
                              video.frame_indices[sampled[targets]], sampled[targets])


@torch.no_grad()
def localize_video(model: AnomalyNet, video: Video, quantile: float = 0.99, min_area: int = 25,
                   threshold: Optional[float] = None):
    """Regions of highest pixel prediction error for every scoreable frame.

    Returns a list of (frame_index, regions) pairs.  The threshold defaults to
    the ``quantile`` of each frame's error map.
    """
    cfg = model.cfg
    n = len(video) - cfg.frame_offset
    if n <= 0:
        return []
    z = encode_frames(model, video.frames)
    stacks = torch.stack([z[i:i + cfg.k] for i in range(n)])
    z_hat = model.predict_latent(stacks)
    pred = predicted_frames(model, video.frames, np.arange(n) + cfg.k - 1, z_hat)
    targets = np.arange(n) + cfg.frame_offset
    out = []
    for i, pos in enumerate(targets):
        err = ((pred[i].double().permute(1, 2, 0).numpy() - video.frames[pos]) ** 2).mean(-1)
        thr = quantile_threshold(err, quantile) if threshold is None else threshold
        out.append((int(video.frame_indices[pos]), localize(err, thr, min_area)))
    return out


SCORE_CSV_FIELDS = ["video_id", "frame_index", "raw_score", "normalized_score", "metric"]
REGION_CSV_FIELDS = ["video_id", "frame_index", "x", "y", "w", "h", "mean_error"]


def write_scores_csv(path, series: Iterable[AnomalyScoreSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_CSV_FIELDS)
        for s in series:
            for idx, r, nrm in zip(s.frame_indices, s.raw_scores, s.normalized_scores):
                w.writerow([s.video_id, int(idx), repr(float(r)), repr(float(nrm)), s.metric])


def read_scores_csv(path) -> List[AnomalyScoreSeries]:
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault((row["video_id"], row["metric"]), []).append(row)
    out = []
    for (vid, metric), rs in rows.items():
        idx = np.array([int(r["frame_index"]) for r in rs])
        out.append(AnomalyScoreSeries(vid, np.array([float(r["raw_score"]) for r in rs]),
                                      np.array([float(r["normalized_score"]) for r in rs]),
                                      metric, -1, idx, idx))
    return out


def write_regions_csv(path, video_id: str, frame_regions) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(REGION_CSV_FIELDS)
        for frame_index, regions in frame_regions:
            for r in regions:
                w.writerow([video_id, frame_index, r.x, r.y, r.w, r.h, repr(r.mean_error)])
