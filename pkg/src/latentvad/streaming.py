"""Online scoring with a cache of the last k latent codes.

Every arriving frame is encoded exactly once.  When k codes are cached the
motion model predicts the code of the frame ``t_offset`` steps ahead; that
prediction waits in ``PendingTargets`` until the frame arrives and is scored.
The decoder is never used.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch

from .data.frames import BackgroundModel, preprocess
from .model import AnomalyNet
from .scoring import LATENT_METRICS, canonical_metric, latent_score, trailing_normalize

STAGES = ("preprocess", "encode", "predict", "score")


class StreamError(RuntimeError):
    pass


class LatentRing:
    """FIFO of at most ``capacity`` latent codes."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.slots: deque = deque(maxlen=capacity)
        self.next_index = 0
        self.encode_counter = 0

    def push(self, code: torch.Tensor) -> None:
        self.slots.append(code)
        self.next_index += 1

    @property
    def full(self) -> bool:
        return len(self.slots) == self.capacity

    def __len__(self):
        return len(self.slots)

    def stack(self) -> torch.Tensor:
        """(1, k, C, Hz, Wz) stack in arrival order."""
        return torch.stack(list(self.slots))[None]


class PendingTargets:
    """Predicted codes keyed by the frame index they target; each is consumed once."""

    def __init__(self):
        self._items: Dict[int, torch.Tensor] = {}

    def add(self, index: int, code: torch.Tensor) -> None:
        if index in self._items:
            raise StreamError(f"duplicate prediction for frame {index}")
        self._items[index] = code

    def pop(self, index: int) -> Optional[torch.Tensor]:
        return self._items.pop(index, None)

    def expire(self) -> int:
        n = len(self._items)
        self._items.clear()
        return n

    def __len__(self):
        return len(self._items)


@dataclass
class ThroughputReport:
    mode: str
    frames: int
    wall_time: float
    fps: float
    stage_latency: Dict[str, float]  # mean seconds per frame
    frame_latency: float             # mean wall seconds per frame
    encode_count: int
    scores_emitted: int

    def as_text(self) -> str:
        lines = [f"mode: {self.mode}", f"frames: {self.frames}", f"wall_time_s: {self.wall_time:.6f}",
                 f"fps: {self.fps:.3f}", f"frame_latency_ms: {1e3 * self.frame_latency:.4f}",
                 f"encode_count: {self.encode_count}", f"scores_emitted: {self.scores_emitted}"]
        lines += [f"stage_{k}_ms: {1e3 * v:.4f}" for k, v in self.stage_latency.items()]
        return "\n".join(lines)


class StreamScorer:
    """Stateful single-stream scorer.

    Args:
        model: trained network; put into eval mode (BatchNorm uses running stats).
        metric: ``latent_mse`` or ``latent_cosine``.
        window: trailing window size for online min-max normalisation.
        background: needed only when raw frames are pushed.
        naive: re-encode all k cached frames on every step instead of caching codes
            (the baseline the cache is measured against).
    """

    def __init__(self, model: AnomalyNet, metric: str = "latent_cosine", window: Optional[int] = 64,
                 background: Optional[BackgroundModel] = None, naive: bool = False):
        self.metric = canonical_metric(metric)
        if self.metric not in LATENT_METRICS:
            raise ValueError(f"streaming supports latent metrics only, got {self.metric}")
        self.model = model.eval()
        self.cfg = model.cfg
        self.dtype = next(model.parameters()).dtype
        self.window = window
        self.background = background
        self.naive = naive
        self.ring = LatentRing(self.cfg.k)
        self.frames: deque = deque(maxlen=self.cfg.k)  # naive mode only
        self.pending = PendingTargets()
        self.history: List[float] = []
        self.stage_time = {s: 0.0 for s in STAGES}

    @property
    def encode_counter(self) -> int:
        return self.ring.encode_counter

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        self.ring.encode_counter += x.shape[0]
        return self.model.encode(x)[0]

    def _to_tensor(self, frame) -> torch.Tensor:
        if torch.is_tensor(frame):
            x = frame.to(self.dtype)
            if x.dim() == 3 and x.shape[0] != 3:
                x = x.permute(2, 0, 1)
        else:
            x = torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32)).permute(2, 0, 1).to(self.dtype)
        x = x[None]
        if tuple(x.shape[1:]) != (3, *self.cfg.input_size):
            raise StreamError(f"frame shape {tuple(x.shape[1:])} does not match model input "
                              f"(3, {self.cfg.input_size[0]}, {self.cfg.input_size[1]})")
        return x

    @torch.no_grad()
    def push(self, frame, raw: bool = False) -> Optional[Tuple[int, float, Optional[float]]]:
        """Process one frame; returns (frame_index, raw_score, normalised_score) once scoreable."""
        index = self.ring.next_index
        t0 = time.perf_counter()
        if raw:
            if self.background is None:
                raise StreamError("raw frames need a background model")
            frame = preprocess(frame, self.background, self.cfg.input_size, index).pixels
        x = self._to_tensor(frame)
        t1 = time.perf_counter()
        if self.naive:
            self.frames.append(x)
            if len(self.frames) == self.cfg.k:
                codes = self._encode(torch.cat(list(self.frames)))
                self.ring.slots.clear()
                self.ring.slots.extend(codes)
            code = None
            self.ring.next_index += 1
        else:
            code = self._encode(x)[0]
            self.ring.push(code)
        t2 = time.perf_counter()
        target = self.pending.pop(index)
        ready = self.ring.full and (not self.naive or len(self.frames) == self.cfg.k)
        if ready:
            self.pending.add(index + self.cfg.t_offset, self.model.predict_latent(self.ring.stack())[0])
        t3 = time.perf_counter()
        out = None
        if target is not None:
            actual = code if code is not None else self.ring.slots[-1]
            s = latent_score(target, actual, self.metric)
            self.history.append(s)
            norm = trailing_normalize(self.history, self.window) if self.window else None
            out = (index, s, norm)
        t4 = time.perf_counter()
        for name, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            self.stage_time[name] += dt
        return out

    def run(self, frames: Iterable, raw: bool = False) -> List[Tuple[int, float, Optional[float]]]:
        out = []
        for f in frames:
            r = self.push(f, raw=raw)
            if r is not None:
                out.append(r)
        return out

    def close(self) -> int:
        """End of stream: drop predictions whose target frame never arrived."""
        return self.pending.expire()


def push_frame(frame, state: StreamScorer):
    """Functional form of :meth:`StreamScorer.push`."""
    return state.push(frame)


def stream_scores(model: AnomalyNet, frames: np.ndarray, metric: str = "latent_cosine",
                  window: Optional[int] = None, naive: bool = False):
    scorer = StreamScorer(model, metric, window=window, naive=naive)
    return scorer.run(frames), scorer


def _timed_run(model, frames, metric, warmup, naive) -> ThroughputReport:
    scorer = StreamScorer(model, metric, window=None, naive=naive)
    for f in frames[:warmup]:
        scorer.push(f)
    scorer.stage_time = {s: 0.0 for s in STAGES}
    enc_before = scorer.encode_counter
    emitted = 0
    t0 = time.perf_counter()
    for f in frames[warmup:]:
        emitted += scorer.push(f) is not None
    wall = time.perf_counter() - t0
    n = len(frames) - warmup
    return ThroughputReport("naive" if naive else "cached", n, wall, n / wall if wall > 0 else float("inf"),
                            {k: v / n for k, v in scorer.stage_time.items()}, wall / n,
                            scorer.encode_counter - enc_before, emitted)


def benchmark(model: AnomalyNet, frames: np.ndarray, warmup_frames: int = 20,
              metric: str = "latent_cosine") -> Dict[str, object]:
    """Steady-state throughput of cached vs naive streaming on background-subtracted frames."""
    if len(frames) <= warmup_frames:
        raise ValueError(f"video ({len(frames)} frames) must be longer than warmup ({warmup_frames})")
    torch.set_grad_enabled(False)
    try:
        cached = _timed_run(model, frames, metric, warmup_frames, naive=False)
        naive = _timed_run(model, frames, metric, warmup_frames, naive=True)
    finally:
        torch.set_grad_enabled(True)
    return {"cached": cached, "naive": naive, "speedup": cached.fps / naive.fps}
