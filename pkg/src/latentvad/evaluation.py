"""Frame-level AUC and the experiment drivers (distortion sweep, low fps, moving objects)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import stats

from .data.distort import DistortionSpec, distort_video
from .data.frames import BackgroundModel, Video, compute_background, count_samples, subtract_background
from .data.synthetic import SyntheticSpec, generate_dataset
from .model import AnomalyNet, ModelConfig
from .scoring import AnomalyScoreSeries, canonical_metric, normalize_scores, score_video
from .training import TrainSchedule, train

log = logging.getLogger(__name__)

Normalization = Union[None, str, int]


class AucUndefined(ValueError):
    pass


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{len(self.scores)} scores vs {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")


def frame_auc(data, labels=None) -> float:
    """ROC AUC via the Mann-Whitney statistic with average ranks for ties."""
    if not isinstance(data, LabeledScores):
        data = LabeledScores(data, labels)
    pos = data.labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise AucUndefined("AUC undefined: labels contain a single class")
    ranks = stats.rankdata(data.scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class AucResult:
    auc: float
    n_runs: int = 1
    ci95_halfwidth: float = 0.0
    runs: Tuple[float, ...] = ()


def multi_run_auc(run_aucs: Sequence[float]) -> AucResult:
    """Mean AUC with a Student-t 95% confidence half-width."""
    a = np.asarray(run_aucs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("need at least one run")
    n = a.size
    ci = 0.0
    if n >= 2:
        ci = float(stats.t.ppf(0.975, n - 1) * a.std(ddof=1) / np.sqrt(n))
    return AucResult(float(a.mean()), n, ci, tuple(float(x) for x in a))


def _normalized(series: AnomalyScoreSeries, normalization: Normalization) -> np.ndarray:
    if normalization is None or normalization == "none":
        return series.raw_scores
    if normalization == "video":
        return normalize_scores(series.raw_scores)
    return normalize_scores(series.raw_scores, int(normalization))


def pool_scores(series: Sequence[AnomalyScoreSeries], videos: Sequence[Video],
                normalization: Normalization = "video") -> LabeledScores:
    """Normalise per video, then pool all scored frames with their labels.

    Frames before each series' first scoreable frame are dropped.
    """
    scores, labels = [], []
    for s, v in zip(series, videos):
        if v.labels is None:
            raise ValueError(f"video {v.video_id} has no labels")
        if len(s) == 0:
            continue
        scores.append(_normalized(s, normalization))
        labels.append(v.labels[s.positions])
    if not scores:
        raise AucUndefined("no scoreable frames")
    return LabeledScores(np.concatenate(scores), np.concatenate(labels))


def score_videos(model: AnomalyNet, videos: Sequence[Video], background: BackgroundModel,
                 metric: str, stride: int = 1) -> List[AnomalyScoreSeries]:
    """Score raw [0, 1] videos (background subtraction is applied here)."""
    return [score_video(model, subtract_background(v, background), metric, stride=stride, normalize=False)
            for v in videos]


def evaluate(model: AnomalyNet, videos: Sequence[Video], background: BackgroundModel,
             metric: str = "latent_mse", normalization: Normalization = "video", stride: int = 1) -> float:
    series = score_videos(model, videos, background, metric, stride)
    return frame_auc(pool_scores(series, videos, normalization))


@dataclass
class SweepResult:
    """Results keyed by a tuple of condition values; ``keys`` names the tuple fields."""

    keys: Tuple[str, ...]
    results: Dict[tuple, AucResult] = field(default_factory=dict)
    errors: Dict[tuple, str] = field(default_factory=dict)

    def add(self, condition: tuple, result: AucResult) -> None:
        if condition in self.results:
            raise ValueError(f"duplicate condition {condition}")
        self.results[condition] = result

    def rows(self) -> List[Dict]:
        out = []
        for cond, r in self.results.items():
            row = dict(zip(self.keys, cond))
            row.update(auc=r.auc, ci95=r.ci95_halfwidth, n_runs=r.n_runs)
            out.append(row)
        for cond, err in self.errors.items():
            row = dict(zip(self.keys, cond))
            row.update(auc=float("nan"), ci95=float("nan"), n_runs=0, error=err)
            out.append(row)
        return out


def robustness_sweep(model: AnomalyNet, background: BackgroundModel, test_videos: Sequence[Video],
                     brightness_levels: Sequence[float] = (1.0, 0.8, 0.6), rain_levels: Sequence[str] = ("none", "heavy"),
                     metrics: Sequence[str] = ("latent_mse", "pixel_prediction_mse"),
                     blur_levels: Sequence[float] = (0.0,), seed: int = 0,
                     normalization: Normalization = "video", stride: int = 1) -> SweepResult:
    """AUC on distorted copies of raw [0, 1] test videos, for a model trained on clean data.

    Distortion happens before background subtraction; the background stays the
    clean training mean.  A failing condition is recorded in ``errors`` and the
    sweep continues.
    """
    metrics = [canonical_metric(m) for m in metrics]
    res = SweepResult(("brightness", "rain", "blur", "metric"))
    for b in brightness_levels:
        for rain in rain_levels:
            for blur in blur_levels:
                spec = DistortionSpec(brightness=b, blur_sigma=blur, rain_level=rain)
                distorted = [v if spec.is_identity else
                             v.with_frames(distort_video(v.frames, spec, seed=_video_seed(seed, i)))
                             for i, v in enumerate(test_videos)]
                for m in metrics:
                    cond = (b, rain, blur, m)
                    try:
                        auc = evaluate(model, distorted, background, m, normalization, stride)
                        res.add(cond, AucResult(auc))
                    except Exception as exc:
                        log.warning("condition %s failed: %s", cond, exc)
                        res.errors[cond] = str(exc)
    return res


def _video_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def lowfps_experiment(train_videos: Sequence[Video], test_videos: Sequence[Video], d_values: Sequence[int],
                      cfg: ModelConfig, schedule: TrainSchedule,
                      metrics: Sequence[str] = ("latent_mse", "pixel_prediction_mse"),
                      seeds: Sequence[int] = (0,), normalization: Normalization = "video",
                      **train_kwargs) -> SweepResult:
    """Train and test on every d-th frame for each d; one AUC series per metric.

    Conditions where no video is long enough after subsampling are skipped with
    a warning (recorded in ``errors``).
    """
    metrics = [canonical_metric(m) for m in metrics]
    res = SweepResult(("d", "metric"))
    background = compute_background(train_videos)
    train_sub = [subtract_background(v, background) for v in train_videos]
    for d in d_values:
        if d < 1:
            raise ValueError(f"d must be >= 1, got {d}")
        n_train = sum(count_samples(len(v), cfg.k, cfg.t_offset, d) for v in train_videos)
        n_test = sum(count_samples(len(v), cfg.k, cfg.t_offset, d) for v in test_videos)
        if n_train == 0 or n_test == 0:
            log.warning("d=%d: videos too short after subsampling, skipped", d)
            for m in metrics:
                res.errors[(d, m)] = "videos too short after subsampling"
            continue
        per_metric = {m: [] for m in metrics}
        for seed in seeds:
            model = train(train_sub, cfg, schedule, stride=d, seed=seed, **train_kwargs).model
            test_d = [v.subsample(d) for v in test_videos]
            for m in metrics:
                try:
                    per_metric[m].append(evaluate(model, test_d, background, m, normalization))
                except AucUndefined as exc:
                    res.errors[(d, m)] = str(exc)
        for m in metrics:
            if per_metric[m]:
                res.add((d, m), multi_run_auc(per_metric[m]))
    return res


def default_anomaly_specs(normal: SyntheticSpec) -> Dict[str, SyntheticSpec]:
    """Unseen shapes, unseen digits and unseen speed, each with held-out glyphs."""
    unseen_digits = tuple(str(d) for d in range(10) if str(d) not in normal.normal_objects)
    return {
        "shapes": replace(normal, object_set=("circle", "square"), digit_split="test"),
        "speed": replace(normal, speed=2 * normal.speed, digit_split="test"),
        "digits": replace(normal, object_set=unseen_digits, digit_split="test"),
    }


@dataclass
class MovingObjectsResult:
    aucs: Dict[Tuple[str, str], AucResult]  # (anomaly axis, metric) -> result
    model: AnomalyNet
    background: BackgroundModel
    test_sets: Dict[str, List[Video]]
    mean_raw: Dict[Tuple[str, str], Dict[str, float]] = field(default_factory=dict)
    train_reports: list = field(default_factory=list)

    def rows(self) -> List[Dict]:
        return [dict(axis=a, metric=m, auc=r.auc, ci95=r.ci95_halfwidth, n_runs=r.n_runs)
                for (a, m), r in self.aucs.items()]


def movingmnist_experiment(normal: SyntheticSpec, cfg: ModelConfig, schedule: TrainSchedule,
                           anomaly_specs: Optional[Dict[str, SyntheticSpec]] = None,
                           n_train: int = 48, n_test_normal: int = 12, n_test_anomalous: int = 12,
                           metrics: Sequence[str] = ("latent_mse",), seeds: Sequence[int] = (0,),
                           normalization: Normalization = None, **train_kwargs) -> MovingObjectsResult:
    """Train on normal moving objects only and measure AUC per anomaly axis.

    Each test set mixes held-out normal videos with anomalous videos of one
    axis.  The returned model/background are those of the last seed.
    """
    if anomaly_specs is None:
        anomaly_specs = default_anomaly_specs(normal)
    for name, spec in anomaly_specs.items():
        if set(spec.object_set) <= set(normal.normal_objects) and spec.speed in normal.normal_speeds:
            raise ValueError(f"anomaly spec {name!r} differs from the normal spec in neither class nor speed")
    metrics = [canonical_metric(m) for m in metrics]
    train_videos = generate_dataset(replace(normal, digit_split="train"), n_train, tag="train-")
    normal_test = generate_dataset(replace(normal, digit_split="test", seed=normal.seed + 1), n_test_normal,
                                   tag="test-normal-")
    test_sets = {}
    for i, (name, spec) in enumerate(anomaly_specs.items()):
        anomalous = generate_dataset(replace(spec, seed=normal.seed + 100 + i), n_test_anomalous,
                                     tag=f"test-{name}-")
        test_sets[name] = normal_test + anomalous

    background = compute_background(train_videos)
    train_sub = [subtract_background(v, background) for v in train_videos]
    runs: Dict[Tuple[str, str], List[float]] = {}
    mean_raw: Dict[Tuple[str, str], Dict[str, float]] = {}
    model, reports = None, []
    for seed in seeds:
        tr = train(train_sub, cfg, schedule, seed=seed, **train_kwargs)
        model, reports = tr.model, tr.reports
        for name, vids in test_sets.items():
            for m in metrics:
                series = score_videos(model, vids, background, m)
                pooled = pool_scores(series, vids, normalization)
                runs.setdefault((name, m), []).append(frame_auc(pooled))
                raw = np.concatenate([s.raw_scores for s in series])
                lab = np.concatenate([v.labels[s.positions] for s, v in zip(series, vids)])
                mean_raw[(name, m)] = {"normal": float(raw[lab == 0].mean()), "anomalous": float(raw[lab == 1].mean())}
    aucs = {key: multi_run_auc(v) for key, v in runs.items()}
    return MovingObjectsResult(aucs, model, background, test_sets, mean_raw, reports)


@torch.no_grad()
def frame_grid(model: AnomalyNet, video: Video, background: BackgroundModel, position: Optional[int] = None):
    """Input / reconstruction / prediction / prediction-error images for one target frame.

    Returns a dict of H x W x 3 arrays in display space (background added back).
    """
    cfg = model.cfg
    model.eval()
    sub = subtract_background(video, background)
    if position is None:
        position = cfg.frame_offset
    if position < cfg.frame_offset or position >= len(video):
        raise ValueError(f"position {position} is not scoreable")
    dtype = next(model.parameters()).dtype
    start = position - cfg.frame_offset
    x = torch.from_numpy(sub.frames[start:start + cfg.k]).permute(0, 3, 1, 2).to(dtype)
    target = torch.from_numpy(sub.frames[[position - 1, position]]).permute(0, 3, 1, 2).to(dtype)
    z, pyr = model.encode(x)
    z_hat = model.predict_latent(z[None])
    zt, pyr_t = model.encode(target)
    recon = model.decode(zt[1:], [p[:1] for p in pyr_t])
    pred = model.decode(z_hat, [p[-1:] for p in pyr])
    bg = background.mean_frame

    def show(t):
        return np.clip(t[0].permute(1, 2, 0).double().numpy() + bg, 0.0, 1.0)

    actual = video.frames[position]
    pred_img = show(pred)
    return {"input": actual, "reconstruction": show(recon), "prediction": pred_img,
            "error": np.abs(pred_img - actual)}
