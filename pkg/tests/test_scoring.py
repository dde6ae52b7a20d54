from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from latentvad.data import make_samples, stack_samples
from latentvad.scoring import (Region, canonical_metric, latent_cosine, latent_mse, localize, localize_video,
                               normalize_scores, pixel_scores, read_scores_csv, score_video, trailing_normalize,
                               write_regions_csv, write_scores_csv)

from conftest import random_video


def test_metric_aliases():
    assert canonical_metric("pixel_prediction") == "pixel_prediction_mse"
    assert canonical_metric("latent_cosine") == "latent_cosine"
    with pytest.raises(ValueError):
        canonical_metric("psnr")


def test_latent_mse_values():
    z = np.random.default_rng(0).normal(size=(4, 3, 3))
    assert latent_mse(z, z) == 0.0
    assert latent_mse(z + 1.0, z) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        latent_mse(z, z[:2])


def test_latent_cosine_values():
    z = np.random.default_rng(1).normal(size=(2, 5))
    assert latent_cosine(z, z) == pytest.approx(0.0, abs=1e-12)
    assert latent_cosine(-z, z) == pytest.approx(2.0, abs=1e-12)
    assert latent_cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == pytest.approx(1.0, abs=1e-12)
    assert latent_cosine(3.0 * z, z) == pytest.approx(0.0, abs=1e-12)


def test_latent_cosine_zero_norm():
    with pytest.raises(ValueError, match="undefined cosine"):
        latent_cosine(np.zeros(4), np.ones(4))


def test_metrics_accept_tensors():
    z = torch.randn(8, 2, 2)
    assert latent_mse(z, z + 2) == pytest.approx(4.0, rel=1e-6)


def test_normalize_example_and_flat():
    np.testing.assert_allclose(normalize_scores([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_scores([3.0, 3.0, 3.0]), [0, 0, 0])
    with pytest.raises(ValueError):
        normalize_scores([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(0.01, 100), st.floats(-100, 100),
       st.one_of(st.none(), st.integers(1, 20)))
def test_normalize_affine_invariant(xs, a, b, window):
    x = np.array(xs)
    # spreads far below float64 resolution of the shifted series are absorbed by rounding
    assume(np.ptp(x) == 0 or np.ptp(x) > 1e-6)
    n1 = normalize_scores(x, window)
    n2 = normalize_scores(a * x + b, window)
    assert np.all((n1 >= 0) & (n1 <= 1))
    np.testing.assert_allclose(n1, n2, atol=1e-6)


def test_window_normalization_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    w = 5
    out = normalize_scores(x, w)
    for i in range(len(x)):
        lo, hi = max(0, i - w // 2), min(len(x), i - w // 2 + w)
        seg = x[lo:hi]
        expected = 0.0 if seg.max() == seg.min() else (x[i] - seg.min()) / (seg.max() - seg.min())
        assert out[i] == pytest.approx(expected, abs=1e-12)


def test_trailing_normalize():
    assert trailing_normalize([1, 5, 3], 3) == pytest.approx(0.5)
    assert trailing_normalize([1, 5, 3], 1) == 0.0
    assert trailing_normalize([9, 1, 2], 2) == 1.0


def components_oracle(mask):
    """8-connected components by breadth-first search."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                q, pix = deque([(y, x)]), []
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    pix.append((cy, cx))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                q.append((ny, nx))
                comps.append(pix)
    return comps


def test_localize_matches_bfs_oracle():
    rng = np.random.default_rng(3)
    for trial in range(20):
        err = rng.uniform(0, 1, (24, 24)) * (rng.uniform(0, 1, (24, 24)) > 0.6)
        thr, min_area = 0.5, 3
        got = localize(err, thr, min_area)
        expected = []
        for pix in components_oracle(err > thr):
            if len(pix) < min_area:
                continue
            ys, xs = zip(*pix)
            expected.append(Region(min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1,
                                   float(np.mean([err[p] for p in pix])), len(pix)))
        expected.sort(key=lambda r: r.mean_error, reverse=True)
        assert len(got) == len(expected)
        for g, e in zip(got, expected):
            assert (g.x, g.y, g.w, g.h, g.area) == (e.x, e.y, e.w, e.h, e.area)
            assert g.mean_error == pytest.approx(e.mean_error)


def test_localize_diagonal_is_one_region():
    err = np.eye(6)
    regions = localize(err, 0.5, min_area=1)
    assert len(regions) == 1 and (regions[0].w, regions[0].h) == (6, 6)


def test_score_video_alignment(tiny_model):
    cfg = tiny_model.cfg
    v = random_video(20)
    s = score_video(tiny_model, v, "latent_mse")
    assert len(s) == 20 - cfg.frame_offset
    assert s.frame_indices[0] == cfg.frame_offset
    # first score: predict from frames 0..k-1, compare with frame k-1+t_offset
    with torch.no_grad():
        x = torch.from_numpy(v.frames).permute(0, 3, 1, 2)
        z, _ = tiny_model.encode(x)
        z_hat = tiny_model.predict_latent(z[None, :cfg.k])[0]
    assert s.raw_scores[0] == pytest.approx(latent_mse(z_hat, z[cfg.frame_offset]), rel=1e-5)
    assert s.normalized_scores.min() == 0.0 and s.normalized_scores.max() == 1.0


def test_score_video_with_stride_reports_source_indices(tiny_model):
    s = score_video(tiny_model, random_video(40), "latent_cosine", stride=2)
    assert s.frame_indices[0] == 2 * tiny_model.cfg.frame_offset
    assert np.all(np.diff(s.frame_indices) == 2)


def test_short_video_scores_empty(tiny_model):
    assert len(score_video(tiny_model, random_video(4), "latent_mse")) == 0


def test_pixel_metrics_match_clip_scores(tiny_model):
    cfg = tiny_model.cfg
    v = random_video(14)
    clips = stack_samples(make_samples(v, cfg.k, cfg.t_offset))
    for metric, mode in (("pixel_prediction_mse", "prediction"), ("pixel_reconstruction_mse", "reconstruction")):
        s = score_video(tiny_model, v, metric, normalize=False)
        np.testing.assert_allclose(s.raw_scores, pixel_scores(tiny_model, clips, mode), rtol=1e-4)


def test_size_mismatch(tiny_model):
    with pytest.raises(ValueError, match="does not match"):
        score_video(tiny_model, random_video(20, size=(32, 32)))


def test_scores_csv_roundtrip(tmp_path, tiny_model):
    s = score_video(tiny_model, random_video(20, video_id="a"), "latent_cosine")
    write_scores_csv(tmp_path / "s.csv", [s])
    (back,) = read_scores_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.raw_scores, s.raw_scores)
    np.testing.assert_array_equal(back.frame_indices, s.frame_indices)
    assert back.video_id == "a" and back.metric == "latent_cosine"


def test_localize_video_and_regions_csv(tmp_path, tiny_model):
    v = random_video(12)
    out = localize_video(tiny_model, v, quantile=0.9, min_area=1)
    assert len(out) == 12 - tiny_model.cfg.frame_offset
    assert out[0][0] == tiny_model.cfg.frame_offset
    write_regions_csv(tmp_path / "r.csv", "v", out)
    write_regions_csv(tmp_path / "r.csv", "w", out[:1])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "video_id,frame_index,x,y,w,h,mean_error"
    assert sum(1 for line in lines if line.startswith("video_id")) == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_metric_invariances(seed, s):
    rng = np.random.default_rng(seed)
    p, a = rng.normal(size=40), rng.normal(size=40)
    perm = rng.permutation(40)
    assert latent_mse(p[perm], a[perm]) == pytest.approx(latent_mse(p, a), rel=1e-12)
    assert latent_cosine(p[perm], a[perm]) == pytest.approx(latent_cosine(p, a), abs=1e-12)
    assert latent_cosine(s * p, a) == pytest.approx(latent_cosine(p, a), abs=1e-12)
    assert latent_mse(s * p, s * a) == pytest.approx(s ** 2 * latent_mse(p, a), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(1, 50))
def test_window_properties(xs, window):
    x = np.array(xs)
    if window >= len(x):
        np.testing.assert_array_equal(normalize_scores(x, window), normalize_scores(x))
    if x.max() > x.min():
        assert np.argmax(normalize_scores(x)) == np.argmax(x)
