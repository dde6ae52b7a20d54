import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentvad.data import compute_background, subtract_background
from latentvad.scoring import score_video
from latentvad.streaming import LatentRing, PendingTargets, StreamError, StreamScorer, benchmark, stream_scores

from conftest import random_video


@pytest.mark.parametrize("metric", ["latent_mse", "latent_cosine"])
def test_stream_matches_batch(tiny_model, metric):
    v = random_video(30)
    batch = score_video(tiny_model, v, metric, normalize=False)
    out, scorer = stream_scores(tiny_model, v.frames, metric)
    assert [i for i, _, _ in out] == list(batch.frame_indices)
    np.testing.assert_allclose([s for _, s, _ in out], batch.raw_scores, rtol=1e-5, atol=1e-7)
    assert scorer.encode_counter == 30


def test_naive_mode_agrees_but_encodes_more(tiny_model):
    v = random_video(25)
    cached, c = stream_scores(tiny_model, v.frames, "latent_mse")
    naive, n = stream_scores(tiny_model, v.frames, "latent_mse", naive=True)
    np.testing.assert_allclose([s for _, s, _ in naive], [s for _, s, _ in cached], rtol=1e-5, atol=1e-7)
    k = tiny_model.cfg.k
    assert c.encode_counter == 25
    assert n.encode_counter == k * (25 - k + 1)


def test_raw_frames_use_background(tiny_model):
    v = random_video(20)
    bg = compute_background([v])
    batch = score_video(tiny_model, subtract_background(v, bg), "latent_mse", normalize=False)
    raw_u8 = np.round(v.frames * 255).astype(np.uint8)
    scorer = StreamScorer(tiny_model, "latent_mse", window=None, background=bg)
    out = scorer.run(raw_u8, raw=True)
    np.testing.assert_allclose([s for _, s, _ in out], batch.raw_scores, rtol=1e-2, atol=1e-4)


def test_online_normalization_in_unit_range(tiny_model):
    out, _ = stream_scores(tiny_model, random_video(30).frames, "latent_mse", window=5)
    assert all(0.0 <= n <= 1.0 for _, _, n in out)


def test_close_expires_pending(tiny_model):
    scorer = StreamScorer(tiny_model, "latent_mse")
    scorer.run(random_video(10).frames)
    # predictions made at frames k-1..9 target frames up to 9 + t_offset
    assert scorer.close() == tiny_model.cfg.t_offset
    assert len(scorer.pending) == 0


def test_rejects_pixel_metric_and_wrong_size(tiny_model):
    with pytest.raises(ValueError):
        StreamScorer(tiny_model, "pixel_prediction_mse")
    with pytest.raises(StreamError):
        StreamScorer(tiny_model).push(np.zeros((8, 8, 3), dtype=np.float32))
    with pytest.raises(StreamError):
        StreamScorer(tiny_model).push(np.zeros((16, 16, 3), dtype=np.uint8), raw=True)


def test_pending_targets():
    p = PendingTargets()
    p.add(5, torch.zeros(1))
    with pytest.raises(StreamError):
        p.add(5, torch.zeros(1))
    assert p.pop(4) is None
    assert p.pop(5) is not None and len(p) == 0


@settings(max_examples=50, deadline=None)
@given(cap=st.integers(1, 8), n=st.integers(0, 30))
def test_ring_keeps_last_codes_in_order(cap, n):
    ring = LatentRing(cap)
    for i in range(n):
        ring.push(torch.tensor([float(i)]))
    assert len(ring) == min(cap, n)
    assert ring.next_index == n
    if n:
        assert ring.stack()[0, :, 0].tolist() == [float(i) for i in range(max(0, n - cap), n)]


def test_benchmark_reports(tiny_model):
    rep = benchmark(tiny_model, random_video(40).frames, warmup_frames=10, metric="latent_mse")
    cached, naive = rep["cached"], rep["naive"]
    assert cached.frames == naive.frames == 30
    assert cached.encode_count == 30
    assert sum(cached.stage_latency.values()) <= cached.frame_latency * 1.001
    assert "fps" in cached.as_text()
    with pytest.raises(ValueError):
        benchmark(tiny_model, random_video(5).frames, warmup_frames=10)
