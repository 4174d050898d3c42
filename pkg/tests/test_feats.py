import numpy as np
import pytest

from src.errors import FeatureError
from src.services.feats import (
    FeaturePipeline,
    add_deltas,
    kmeans_assign,
    kmeans_fit,
    mean_pool,
    merge_short_segments,
    pca_fit,
    pca_inverse,
    pca_transform,
    segment_by_change,
    segment_count_ratio,
)
from src.services.signal import StftConfig, mel_filterbank
from src.services.toylang import preset, render_utterance, sample_sentence


@pytest.fixture
def blobs(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    labels = np.repeat(np.arange(3), 40)
    return centers[labels] + 0.3 * rng.normal(size=(120, 2)), labels


def test_kmeans_recovers_separated_clusters(blobs, rng):
    frames, labels = blobs
    model = kmeans_fit(frames, 3, rng)
    assigned = kmeans_assign(model, frames)
    for cluster in range(3):
        assert len(set(assigned[labels == cluster])) == 1
    assert len(set(assigned)) == 3
    assert all(b <= a + 1e-9 for a, b in zip(model.inertia_trace, model.inertia_trace[1:]))


def test_kmeans_is_seeded(blobs):
    frames, _ = blobs
    a = kmeans_fit(frames, 3, np.random.default_rng(5))
    b = kmeans_fit(frames, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_kmeans_argument_checks(rng):
    with pytest.raises(FeatureError):
        kmeans_fit(np.zeros((10, 2)), 1, rng)
    with pytest.raises(FeatureError):
        kmeans_fit(np.zeros((2, 2)), 3, rng)
    model = kmeans_fit(np.arange(20.0).reshape(10, 2), 2, rng)
    with pytest.raises(FeatureError):
        kmeans_assign(model, np.zeros((3, 5)))


def test_segment_by_change():
    assert segment_by_change([4, 4, 1, 1, 1, 4]) == [(0, 2), (2, 5), (5, 6)]
    assert segment_by_change([7]) == [(0, 1)]
    with pytest.raises(FeatureError):
        segment_by_change([])


def test_merge_short_segments():
    assert merge_short_segments([0, 0, 0, 1, 2, 2, 2], 2) == [(0, 4), (4, 7)]
    # a short leading run is absorbed by the run after it
    assert merge_short_segments([1, 0, 0, 0], 2) == [(0, 4)]
    assert merge_short_segments([0, 1, 2], 1) == [(0, 1), (1, 2), (2, 3)]


def test_mean_pool_averages_ranges():
    frames = np.arange(12.0).reshape(6, 2)
    pooled = mean_pool(frames, [(0, 2), (2, 6)])
    np.testing.assert_allclose(pooled.vectors, [[1.0, 2.0], [7.0, 8.0]])
    assert len(pooled) == 2


@pytest.mark.parametrize("boundaries", [[(0, 2), (3, 6)], [(0, 2), (2, 5)], [(0, 0), (0, 6)]])
def test_mean_pool_rejects_bad_boundaries(boundaries):
    with pytest.raises(FeatureError):
        mean_pool(np.zeros((6, 2)), boundaries)


def test_pca_components_are_orthonormal_and_signed(rng):
    data = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    model = pca_fit(data, 3)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-10)
    assert np.all(np.diff(model.variances) <= 0)
    for row in model.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_full_rank_pca_round_trips(rng):
    data = rng.normal(size=(50, 4))
    model = pca_fit(data, 4)
    np.testing.assert_allclose(pca_inverse(model, pca_transform(model, data)), data, atol=1e-10)


def test_pca_argument_checks(rng):
    with pytest.raises(FeatureError):
        pca_fit(rng.normal(size=(10, 3)), 4)
    with pytest.raises(FeatureError):
        pca_fit(rng.normal(size=(2, 5)), 3)
    model = pca_fit(rng.normal(size=(10, 3)), 2)
    with pytest.raises(FeatureError):
        pca_transform(model, np.zeros((4, 5)))


def test_deltas_of_a_ramp_are_constant_inside():
    frames = np.arange(10.0)[:, None]
    out = add_deltas(frames)
    assert out.shape == (10, 2)
    np.testing.assert_allclose(out[2:-2, 1], 1.0)


@pytest.fixture(scope="module")
def toy_waves():
    spec = preset("unambig")
    rng = np.random.default_rng(11)
    return [render_utterance(sample_sentence(spec, rng), spec, rng) for _ in range(6)]


@pytest.fixture
def pipeline():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    return FeaturePipeline(cfg, mel_filterbank(cfg, n_mels=20, sample_rate=16000), k=6,
                           frame_dim=8, segment_dim=6)


def test_feature_pipeline_segments_cover_frames(pipeline, toy_waves):
    pipeline.fit(toy_waves, np.random.default_rng(0), max_iters=20)
    frames = pipeline.frames(toy_waves[0])
    segments = pipeline.segments(toy_waves[0])
    assert frames.shape[1] == 8
    assert segments.vectors.shape[1] == 6
    assert segments.boundaries[0][0] == 0
    assert segments.boundaries[-1][1] == len(frames)
    assert all(a[1] == b[0] for a, b in zip(segments.boundaries, segments.boundaries[1:]))
    assert len(segments) < len(frames)


def test_feature_pipeline_save_load(tmp_path, pipeline, toy_waves):
    pipeline.fit(toy_waves, np.random.default_rng(0), max_iters=20)
    path = str(tmp_path / "feats.ckpt")
    pipeline.save(path)
    fresh = FeaturePipeline(pipeline.stft_cfg, pipeline.bank, k=6, frame_dim=8, segment_dim=6).load(path)
    np.testing.assert_array_equal(fresh.segments(toy_waves[1]).vectors, pipeline.segments(toy_waves[1]).vectors)
    assert fresh.kmeans.inertia_trace == pipeline.kmeans.inertia_trace


def test_unfitted_pipeline_raises(pipeline, toy_waves):
    with pytest.raises(FeatureError):
        pipeline.frames(toy_waves[0])
    with pytest.raises(FeatureError):
        pipeline.fit([], np.random.default_rng(0))


def test_segment_count_ratio():
    assert segment_count_ratio([10, 20], [5, 5]) == pytest.approx(3.0)
    with pytest.raises(FeatureError):
        segment_count_ratio([1], [0])
