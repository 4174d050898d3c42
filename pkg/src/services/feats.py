"""Frame features, k-means, change-point segmentation, mean pooling and PCA."""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from sklearn.decomposition import PCA

from src.errors import FeatureError
from src.services.grad import load_checkpoint, save_checkpoint
from src.services.signal import MelFilterbank, StftConfig, Waveform, wav_to_mel

logger = logging.getLogger(__name__)

Boundaries = list[tuple[int, int]]


# ============================================================================
# k-means
# ============================================================================

@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _nearest(frames: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = cdist(frames, centroids, metric="sqeuclidean")
    ids = np.argmin(dist, axis=1)  # first minimum -> lowest id on ties
    return ids, dist[np.arange(len(frames)), ids]


def kmeans_fit(frames: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 50) -> KMeansModel:
    """k-means++ seeding then Lloyd iterations until the assignment is a fixpoint."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise FeatureError(f"frames must be T x d, got {frames.shape}")
    if k < 2:
        raise FeatureError("k must be at least 2")
    if frames.shape[0] < k:
        raise FeatureError(f"Need at least k={k} frames, got {frames.shape[0]}")

    centroids, _ = kmeans_plusplus(frames, n_clusters=k, random_state=int(rng.integers(2**31 - 1)))
    centroids = centroids.astype(np.float64)
    trace: list[float] = []
    assignment = None
    for iteration in range(max_iters):
        ids, d2 = _nearest(frames, centroids)
        trace.append(float(d2.sum()))
        if assignment is not None and np.array_equal(ids, assignment):
            break
        assignment = ids
        counts = np.bincount(ids, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, ids, frames)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]

        empty = np.flatnonzero(~filled)
        if len(empty):
            order = np.argsort(-d2, kind="stable")
            for cluster, point in zip(empty, order):
                centroids[cluster] = frames[point]
            logger.warning("k-means iteration %d: reseeded %d empty clusters", iteration, len(empty))
            assignment = None
    return KMeansModel(centroids=centroids, inertia_trace=trace)


def kmeans_assign(model: KMeansModel, frames: np.ndarray) -> np.ndarray:
    """Nearest centroid per frame (Euclidean), ties resolved to the lowest id."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != model.dim:
        raise FeatureError(f"Frames of shape {frames.shape} do not match centroid dim {model.dim}")
    return _nearest(frames, model.centroids)[0]


# ============================================================================
# Segmentation and pooling
# ============================================================================

@dataclass(frozen=True)
class SegmentSequence:
    """Per-segment vectors (S x r) with the frame range of every segment."""
    vectors: np.ndarray
    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.vectors) != len(self.boundaries):
            raise FeatureError("One vector per boundary range required")

    def __len__(self) -> int:
        return len(self.boundaries)


def segment_by_change(ids: Sequence[int]) -> Boundaries:
    """Maximal runs of equal ids as [start, end) frame ranges."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise FeatureError("Cannot segment an empty sequence")
    cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(ids)]])
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def merge_short_segments(ids: Sequence[int], min_frames: int) -> Boundaries:
    """Runs shorter than min_frames are absorbed into the preceding run (the following one at the start)."""
    boundaries = segment_by_change(ids)
    if min_frames <= 1 or len(boundaries) == 1:
        return boundaries
    merged: Boundaries = []
    for start, end in boundaries:
        if merged and end - start < min_frames:
            merged[-1] = (merged[-1][0], end)
        elif merged and merged[-1][1] - merged[-1][0] < min_frames:
            merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    return merged


def _check_boundaries(boundaries: Sequence[tuple[int, int]], n_frames: int) -> None:
    pos = 0
    for start, end in boundaries:
        if start != pos or end <= start:
            raise FeatureError(f"Boundaries must be contiguous non-empty ranges, got ({start}, {end}) at {pos}")
        pos = end
    if pos != n_frames:
        raise FeatureError(f"Boundaries cover {pos} frames, expected {n_frames}")


def mean_pool(frames: np.ndarray, boundaries: Sequence[tuple[int, int]]) -> SegmentSequence:
    frames = np.asarray(frames, dtype=np.float64)
    _check_boundaries(boundaries, frames.shape[0])
    vectors = np.stack([frames[s:e].mean(axis=0) for s, e in boundaries])
    return SegmentSequence(vectors, tuple(tuple(b) for b in boundaries))


# ============================================================================
# PCA
# ============================================================================

@dataclass
class PcaModel:
    """
    Fields:
        mean: d-vector
        components: r x d, orthonormal rows, eigenvalue-descending
        variances: eigenvalue of each component
    """
    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    @property
    def rank(self) -> int:
        return self.components.shape[0]


def pca_fit(data: np.ndarray, r: int) -> PcaModel:
    """Top-r principal axes; each component's largest-magnitude coordinate is made positive."""
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if r > d:
        raise FeatureError(f"PCA rank {r} exceeds dimension {d}")
    if n < r:
        raise FeatureError(f"PCA needs at least {r} rows, got {n}")
    pca = PCA(n_components=r, svd_solver="full").fit(data)
    components = pca.components_.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=pca.mean_.copy(), components=components, variances=pca.explained_variance_.copy())


def pca_transform(model: PcaModel, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise FeatureError(f"Data of shape {data.shape} does not match PCA dim {model.dim}")
    return (data - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    return reduced @ model.components + model.mean


# ============================================================================
# Frame feature pipeline
# ============================================================================

def add_deltas(frames: np.ndarray, width: int = 2) -> np.ndarray:
    """Append regression deltas over +-width frames (edges repeated)."""
    padded = np.pad(frames, ((width, width), (0, 0)), mode="edge")
    n = len(frames)
    num = sum(k * (padded[width + k:width + k + n] - padded[width - k:width - k + n]) for k in range(1, width + 1))
    return np.hstack([frames, num / (2.0 * sum(k * k for k in range(1, width + 1)))])


class FeaturePipeline:
    """
    Log-mel frames -> frame PCA (HMM/CTC input) -> k-means -> segments -> segment PCA (GAN input).

    Fitted on speech audio only.
    """

    def __init__(self, stft_cfg: StftConfig, bank: MelFilterbank, k: int, frame_dim: int = 16,
                 segment_dim: int = 16, min_segment_frames: int = 2, deltas: bool = False):
        self.stft_cfg = stft_cfg
        self.bank = bank
        self.k = k
        self.frame_dim = frame_dim
        self.segment_dim = segment_dim
        self.min_segment_frames = min_segment_frames
        self.deltas = deltas
        self.frame_pca: Optional[PcaModel] = None
        self.kmeans: Optional[KMeansModel] = None
        self.segment_pca: Optional[PcaModel] = None

    def raw_frames(self, wave: Waveform) -> np.ndarray:
        mel = wav_to_mel(wave, self.stft_cfg, self.bank).frames
        return add_deltas(mel) if self.deltas else mel

    def fit(self, waves: Sequence[Waveform], rng: np.random.Generator, max_iters: int = 50) -> "FeaturePipeline":
        raw = [self.raw_frames(w) for w in waves]
        if not raw:
            raise FeatureError("No audio to fit features on")
        stacked = np.vstack(raw)
        self.frame_pca = pca_fit(stacked, min(self.frame_dim, stacked.shape[1]))
        reduced = [pca_transform(self.frame_pca, f) for f in raw]
        self.kmeans = kmeans_fit(np.vstack(reduced), self.k, rng, max_iters=max_iters)
        pooled = [self._pool(f).vectors for f in reduced]
        all_segments = np.vstack(pooled)
        self.segment_pca = pca_fit(all_segments, min(self.segment_dim, all_segments.shape[1], all_segments.shape[0]))
        logger.info(
            "Features fitted: %d utterances, %d frames, %d segments, k=%d",
            len(raw), len(stacked), len(all_segments), self.k,
        )
        return self

    def _require_fitted(self) -> None:
        if self.frame_pca is None or self.kmeans is None or self.segment_pca is None:
            raise FeatureError("FeaturePipeline is not fitted")

    def _pool(self, reduced: np.ndarray) -> SegmentSequence:
        ids = kmeans_assign(self.kmeans, reduced)
        return mean_pool(reduced, merge_short_segments(ids, self.min_segment_frames))

    def frames(self, wave: Waveform) -> np.ndarray:
        """PCA-reduced framewise features (T x frame_dim)."""
        self._require_fitted()
        return pca_transform(self.frame_pca, self.raw_frames(wave))

    def segments(self, wave: Waveform) -> SegmentSequence:
        self._require_fitted()
        pooled = self._pool(self.frames(wave))
        return SegmentSequence(pca_transform(self.segment_pca, pooled.vectors), pooled.boundaries)

    def save(self, path: str) -> None:
        self._require_fitted()
        arrays = {
            "frame_pca.mean": self.frame_pca.mean,
            "frame_pca.components": self.frame_pca.components,
            "frame_pca.variances": self.frame_pca.variances,
            "kmeans.centroids": self.kmeans.centroids,
            "segment_pca.mean": self.segment_pca.mean,
            "segment_pca.components": self.segment_pca.components,
            "segment_pca.variances": self.segment_pca.variances,
        }
        save_checkpoint(path, arrays, meta={"inertia_trace": self.kmeans.inertia_trace})

    def load(self, path: str) -> "FeaturePipeline":
        arrays, meta = load_checkpoint(path)
        self.frame_pca = PcaModel(arrays["frame_pca.mean"], arrays["frame_pca.components"],
                                  arrays["frame_pca.variances"])
        self.kmeans = KMeansModel(arrays["kmeans.centroids"], list(meta.get("inertia_trace", [])))
        self.segment_pca = PcaModel(arrays["segment_pca.mean"], arrays["segment_pca.components"],
                                    arrays["segment_pca.variances"])
        return self


def segment_count_ratio(segment_counts: Sequence[int], phone_counts: Sequence[int]) -> float:
    """Mean segments per utterance over mean phones per utterance."""
    if not phone_counts or sum(phone_counts) == 0:
        raise FeatureError("No reference phone counts")
    return float(np.mean(segment_counts) / np.mean(phone_counts))
