"""Time-frequency analysis, mel features and Griffin-Lim waveform reconstruction."""
import logging
import os
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import soundfile as sf
from scipy.signal import check_COLA, get_window

from src.errors import (
    EmptyWaveformError,
    FilterbankError,
    InvalidStftConfigError,
    NonColaError,
    SignalError,
    WavFormatError,
)

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
_NORM_EPS = 1e-20


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True)
class Waveform:
    """
    Mono waveform.

    Fields:
        samples: 1-D float64 array, amplitude nominally in [-1, 1]
        sample_rate: Hz
    """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError(f"Waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("Waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise SignalError(f"Invalid sample rate: {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """STFT geometry; COLA support of the window/hop pair is evaluated at construction."""
    n_fft: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    window: Literal["hann", "rectangular"] = "hann"
    cola: bool = field(init=False, default=False)

    def __post_init__(self):
        if min(self.n_fft, self.hop_length, self.win_length) <= 0:
            raise InvalidStftConfigError("STFT sizes must be positive")
        if not self.hop_length <= self.win_length <= self.n_fft:
            raise InvalidStftConfigError(
                f"Need hop_length <= win_length <= n_fft, got {self.hop_length}/{self.win_length}/{self.n_fft}"
            )
        if self.window not in ("hann", "rectangular"):
            raise InvalidStftConfigError(f"Unknown window: {self.window}")
        scipy_window = "hann" if self.window == "hann" else "boxcar"
        ok = bool(check_COLA(scipy_window, self.win_length, self.win_length - self.hop_length))
        object.__setattr__(self, "cola", ok)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self) -> np.ndarray:
        if self.window == "hann":
            return get_window("hann", self.win_length, fftbins=True).astype(np.float64)
        return np.ones(self.win_length)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (max(n_samples, self.win_length) - self.win_length) // self.hop_length


@dataclass(frozen=True)
class ComplexSpectrogram:
    """
    Complex STFT frames.

    Fields:
        values: T x (n_fft/2 + 1) complex matrix
        config: analysis geometry
        n_samples: length of the analysed waveform
        padding: "none", or "end" when a waveform shorter than one window was zero-padded
    """
    values: np.ndarray
    config: StftConfig
    n_samples: int
    padding: str = "none"

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def magnitude(self) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(np.abs(self.values), self.config)


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    frames: np.ndarray
    config: StftConfig

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.n_bins:
            raise SignalError(f"Magnitude frames must be T x {self.config.n_bins}, got {frames.shape}")
        if not np.all(np.isfinite(frames)) or np.any(frames < 0):
            raise SignalError("Magnitudes must be finite and non-negative")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class MelFilterbank:
    """
    Triangular mel filters.

    Fields:
        weights: n_mels x (n_fft/2 + 1) non-negative matrix
        centers: center frequency of each filter (Hz, increasing)
    """
    weights: np.ndarray
    centers: np.ndarray
    f_min: float
    f_max: float
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel frames (T x n_mels)."""
    frames: np.ndarray
    config: StftConfig

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise SignalError(f"Mel frames must be 2-D, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise SignalError("Mel frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ============================================================================
# Analysis / synthesis
# ============================================================================

def stft(wave: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Frames without centering: T = 1 + (L - win_length) // hop_length."""
    x = wave.samples
    if len(x) == 0:
        raise EmptyWaveformError("Cannot analyse an empty waveform")
    padding = "none"
    if len(x) < cfg.win_length:
        x = np.pad(x, (0, cfg.win_length - len(x)))
        padding = "end"
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[::cfg.hop_length]
    values = np.fft.rfft(frames * cfg.window_array(), n=cfg.n_fft, axis=1)
    return ComplexSpectrogram(values=values, config=cfg, n_samples=len(wave.samples), padding=padding)


def istft(spec: ComplexSpectrogram, cfg: Optional[StftConfig] = None, length: Optional[int] = None,
          sample_rate: int = 16000) -> Waveform:
    """Least-squares overlap-add synthesis (window-square normalization)."""
    cfg = cfg or spec.config
    if not cfg.cola:
        raise NonColaError(f"Window {cfg.window} with hop {cfg.hop_length}/{cfg.win_length} is not COLA")
    values = np.asarray(spec.values)
    if values.ndim != 2 or values.shape[1] != cfg.n_bins:
        raise SignalError(f"Spectrogram must be T x {cfg.n_bins}, got {values.shape}")
    window = cfg.window_array()
    n_frames = values.shape[0]
    total = (n_frames - 1) * cfg.hop_length + cfg.win_length
    frames = np.fft.irfft(values, n=cfg.n_fft, axis=1)[:, :cfg.win_length] * window

    out = np.zeros(total)
    norm = np.zeros(total)
    window_sq = window * window
    for t in range(n_frames):
        start = t * cfg.hop_length
        out[start:start + cfg.win_length] += frames[t]
        norm[start:start + cfg.win_length] += window_sq
    nonzero = norm > _NORM_EPS
    out[nonzero] /= norm[nonzero]
    out[~nonzero] = 0.0

    length = spec.n_samples if length is None else length
    if length > total:
        out = np.pad(out, (0, length - total))
    return Waveform(out[:length], sample_rate)


def spectral_energy(spec: ComplexSpectrogram) -> float:
    """Sum of squared windowed frame samples, computed from the one-sided spectrum."""
    power = np.abs(spec.values) ** 2
    weights = _two_sided_weights(spec.config)
    return float((power * weights).sum() / spec.config.n_fft)


def _two_sided_weights(cfg: StftConfig) -> np.ndarray:
    # DC (and Nyquist for even n_fft) appear once in the full spectrum, every other bin twice
    weights = np.full(cfg.n_bins, 2.0)
    weights[0] = 1.0
    if cfg.n_fft % 2 == 0:
        weights[-1] = 1.0
    return weights


# ============================================================================
# Mel features
# ============================================================================

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftConfig, n_mels: int = 80, f_min: float = 0.0, f_max: Optional[float] = None,
                   sample_rate: int = 16000) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the mel scale (peak weight 1)."""
    f_max = sample_rate / 2 if f_max is None else f_max
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise FilterbankError(f"Need 0 <= f_min < f_max <= sample_rate/2, got {f_min}, {f_max}")
    if n_mels < 1:
        raise FilterbankError("n_mels must be positive")

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_freqs = np.arange(cfg.n_bins) * sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lower) / (center - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if len(empty):
        raise FilterbankError(
            f"{len(empty)} of {n_mels} mel filters contain no FFT bin (n_fft={cfg.n_fft}); reduce n_mels"
        )
    return MelFilterbank(weights=weights, centers=edges[1:-1], f_min=f_min, f_max=f_max, sample_rate=sample_rate)


def wav_to_mel(wave: Waveform, cfg: StftConfig, bank: MelFilterbank) -> MelSpectrogram:
    """log(max(bank . |stft|, 1e-10)) per frame."""
    if wave.sample_rate != bank.sample_rate:
        raise SignalError(f"Sample rate {wave.sample_rate} does not match filterbank {bank.sample_rate}")
    magnitude = np.abs(stft(wave, cfg).values)
    if bank.weights.shape[1] != magnitude.shape[1]:
        raise FilterbankError("Filterbank does not match the STFT size")
    return MelSpectrogram(np.log(np.maximum(magnitude @ bank.weights.T, LOG_FLOOR)), cfg)


def mel_to_linear(mel: MelSpectrogram, bank: MelFilterbank) -> MagnitudeSpectrogram:
    """Pseudo-inverse of the filterbank applied to mel energies above the floor, clamped at 0."""
    if mel.n_mels != bank.n_mels:
        raise FilterbankError(f"Mel has {mel.n_mels} bands, filterbank has {bank.n_mels}")
    if bank.weights.shape[1] != mel.config.n_bins:
        raise FilterbankError("Filterbank does not match the STFT size of the mel spectrogram")
    energies = np.maximum(np.exp(mel.frames) - LOG_FLOOR, 0.0)
    linear = energies @ np.linalg.pinv(bank.weights).T
    return MagnitudeSpectrogram(np.maximum(linear, 0.0), mel.config)


# ============================================================================
# Griffin-Lim
# ============================================================================

def spectral_convergence(estimate: np.ndarray, target: np.ndarray) -> float:
    """||estimate - target||_F / ||target||_F over the one-sided magnitude frames."""
    num = float(np.linalg.norm(estimate - target))
    den = float(np.linalg.norm(target))
    return num / den if den > 0 else num


def griffin_lim(mag: MagnitudeSpectrogram, cfg: Optional[StftConfig] = None, n_iters: int = 60,
                seed: int = 0, length: Optional[int] = None, sample_rate: int = 16000,
                momentum: float = 0.99) -> tuple[Waveform, list[float]]:
    """Alternating projections from seeded uniform random phases.

    With momentum > 0 the phase update extrapolates from the previous projection
    (the fast variant torchaudio ships); momentum=0 is the classic algorithm.
    The returned waveform is the best iterate seen, so the trace (one value per
    iteration, spectral convergence of the returned estimate so far) never increases.
    """
    cfg = cfg or mag.config
    if n_iters < 1:
        raise SignalError("n_iters must be >= 1")
    if not 0.0 <= momentum < 1.0:
        raise SignalError(f"momentum must be in [0, 1), got {momentum}")
    if not cfg.cola:
        raise NonColaError(f"Window {cfg.window} with hop {cfg.hop_length}/{cfg.win_length} is not COLA")
    target = mag.frames
    n_frames = target.shape[0]
    n_samples = (n_frames - 1) * cfg.hop_length + cfg.win_length

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.uniform(0.0, 1.0, size=target.shape))
    previous = np.zeros_like(phase)
    trace: list[float] = []
    best_wave, best = None, np.inf
    for _ in range(n_iters):
        wave = istft(ComplexSpectrogram(target * phase, cfg, n_samples), cfg, sample_rate=sample_rate)
        rebuilt = stft(wave, cfg).values
        error = spectral_convergence(np.abs(rebuilt), target)
        if best_wave is None or error < best:
            best_wave, best = wave, error
        trace.append(best)
        step = rebuilt - (momentum / (1.0 + momentum)) * previous if momentum else rebuilt
        phase = step / (np.abs(step) + 1e-16)
        previous = rebuilt

    samples = best_wave.samples
    if length is not None:
        samples = samples[:length] if length <= len(samples) else np.pad(samples, (0, length - len(samples)))
    logger.debug("Griffin-Lim: %d iterations, final spectral convergence %.4f", n_iters, trace[-1])
    return Waveform(samples, sample_rate), trace


# ============================================================================
# WAV I/O (PCM 16-bit mono)
# ============================================================================

def write_wav(path: str, wave: Waveform) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sf.write(path, np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype="PCM_16", format="WAV")


def read_wav(path: str, expected_rate: Optional[int] = None) -> Waveform:
    """Read a PCM16 mono WAV file; other rates/layouts are rejected (no resampling)."""
    try:
        info = sf.info(path)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise WavFormatError(f"Cannot read WAV header of {path}: {e}") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise WavFormatError(f"{path}: expected PCM_16 WAV, got {info.format}/{info.subtype}")
    if info.channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {info.channels} channels")
    if expected_rate is not None and info.samplerate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {info.samplerate} != configured {expected_rate}")
    samples, rate = sf.read(path, dtype="float64", always_2d=False)
    return Waveform(samples, rate)
