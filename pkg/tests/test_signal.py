import numpy as np
import pytest

from src.errors import (
    EmptyWaveformError,
    FilterbankError,
    InvalidStftConfigError,
    NonColaError,
    SignalError,
    WavFormatError,
)
from src.services.signal import (
    ComplexSpectrogram,
    MagnitudeSpectrogram,
    MelSpectrogram,
    StftConfig,
    Waveform,
    griffin_lim,
    istft,
    mel_filterbank,
    mel_to_linear,
    read_wav,
    spectral_convergence,
    spectral_energy,
    stft,
    wav_to_mel,
    write_wav,
)

from src.services.toylang import preset, render_utterance, sample_sentence

SR = 16000


@pytest.fixture
def chirp():
    t = np.arange(8000) / SR
    samples = 0.5 * np.sin(2 * np.pi * (200 + 1500 * t) * t) + 0.05 * np.random.default_rng(0).normal(size=len(t))
    return Waveform(samples, SR)


def test_frame_count_without_centering(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    spec = stft(chirp, cfg)
    assert spec.n_frames == 1 + (8000 - 512) // 128
    assert spec.values.shape[1] == 257
    assert spec.padding == "none"


def test_short_waveform_is_padded_to_one_frame():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    spec = stft(Waveform(np.ones(100), SR), cfg)
    assert spec.n_frames == 1
    assert spec.padding == "end"


def test_empty_waveform_is_rejected():
    with pytest.raises(EmptyWaveformError):
        stft(Waveform(np.zeros(0), SR), StftConfig())


@pytest.mark.parametrize("window,hop", [("hann", 128), ("hann", 256), ("rectangular", 512)])
def test_istft_inverts_stft_on_covered_samples(chirp, window, hop):
    cfg = StftConfig(n_fft=512, hop_length=hop, win_length=512, window=window)
    assert cfg.cola
    rebuilt = istft(stft(chirp, cfg))
    assert len(rebuilt) == len(chirp)
    covered = (stft(chirp, cfg).n_frames - 1) * hop + 512
    # hann is zero at its first sample, so the very edges carry no information
    lo, hi = 512, covered - 512
    assert np.max(np.abs(rebuilt.samples[lo:hi] - chirp.samples[lo:hi])) < 1e-6


def test_non_cola_pair_cannot_be_inverted(chirp):
    cfg = StftConfig(n_fft=512, hop_length=300, win_length=512, window="hann")
    assert not cfg.cola
    with pytest.raises(NonColaError):
        istft(stft(chirp, cfg))


def test_invalid_geometry():
    with pytest.raises(InvalidStftConfigError):
        StftConfig(n_fft=256, hop_length=128, win_length=512)
    with pytest.raises(InvalidStftConfigError):
        StftConfig(n_fft=512, hop_length=0, win_length=512)


def test_spectral_energy_matches_time_domain(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    spec = stft(chirp, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(chirp.samples, 512)[::128] * cfg.window_array()
    assert spectral_energy(spec) == pytest.approx(float((frames ** 2).sum()), rel=1e-9)


def test_mel_filterbank_shape_and_peaks():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    bank = mel_filterbank(cfg, n_mels=40, sample_rate=SR)
    assert bank.weights.shape == (40, 257)
    assert np.all(bank.weights >= 0)
    assert np.all(bank.weights.max(axis=1) <= 1.0 + 1e-12)
    assert np.all(np.diff(bank.centers) > 0)


def test_too_many_mels_for_fft_size():
    with pytest.raises(FilterbankError):
        mel_filterbank(StftConfig(n_fft=64, hop_length=16, win_length=64), n_mels=80, sample_rate=SR)


def test_filterbank_range_checked():
    with pytest.raises(FilterbankError):
        mel_filterbank(StftConfig(), n_mels=10, f_min=100.0, f_max=9000.0, sample_rate=SR)


def test_wav_to_mel_shape_and_floor(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    bank = mel_filterbank(cfg, n_mels=20, sample_rate=SR)
    mel = wav_to_mel(chirp, cfg, bank)
    assert mel.frames.shape == (stft(chirp, cfg).n_frames, 20)
    silent = wav_to_mel(Waveform(np.zeros(2048), SR), cfg, bank)
    np.testing.assert_allclose(silent.frames, np.log(1e-10))


def test_mel_to_linear_is_non_negative(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    bank = mel_filterbank(cfg, n_mels=20, sample_rate=SR)
    linear = mel_to_linear(wav_to_mel(chirp, cfg, bank), bank)
    assert linear.frames.shape[1] == cfg.n_bins
    assert np.all(linear.frames >= 0)


def test_mel_band_mismatch():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    bank = mel_filterbank(cfg, n_mels=20, sample_rate=SR)
    with pytest.raises(FilterbankError):
        mel_to_linear(MelSpectrogram(np.zeros((3, 10)), cfg), bank)


def test_griffin_lim_converges_and_is_seeded(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    mag = stft(chirp, cfg).magnitude()
    wave, trace = griffin_lim(mag, cfg, n_iters=15, seed=3)
    assert len(trace) == 15
    assert trace[-1] < trace[0]
    again, trace_again = griffin_lim(mag, cfg, n_iters=15, seed=3)
    np.testing.assert_array_equal(wave.samples, again.samples)
    assert trace == trace_again


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_griffin_lim_reaches_convergence_on_toy_speech(seed):
    spec = preset("unambig")
    rng = np.random.default_rng(100 + seed)
    wave = render_utterance(sample_sentence(spec, rng), spec, rng)
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    _, trace = griffin_lim(stft(wave, cfg).magnitude(), cfg, n_iters=60, seed=seed)
    assert len(trace) == 60
    assert trace[-1] < 0.1
    assert np.all(np.diff(trace) <= 1e-7)


def test_classic_griffin_lim_returns_best_iterate(chirp):
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    mag = stft(chirp, cfg).magnitude()
    wave, trace = griffin_lim(mag, cfg, n_iters=10, seed=1, momentum=0.0)
    assert np.all(np.diff(trace) <= 1e-7)
    assert spectral_convergence(stft(wave, cfg).magnitude().frames, mag.frames) == pytest.approx(trace[-1])
    with pytest.raises(SignalError):
        griffin_lim(mag, cfg, n_iters=1, momentum=1.0)


def test_spectral_convergence_is_frobenius_ratio():
    rng = np.random.default_rng(0)
    target = rng.uniform(0.0, 1.0, size=(7, 257))
    estimate = target + rng.normal(0.0, 0.05, size=target.shape)
    direct = np.sqrt(((estimate - target) ** 2).sum()) / np.sqrt((target ** 2).sum())
    assert spectral_convergence(estimate, target) == pytest.approx(direct, rel=1e-12)
    assert spectral_convergence(target, target) == 0.0


def test_griffin_lim_output_length():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    mag = MagnitudeSpectrogram(np.ones((10, cfg.n_bins)), cfg)
    wave, _ = griffin_lim(mag, cfg, n_iters=2, length=1000)
    assert len(wave) == 1000
    wave, _ = griffin_lim(mag, cfg, n_iters=2)
    assert len(wave) == 9 * 128 + 512


def test_griffin_lim_refuses_non_cola():
    cfg = StftConfig(n_fft=512, hop_length=300, win_length=512)
    with pytest.raises(NonColaError):
        griffin_lim(MagnitudeSpectrogram(np.ones((4, cfg.n_bins)), cfg), cfg, n_iters=1)


def test_complex_spectrogram_shape_checked_on_inverse():
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    with pytest.raises(SignalError):
        istft(ComplexSpectrogram(np.zeros((3, 10), dtype=complex), cfg, 1000))


def test_wav_io_is_pcm16(tmp_path, chirp):
    path = str(tmp_path / "x.wav")
    write_wav(path, chirp)
    back = read_wav(path, expected_rate=SR)
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - np.clip(chirp.samples, -1, 1))) <= 2.0 / 32768
    with pytest.raises(WavFormatError):
        read_wav(path, expected_rate=22050)


def test_read_wav_rejects_garbage(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        read_wav(str(path))
