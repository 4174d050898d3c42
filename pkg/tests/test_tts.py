import numpy as np
import pytest

from src.errors import TtsError
from src.services.grad import constant, grad_check_parameters
from src.services.signal import StftConfig, mel_filterbank, wav_to_mel
from src.services.textproc import UnitInventory, UnitSequence
from src.services.toylang import preset, render_utterance, sample_sentence
from src.services.tts import (
    GuidedAttentionConfig,
    TtsDims,
    TtsModel,
    guided_attention_loss,
    guided_attention_weights,
    pad_to_reduction,
    stop_labels,
    synthesize,
    tts_forward,
    tts_loss,
    tts_train,
)

TINY = TtsDims(n_mels=3, embedding_dim=3, encoder_dim=3, decoder_dim=4, prenet_dim=3, attention_dim=3,
               encoder_kernel=3, reduction=2)


@pytest.fixture
def model(inventory, rng):
    model = TtsModel(inventory, TINY, rng)
    # keep relu inputs away from zero so finite differences stay on one side of the kink
    for name, t in model.params.items():
        if name.endswith(".b") or name.endswith(".b_ih") or name.endswith(".b_hh"):
            t.values += rng.normal(0.0, 0.3, size=t.shape)
    return model


@pytest.fixture
def units(inventory):
    return UnitSequence((1, 2, 0, 3), inventory)


def test_guided_attention_weights():
    w = guided_attention_weights(6, 6, 0.2)
    np.testing.assert_allclose(np.diag(w), 0.0)
    assert np.all((w >= 0) & (w < 1))
    assert w[0, 5] > w[0, 1]


def test_guided_attention_prefers_diagonal_alignment():
    diagonal = constant(np.eye(5))
    reversed_ = constant(np.eye(5)[::-1].copy())
    assert guided_attention_loss(diagonal).item() < guided_attention_loss(reversed_).item()
    with pytest.raises(TtsError):
        GuidedAttentionConfig(g=0.0)


def test_pad_to_reduction_repeats_last_frame():
    mel = np.arange(10.0).reshape(5, 2)
    padded = pad_to_reduction(mel, 3)
    assert padded.shape == (6, 2)
    np.testing.assert_array_equal(padded[-1], mel[-1])
    assert pad_to_reduction(mel, 5) is mel


def test_stop_labels_mark_last_step():
    np.testing.assert_array_equal(stop_labels(3)[:, 0], [0.0, 0.0, 1.0])


def test_teacher_forced_loss_grad_check(model, units, rng):
    target = rng.normal(size=(6, TINY.n_mels))

    def loss():
        out = tts_forward(model, units, target)
        return tts_loss(out, target, stop_labels(out.mel.shape[0]), GuidedAttentionConfig(0.2, 1.0))

    errors = grad_check_parameters(loss, model.params, max_coords=3, rng=np.random.default_rng(1))
    assert max(errors.values()) < 1e-4


def test_teacher_forcing_shapes(model, units, rng):
    out = tts_forward(model, units, rng.normal(size=(6, TINY.n_mels)))
    assert out.mel.shape == (3, TINY.reduction * TINY.n_mels)
    assert out.stop_logits.shape == (3, 1)
    assert out.attention.shape == (3, len(units))
    np.testing.assert_allclose(out.attention.values.sum(axis=1), 1.0)
    assert out.frames(TINY.n_mels).shape == (6, TINY.n_mels)
    with pytest.raises(TtsError):
        tts_forward(model, units, rng.normal(size=(5, TINY.n_mels)))


def test_loss_shape_mismatch(model, units, rng):
    out = tts_forward(model, units, rng.normal(size=(4, TINY.n_mels)))
    with pytest.raises(TtsError):
        tts_loss(out, np.zeros((6, TINY.n_mels)), stop_labels(2), GuidedAttentionConfig())


def test_encoder_rejects_bad_input(model, inventory):
    with pytest.raises(TtsError):
        model.encode(UnitSequence((), inventory))
    with pytest.raises(TtsError):
        model.encode(UnitSequence((1,), UnitInventory(["x", "y"])))


def test_autoregressive_decoding_stops_or_hits_cap(model, units):
    model.params["out.stop.b"].values[:] = -50.0
    capped = tts_forward(model, units, max_steps_factor=1.0)
    assert capped.reached_max_steps
    assert capped.mel.shape[0] == model.max_steps(len(units), 1.0)

    model.params["out.stop.b"].values[:] = 50.0
    stopped = tts_forward(model, units)
    assert not stopped.reached_max_steps
    assert stopped.mel.shape[0] == 1


def test_training_fits_statistics_and_keeps_best_epoch(inventory, rng):
    data = [(UnitSequence((1, 2, 3), inventory), rng.normal(size=(7, TINY.n_mels))),
            (UnitSequence((2, 0, 1), inventory), rng.normal(size=(9, TINY.n_mels)))]
    model, log = tts_train(data, data[:1], inventory, TINY, epochs=3, lr=1e-2, seed=0)
    assert len(log.train_loss) == len(log.val_loss) == len(log.val_l1) == 3
    assert log.val_loss[log.best_epoch] == min(log.val_loss)
    assert model.frames_per_unit == pytest.approx((7 / 3 + 9 / 3) / 2)
    np.testing.assert_allclose(model.mel_mean, np.vstack([m for _, m in data]).mean(axis=0))
    with pytest.raises(TtsError):
        tts_train([], [], inventory, TINY)


def test_checkpoint_round_trip(tmp_path, model, units, rng):
    model.frames_per_unit = 4.5
    model.mel_mean = rng.normal(size=TINY.n_mels)
    path = str(tmp_path / "tts.ckpt")
    model.save(path)
    loaded = TtsModel.load(path)
    assert loaded.dims == TINY
    assert loaded.frames_per_unit == 4.5
    target = rng.normal(size=(4, TINY.n_mels))
    np.testing.assert_array_equal(tts_forward(loaded, units, target).mel.values,
                                  tts_forward(model, units, target).mel.values)


def test_synthesize_returns_waveform_and_stop_frame(model, units):
    model.params["out.stop.b"].values[:] = 50.0
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    bank = mel_filterbank(cfg, n_mels=TINY.n_mels, sample_rate=16000)
    wave, result = synthesize(model, units, bank, cfg, gl_iters=2)
    assert result.stop_frame == TINY.reduction
    assert result.mel.frames.shape == (TINY.reduction, TINY.n_mels)
    assert result.attention.shape == (1, len(units))
    assert len(wave) == (TINY.reduction - 1) * cfg.hop_length + cfg.win_length


def _mean_teacher_loss(model, data, ga):
    losses = []
    for units, mel in data:
        target = pad_to_reduction(model.normalize(mel), model.dims.reduction)
        out = tts_forward(model, units, target)
        losses.append(tts_loss(out, target, stop_labels(out.mel.shape[0]), ga).item())
    return float(np.mean(losses))


@pytest.mark.slow
def test_overfits_twenty_rendered_utterances():
    spec = preset("unambig", snr_db=None)
    rng = np.random.default_rng(11)
    sentences = sorted((sample_sentence(spec, rng) for _ in range(80)), key=len)[:20]
    cfg = StftConfig(n_fft=512, hop_length=256, win_length=512)
    bank = mel_filterbank(cfg, n_mels=20, sample_rate=spec.sample_rate)
    data = [(s, wav_to_mel(render_utterance(s, spec, rng), cfg, bank).frames) for s in sentences]
    dims = TtsDims(n_mels=20)
    ga = GuidedAttentionConfig()

    untrained, _ = tts_train(data, [], spec.inventory, dims, epochs=1, lr=1e-12, seed=0)
    initial = _mean_teacher_loss(untrained, data, ga)
    model, log = tts_train(data, [], spec.inventory, dims, epochs=100, lr=3e-3, ga=ga, seed=0)
    assert _mean_teacher_loss(model, data, ga) < 0.1 * initial
    assert min(log.train_loss) < 0.1 * initial
