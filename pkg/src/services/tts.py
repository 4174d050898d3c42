"""Attention sequence-to-sequence mel synthesizer with guided attention and Griffin-Lim output."""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.errors import NonFiniteError, TtsError
from src.services import grad as G
from src.services.grad import AdamState, ParameterSet, Tensor, adam_step, clip_grad_norm, constant
from src.services.signal import MelFilterbank, MelSpectrogram, StftConfig, Waveform, griffin_lim, mel_to_linear
from src.services.textproc import UnitInventory, UnitSequence

logger = logging.getLogger(__name__)

STOP_THRESHOLD = 0.5


@dataclass(frozen=True)
class TtsDims:
    n_mels: int = 80
    embedding_dim: int = 32
    encoder_dim: int = 48
    decoder_dim: int = 64
    prenet_dim: int = 32
    attention_dim: int = 32
    encoder_kernel: int = 5
    reduction: int = 2


@dataclass(frozen=True)
class GuidedAttentionConfig:
    g: float = 0.2
    weight: float = 1.0

    def __post_init__(self):
        if self.g <= 0:
            raise TtsError("Guided attention bandwidth must be positive")


class TtsModel:
    """
    Unit embedding -> conv + GRU encoder -> autoregressive GRU decoder with content attention.

    Each decoder step emits `reduction` normalized mel frames and one stop logit. Mel
    normalization statistics and the typical frames-per-unit rate live with the model.
    """

    def __init__(self, inventory: UnitInventory, dims: TtsDims = TtsDims(), rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.inventory = inventory
        self.dims = dims
        self.mel_mean = np.zeros(dims.n_mels)
        self.mel_std = np.ones(dims.n_mels)
        self.frames_per_unit = 10.0
        d = dims
        p = self.params = ParameterSet()

        def init(name, *shape, fan_in=None):
            fan_in = fan_in or shape[0]
            p.add(name, rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

        init("emb", len(inventory), d.embedding_dim, fan_in=1)
        p["emb"].values *= 0.3
        init("enc.conv.w", d.encoder_kernel, d.embedding_dim, d.encoder_dim, fan_in=d.encoder_kernel * d.embedding_dim)
        p.add("enc.conv.b", np.zeros(d.encoder_dim))
        self._init_gru("enc.gru", d.encoder_dim, d.encoder_dim, rng)
        init("dec.pre1.w", d.n_mels, d.prenet_dim)
        p.add("dec.pre1.b", np.zeros(d.prenet_dim))
        init("dec.pre2.w", d.prenet_dim, d.prenet_dim)
        p.add("dec.pre2.b", np.zeros(d.prenet_dim))
        self._init_gru("dec.gru", d.prenet_dim + d.encoder_dim, d.decoder_dim, rng)
        init("att.query", d.decoder_dim, d.attention_dim)
        init("att.key", d.encoder_dim, d.attention_dim)
        init("att.v", d.attention_dim, 1)
        init("out.mel.w", d.decoder_dim + d.encoder_dim, d.reduction * d.n_mels)
        p.add("out.mel.b", np.zeros(d.reduction * d.n_mels))
        init("out.stop.w", d.decoder_dim + d.encoder_dim, 1)
        p.add("out.stop.b", np.zeros(1))

    def _init_gru(self, prefix: str, in_dim: int, hidden: int, rng: np.random.Generator) -> None:
        self.params.add(f"{prefix}.w_ih", rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, 3 * hidden)))
        self.params.add(f"{prefix}.w_hh", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 3 * hidden)))
        self.params.add(f"{prefix}.b_ih", np.zeros(3 * hidden))
        self.params.add(f"{prefix}.b_hh", np.zeros(3 * hidden))

    def _gru(self, prefix: str, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        return G.gru_cell(x, h, p[f"{prefix}.w_ih"], p[f"{prefix}.w_hh"], p[f"{prefix}.b_ih"], p[f"{prefix}.b_hh"])

    # ------------------------------------------------------------------ encoder

    def encode(self, units: UnitSequence) -> Tensor:
        if len(units) == 0:
            raise TtsError("Cannot synthesize an empty unit sequence")
        if units.inventory != self.inventory:
            raise TtsError("Unit sequence is over a different inventory")
        p, d = self.params, self.dims
        left = (d.encoder_kernel - 1) // 2
        x = G.embedding(p["emb"], units.ids)
        x = G.relu(G.conv1d(x, p["enc.conv.w"], p["enc.conv.b"], (left, d.encoder_kernel - 1 - left)))
        h = constant(np.zeros((1, d.encoder_dim)))
        states = []
        for t in range(len(units)):
            h = self._gru("enc.gru", G.rows(x, t, t + 1), h)
            states.append(h)
        return G.concat(states, axis=0)

    # ------------------------------------------------------------------ decoder

    def _step(self, frame: Tensor, h: Tensor, context: Tensor, memory: Tensor,
              keys: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        p = self.params
        pre = G.relu(G.linear(frame, p["dec.pre1.w"], p["dec.pre1.b"]))
        pre = G.relu(G.linear(pre, p["dec.pre2.w"], p["dec.pre2.b"]))
        h = self._gru("dec.gru", G.concat([pre, context], axis=1), h)
        energies = G.matmul(G.tanh(G.add(keys, G.matmul(h, p["att.query"]))), p["att.v"])
        weights = G.softmax(G.transpose(energies))  # 1 x T
        context = G.matmul(weights, memory)
        out = G.concat([h, context], axis=1)
        mel = G.linear(out, p["out.mel.w"], p["out.mel.b"])
        stop = G.linear(out, p["out.stop.w"], p["out.stop.b"])
        return mel, stop, weights, h, context

    def _initial_state(self, memory: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        d = self.dims
        keys = G.matmul(memory, self.params["att.key"])
        return (constant(np.zeros((1, d.n_mels))), constant(np.zeros((1, d.decoder_dim))),
                constant(np.zeros((1, d.encoder_dim))), keys)

    def normalize(self, mel: np.ndarray) -> np.ndarray:
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, mel: np.ndarray) -> np.ndarray:
        return mel * self.mel_std + self.mel_mean

    def max_steps(self, n_units: int, factor: float = 4.0) -> int:
        return max(1, int(math.ceil(factor * self.frames_per_unit * n_units / self.dims.reduction)))

    def save(self, path: str) -> None:
        arrays = {**self.params.snapshot(), "mel_mean": self.mel_mean, "mel_std": self.mel_std}
        G.save_checkpoint(path, arrays, meta={
            "symbols": list(self.inventory.symbols), "kind": self.inventory.kind,
            "dims": self.dims.__dict__, "frames_per_unit": self.frames_per_unit,
        })

    @classmethod
    def load(cls, path: str) -> "TtsModel":
        arrays, meta = G.load_checkpoint(path)
        model = cls(UnitInventory(meta["symbols"][1:-1], kind=meta["kind"]), TtsDims(**meta["dims"]))
        model.mel_mean = arrays.pop("mel_mean")
        model.mel_std = arrays.pop("mel_std")
        model.frames_per_unit = float(meta["frames_per_unit"])
        model.params.load(arrays)
        return model


@dataclass
class TtsOutput:
    mel: Tensor  # N x (reduction * n_mels), normalized
    stop_logits: Tensor  # N x 1
    attention: Tensor  # N x T
    reached_max_steps: bool = False

    def frames(self, n_mels: int) -> np.ndarray:
        return self.mel.values.reshape(-1, n_mels)


def pad_to_reduction(mel: np.ndarray, reduction: int) -> np.ndarray:
    """Pad by repeating the last frame until the frame count is a multiple of `reduction`."""
    extra = (-len(mel)) % reduction
    if extra:
        mel = np.vstack([mel, np.repeat(mel[-1:], extra, axis=0)])
    return mel


def tts_forward(model: TtsModel, units: UnitSequence, teacher_mel: Optional[np.ndarray] = None,
                max_steps_factor: float = 4.0) -> TtsOutput:
    """Teacher-forced when a (normalized) target mel is given, otherwise autoregressive."""
    d = model.dims
    memory = model.encode(units)
    frame, h, context, keys = model._initial_state(memory)
    mels, stops, attention = [], [], []

    if teacher_mel is not None:
        target = np.asarray(teacher_mel, dtype=np.float64)
        if len(target) % d.reduction:
            raise TtsError(f"Teacher mel frames ({len(target)}) must be a multiple of {d.reduction}")
        for n in range(len(target) // d.reduction):
            if n:
                frame = constant(target[n * d.reduction - 1:n * d.reduction])
            mel, stop, weights, h, context = model._step(frame, h, context, memory, keys)
            mels.append(mel)
            stops.append(stop)
            attention.append(weights)
        return TtsOutput(G.concat(mels, 0), G.concat(stops, 0), G.concat(attention, 0))

    limit = model.max_steps(len(units), max_steps_factor)
    reached_max = True
    for _ in range(limit):
        mel, stop, weights, h, context = model._step(frame, h, context, memory, keys)
        mels.append(mel)
        stops.append(stop)
        attention.append(weights)
        frame = constant(mel.values[:, -d.n_mels:])
        if 1.0 / (1.0 + np.exp(-stop.item())) > STOP_THRESHOLD:
            reached_max = False
            break
    return TtsOutput(G.concat(mels, 0), G.concat(stops, 0), G.concat(attention, 0), reached_max)


def guided_attention_weights(n_steps: int, n_inputs: int, g: float) -> np.ndarray:
    n = np.arange(n_steps)[:, None] / n_steps
    t = np.arange(n_inputs)[None, :] / n_inputs
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * g * g))


def guided_attention_loss(attention: Tensor, g: float = 0.2) -> Tensor:
    """mean over (n, t) of A[n, t] * W[n, t]."""
    n_steps, n_inputs = attention.shape
    if n_steps < 1 or n_inputs < 1:
        raise TtsError("Attention matrix must be non-empty")
    return G.mean(G.mul(attention, constant(guided_attention_weights(n_steps, n_inputs, g))))


def stop_labels(n_steps: int) -> np.ndarray:
    labels = np.zeros((n_steps, 1))
    labels[-1, 0] = 1.0
    return labels


def tts_loss(out: TtsOutput, target_mel: np.ndarray, labels: np.ndarray, ga: GuidedAttentionConfig) -> Tensor:
    """L1(mel) + BCE(stop) + weight * guided attention."""
    target = np.asarray(target_mel, dtype=np.float64)
    if target.size != out.mel.values.size or labels.shape != out.stop_logits.shape:
        raise TtsError(f"Target shapes do not match prediction {out.mel.shape} / {out.stop_logits.shape}")
    target = target.reshape(out.mel.shape)
    l1 = G.mean(G.abs_(G.sub(out.mel, constant(target))))
    bce = G.mean(G.bce_with_logits(out.stop_logits, labels))
    loss = G.add(l1, bce)
    if ga.weight > 0:
        loss = G.add(loss, G.scale(guided_attention_loss(out.attention, ga.g), ga.weight))
    return loss


# ============================================================================
# Training and synthesis
# ============================================================================

@dataclass
class TtsTrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_l1: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _teacher_loss(model: TtsModel, units: UnitSequence, mel: np.ndarray,
                  ga: GuidedAttentionConfig) -> tuple[Tensor, float]:
    target = pad_to_reduction(model.normalize(mel), model.dims.reduction)
    out = tts_forward(model, units, target)
    loss = tts_loss(out, target, stop_labels(out.mel.shape[0]), ga)
    l1 = float(np.mean(np.abs(out.mel.values - target.reshape(out.mel.shape))))
    return loss, l1


def tts_train(train: Sequence[tuple[UnitSequence, np.ndarray]], val: Sequence[tuple[UnitSequence, np.ndarray]],
              inventory: UnitInventory, dims: TtsDims = TtsDims(), epochs: int = 10, lr: float = 1e-3,
              ga: GuidedAttentionConfig = GuidedAttentionConfig(), seed: int = 0,
              clip_norm: float = 5.0) -> tuple[TtsModel, TtsTrainLog]:
    """Teacher-forced Adam training; validation uses the same transcript source as training."""
    if not train:
        raise TtsError("Empty TTS training set")
    rng = np.random.default_rng(seed)
    model = TtsModel(inventory, dims, rng)
    stacked = np.vstack([mel for _, mel in train])
    model.mel_mean = stacked.mean(axis=0)
    model.mel_std = np.maximum(stacked.std(axis=0), 1e-3)
    model.frames_per_unit = float(np.mean([len(mel) / len(units) for units, mel in train]))
    opt = AdamState(lr=lr)
    log = TtsTrainLog()
    best = model.params.snapshot()
    best_val = np.inf

    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(len(train)):
            units, mel = train[k]
            try:
                loss, _ = _teacher_loss(model, units, mel, ga)
                loss.backward()
            except NonFiniteError as e:
                raise TtsError(f"TTS training diverged in epoch {epoch}: {e}") from e
            clip_grad_norm(model.params, clip_norm)
            adam_step(model.params, opt)
            total += loss.item()
        log.train_loss.append(total / len(train))

        if val:
            losses, l1s = zip(*((loss.item(), l1) for loss, l1 in (_teacher_loss(model, u, m, ga) for u, m in val)))
            log.val_loss.append(float(np.mean(losses)))
            log.val_l1.append(float(np.mean(l1s)))
            score = log.val_loss[-1]
        else:
            score = log.train_loss[-1]
        logger.info("TTS epoch %d: train loss %.4f, validation loss %s", epoch, log.train_loss[-1],
                    f"{log.val_loss[-1]:.4f}" if val else "n/a")
        if score < best_val:
            best_val, log.best_epoch, best = score, epoch, model.params.snapshot()

    model.params.load(best)
    return model, log


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    attention: np.ndarray
    stop_frame: Optional[int]  # None when the max-steps cap was reached


def synthesize(model: TtsModel, units: UnitSequence, bank: MelFilterbank, stft_cfg: StftConfig,
               gl_iters: int = 60, seed: int = 0, max_steps_factor: float = 4.0,
               gl_momentum: float = 0.99) -> tuple[Waveform, SynthesisResult]:
    """Autoregressive mel, filterbank pseudo-inversion, Griffin-Lim."""
    out = tts_forward(model, units, max_steps_factor=max_steps_factor)
    frames = model.denormalize(out.frames(model.dims.n_mels))
    if out.reached_max_steps:
        logger.warning("Synthesis hit the max-steps cap (%d steps) for a %d-unit input",
                       out.mel.shape[0], len(units))
    mel = MelSpectrogram(frames, stft_cfg)
    wave, _ = griffin_lim(mel_to_linear(mel, bank), stft_cfg, gl_iters, seed=seed,
                          sample_rate=bank.sample_rate, momentum=gl_momentum)
    return wave, SynthesisResult(mel, out.attention.values, None if out.reached_max_steps else len(frames))
