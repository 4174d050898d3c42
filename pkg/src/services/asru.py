"""Adversarial unsupervised recognizer: segment-to-unit generator against a text discriminator."""
import csv
import itertools
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.errors import GanDivergedError, NonFiniteError, UttsError
from src.services import grad as G
from src.services.feats import SegmentSequence
from src.services.grad import AdamState, ParameterSet, Tensor, adam_step, constant
from src.services.textproc import UnitInventory, UnitSequence, unit_error_rate

logger = logging.getLogger(__name__)


def _same_padding(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


# ============================================================================
# Models
# ============================================================================

class Generator:
    """One conv1d layer from segment vectors to unit logits, then row softmax."""

    def __init__(self, in_dim: int, n_units: int, kernel: int = 4, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.n_units = n_units
        self.kernel = kernel
        self.padding = _same_padding(kernel)
        self.params = ParameterSet()
        scale = 1.0 / np.sqrt(kernel * in_dim)
        self.params.add("gen.w", rng.normal(0.0, scale, size=(kernel, in_dim, n_units)))
        self.params.add("gen.b", np.zeros(n_units))

    def logits(self, vectors: np.ndarray) -> Tensor:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != self.in_dim:
            raise UttsError(f"Generator expects S x {self.in_dim} segment vectors, got {vectors.shape}")
        return G.conv1d(constant(vectors), self.params["gen.w"], self.params["gen.b"], self.padding)

    def forward(self, vectors: np.ndarray) -> Tensor:
        return G.softmax(self.logits(vectors))


def generator_forward(gen: Generator, segs: SegmentSequence) -> Tensor:
    """S x |V| unit distributions for one utterance."""
    return gen.forward(segs.vectors)


class Discriminator:
    """Stack of conv1d layers with leaky_relu, mean-pooled over time to one realness logit."""

    def __init__(self, n_units: int, channels: int = 32, kernel: int = 3, n_layers: int = 4,
                 slope: float = 0.2, same_padding: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.n_units = n_units
        self.kernel = kernel
        self.slope = slope
        self.padding = _same_padding(kernel) if same_padding else (0, 0)
        self.params = ParameterSet()
        self.n_layers = n_layers
        widths = [n_units] + [channels] * (n_layers - 1) + [1]
        for layer in range(n_layers):
            c_in, c_out = widths[layer], widths[layer + 1]
            self.params.add(f"disc.w{layer}", rng.normal(0.0, 1.0 / np.sqrt(kernel * c_in), size=(kernel, c_in, c_out)))
            self.params.add(f"disc.b{layer}", np.zeros(c_out))

    def _layers(self, x: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        """Final layer output (L x 1) and the leaky-relu slope masks of the hidden layers."""
        masks = []
        h = x
        for layer in range(self.n_layers):
            h = G.conv1d(h, self.params[f"disc.w{layer}"], self.params[f"disc.b{layer}"], self.padding)
            if layer < self.n_layers - 1:
                masks.append(np.where(h.values > 0, 1.0, self.slope))
                h = G.leaky_relu(h, self.slope)
        return h, masks

    def forward(self, x: Tensor) -> Tensor:
        """Scalar realness logit of an L x |V| sequence of distributions."""
        if x.shape[1] != self.n_units:
            raise UttsError(f"Discriminator expects L x {self.n_units} input, got {x.shape}")
        out, _ = self._layers(x)
        return G.mean(out)

    def input_gradient(self, x: np.ndarray) -> Tensor:
        """dD/dx at x, built as a graph that is differentiable in the discriminator weights."""
        x = np.asarray(x, dtype=np.float64)
        out, masks = self._layers(constant(x))
        length = x.shape[0]
        sizes = [length]
        # lengths of every layer input (stride 1, fixed padding)
        for layer in range(self.n_layers):
            sizes.append(sizes[-1] + sum(self.padding) - self.kernel + 1)
        upstream = constant(np.full(out.shape, 1.0 / out.values.size))
        for layer in reversed(range(self.n_layers)):
            upstream = G.conv1d_input_grad(upstream, self.params[f"disc.w{layer}"], sizes[layer], self.padding)
            if layer > 0:
                upstream = G.mul(upstream, constant(masks[layer - 1]))
        return upstream


# ============================================================================
# Collapse and decoding
# ============================================================================

def _runs(ids: np.ndarray) -> list[tuple[int, int]]:
    cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    starts = np.concatenate([[0], cuts]).astype(int)
    ends = np.concatenate([cuts, [len(ids)]]).astype(int)
    return list(zip(starts, ends))


def collapse_argmax(dists, inventory: Optional[UnitInventory] = None):
    """Argmax per position (ties -> lowest id) then run-length collapse.

    Accepts an S x |V| distribution matrix or a 1-D id sequence; returns a UnitSequence when
    an inventory is given, else a tuple of ids.
    """
    arr = np.asarray(dists.values if isinstance(dists, Tensor) else dists)
    if arr.size == 0:
        raise UttsError("Cannot collapse an empty sequence")
    ids = np.argmax(arr, axis=1) if arr.ndim == 2 else arr.astype(np.int64)
    collapsed = tuple(int(ids[s]) for s, _ in _runs(ids))
    return UnitSequence(collapsed, inventory) if inventory is not None else collapsed


def soft_collapse(dists: Tensor) -> Tensor:
    """Average the distributions inside each argmax run (R x |V|, differentiable)."""
    ids = np.argmax(dists.values, axis=1)
    runs = _runs(ids)
    pool = np.zeros((len(runs), dists.shape[0]))
    for r, (s, e) in enumerate(runs):
        pool[r, s:e] = 1.0 / (e - s)
    return G.matmul(constant(pool), dists)


def greedy_decode(gen: Generator, segs: SegmentSequence, inventory: UnitInventory) -> UnitSequence:
    """Generator forward, collapse, silence stripped at the edges."""
    return collapse_argmax(generator_forward(gen, segs).values, inventory).strip_silence()


def one_hot(ids: Sequence[int], n_units: int) -> np.ndarray:
    out = np.zeros((len(ids), n_units))
    out[np.arange(len(ids)), np.asarray(ids, dtype=np.int64)] = 1.0
    return out


# ============================================================================
# Losses
# ============================================================================

@dataclass
class GanLosses:
    loss_d: Tensor
    loss_g: Tensor
    gp: Tensor
    sp: Tensor
    pd: Tensor


def gradient_penalty(disc: Discriminator, real: np.ndarray, fake: np.ndarray, alpha: float) -> Tensor:
    """||grad_x D(x~)||^2 at x~ = alpha*real + (1-alpha)*fake, both truncated to the shorter length."""
    length = min(len(real), len(fake))
    mixed = alpha * real[:length] + (1.0 - alpha) * fake[:length]
    g = disc.input_gradient(mixed)
    return G.sum_(G.mul(g, g))


def smoothness_penalty(dists: Tensor) -> Tensor:
    """sum_t ||p_t - p_{t+1}||^2."""
    n = dists.shape[0]
    if n < 2:
        return constant(0.0)
    diff = G.sub(G.rows(dists, 1, n), G.rows(dists, 0, n - 1))
    return G.sum_(G.mul(diff, diff))


def diversity_penalty(dists: Sequence[Tensor]) -> Tensor:
    """-H(p_bar) = sum p_bar log p_bar for the batch-and-time averaged distribution."""
    p_bar = G.mean(G.concat(list(dists), axis=0), axis=0)
    return G.sum_(G.mul(p_bar, G.log(p_bar)))


def discriminator_loss(disc: Discriminator, real: Sequence[np.ndarray], fake: Sequence[np.ndarray],
                       gp_weight: float, alphas: Sequence[float]) -> tuple[Tensor, Tensor]:
    """Batch mean of -log s(D(real)) - log(1 - s(D(fake))) plus weighted gradient penalty."""
    terms, penalties = [], []
    for r, f, alpha in zip(real, fake, alphas):
        terms.append(G.bce_with_logits(disc.forward(constant(r)), 1.0))
        terms.append(G.bce_with_logits(disc.forward(constant(f)), 0.0))
        penalties.append(gradient_penalty(disc, r, f, alpha))
    n = len(real)
    adversarial = G.scale(_total(terms), 1.0 / n)
    gp = G.scale(_total(penalties), 1.0 / n)
    return G.add(adversarial, G.scale(gp, gp_weight)), gp


def generator_loss(disc: Discriminator, dists: Sequence[Tensor], smoothness_weight: float,
                   diversity_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """Batch mean of -log s(D(collapse(p))) + smoothness + diversity terms."""
    n = len(dists)
    adversarial = G.scale(_total([G.bce_with_logits(disc.forward(soft_collapse(p)), 1.0) for p in dists]), 1.0 / n)
    sp = G.scale(_total([smoothness_penalty(p) for p in dists]), 1.0 / n)
    pd = diversity_penalty(dists)
    total = G.add(adversarial, G.add(G.scale(sp, smoothness_weight), G.scale(pd, diversity_weight)))
    return total, sp, pd


def gan_losses(dists: Sequence[Tensor], real_batch: Sequence[np.ndarray], disc: Discriminator,
               gp_weight: float, smoothness_weight: float, diversity_weight: float,
               alphas: Sequence[float]) -> GanLosses:
    """Both players' losses; the discriminator sees the fake sequences as constants."""
    if not dists or not real_batch:
        raise UttsError("GAN losses need a non-empty batch")
    fake = [soft_collapse(p).values for p in dists]
    loss_d, gp = discriminator_loss(disc, real_batch, fake, gp_weight, alphas)
    loss_g, sp, pd = generator_loss(disc, dists, smoothness_weight, diversity_weight)
    for name, t in (("L_D", loss_d), ("L_G", loss_g)):
        if not np.isfinite(t.values).all():
            raise GanDivergedError(f"{name} is not finite")
    return GanLosses(loss_d=loss_d, loss_g=loss_g, gp=gp, sp=sp, pd=pd)


def _total(terms: Sequence[Tensor]) -> Tensor:
    out = G.reshape(terms[0], ())
    for t in terms[1:]:
        out = G.add(out, G.reshape(t, ()))
    return out


# ============================================================================
# Training
# ============================================================================

@dataclass
class GanWeights:
    gp_weight: float = 1.5
    smoothness_weight: float = 0.5
    diversity_weight: float = 2.0


@dataclass
class GanTrainConfig:
    weights: GanWeights = field(default_factory=GanWeights)
    steps: int = 5000
    batch_size: int = 16
    lr_generator: float = 4e-4
    lr_discriminator: float = 2e-4
    val_interval: int = 250
    generator_kernel: int = 4
    discriminator_kernel: int = 3
    discriminator_channels: int = 32
    seed: int = 0

    @classmethod
    def from_section(cls, section, seed: int, steps: Optional[int] = None,
                     weights: Optional[GanWeights] = None) -> "GanTrainConfig":
        return cls(
            weights=weights or GanWeights(section.gp_weight, section.smoothness_weight, section.diversity_weight),
            steps=steps or section.steps,
            batch_size=section.batch_size,
            lr_generator=section.lr_generator,
            lr_discriminator=section.lr_discriminator,
            val_interval=section.val_interval,
            generator_kernel=section.generator_kernel,
            discriminator_kernel=section.discriminator_kernel,
            discriminator_channels=section.discriminator_channels,
            seed=seed,
        )


@dataclass
class TrainRecord:
    step: int
    loss_g: float
    loss_d: float
    gp: float
    sp: float
    pd: float
    val_per: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise UttsError("TrainLog steps must increase")
        self.records.append(record)

    def best(self) -> Optional[TrainRecord]:
        return min(self.records, key=lambda r: (r.val_per, r.step)) if self.records else None

    def to_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(TrainRecord.__dataclass_fields__))
            writer.writeheader()
            for r in self.records:
                writer.writerow(asdict(r))


@dataclass
class GanResult:
    generator: Generator
    log: TrainLog
    best_per: float
    best_step: int
    weights: GanWeights


def validation_per(gen: Generator, val: Sequence[tuple[SegmentSequence, UnitSequence]],
                   inventory: UnitInventory) -> float:
    return unit_error_rate((greedy_decode(gen, segs, inventory), ref) for segs, ref in val)


def gan_train(speech: Sequence[SegmentSequence], text: Sequence[Sequence[int]],
              val: Sequence[tuple[SegmentSequence, UnitSequence]], inventory: UnitInventory,
              cfg: GanTrainConfig) -> GanResult:
    """Alternating discriminator/generator Adam steps; the minimum-validation-PER generator is returned."""
    if not text:
        raise UttsError("Empty text corpus")
    if not speech:
        raise UttsError("Empty speech corpus")
    if not val:
        raise UttsError("Validation set is empty")

    rng = np.random.default_rng(cfg.seed)
    n_units = inventory.n_surface
    gen = Generator(speech[0].vectors.shape[1], n_units, cfg.generator_kernel, rng)
    disc = Discriminator(n_units, cfg.discriminator_channels, cfg.discriminator_kernel, rng=rng)
    opt_g = AdamState(lr=cfg.lr_generator, beta1=0.5, beta2=0.98)
    opt_d = AdamState(lr=cfg.lr_discriminator, beta1=0.5, beta2=0.98)
    real_pool = [one_hot(seq, n_units) for seq in text if len(seq)]
    w = cfg.weights

    log = TrainLog()
    best_per = validation_per(gen, val, inventory)
    best_step = 0
    best_params = gen.params.snapshot()
    logger.info("GAN training: %d speech / %d text utterances, %d validation, weights %s",
                len(speech), len(real_pool), len(val), w)

    for step in range(1, cfg.steps + 1):
        speech_idx = rng.integers(len(speech), size=cfg.batch_size)
        text_idx = rng.integers(len(real_pool), size=cfg.batch_size)
        alphas = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        real = [real_pool[i] for i in text_idx]
        try:
            # discriminator step on detached generator output
            fake = [soft_collapse(gen.forward(speech[i].vectors)).values for i in speech_idx]
            loss_d, gp = discriminator_loss(disc, real, fake, w.gp_weight, alphas)
            loss_d.backward()
            adam_step(disc.params, opt_d)
            gen.params.zero_grad()

            dists = [gen.forward(speech[i].vectors) for i in speech_idx]
            loss_g, sp, pd = generator_loss(disc, dists, w.smoothness_weight, w.diversity_weight)
            loss_g.backward()
            adam_step(gen.params, opt_g)
            disc.params.zero_grad()
        except NonFiniteError as e:
            raise GanDivergedError(f"GAN diverged at step {step}: {e}") from e

        if step % cfg.val_interval == 0 or step == cfg.steps:
            per = validation_per(gen, val, inventory)
            log.append(TrainRecord(step, loss_g.item(), loss_d.item(), gp.item(), sp.item(), pd.item(), per))
            logger.info("GAN step %d: L_G=%.4f L_D=%.4f gp=%.4f sp=%.4f pd=%.4f val PER=%.4f",
                        step, loss_g.item(), loss_d.item(), gp.item(), sp.item(), pd.item(), per)
            if per < best_per:
                best_per, best_step = per, step
                best_params = gen.params.snapshot()

    gen.params.load(best_params)
    logger.info("GAN best validation PER %.4f at step %d", best_per, best_step)
    return GanResult(gen, log, best_per, best_step, w)


@dataclass
class GridResult:
    best: GanResult
    cells: list[tuple[GanWeights, GanResult]]


def grid_search(speech: Sequence[SegmentSequence], text: Sequence[Sequence[int]],
                val: Sequence[tuple[SegmentSequence, UnitSequence]], inventory: UnitInventory,
                cfg: GanTrainConfig, gp_weights: Sequence[float], smoothness_weights: Sequence[float],
                diversity_weights: Sequence[float], cell_steps: int) -> GridResult:
    """One reduced-steps run per cell, selection by validation PER, full rerun at the winner.

    A singleton grid trains only the full run.
    """
    grid = [GanWeights(*cell) for cell in itertools.product(gp_weights, smoothness_weights, diversity_weights)]
    if not grid:
        raise UttsError("Empty hyper-parameter grid")
    if len(grid) == 1:
        result = gan_train(speech, text, val, inventory, _with(cfg, grid[0], cfg.steps))
        return GridResult(result, [(grid[0], result)])

    cells: list[tuple[GanWeights, GanResult]] = []
    for weights in grid:
        try:
            cells.append((weights, gan_train(speech, text, val, inventory, _with(cfg, weights, cell_steps))))
        except GanDivergedError as e:
            logger.warning("Grid cell %s diverged: %s", weights, e)
    if not cells:
        raise GanDivergedError("All grid cells diverged")
    winner = min(cells, key=lambda c: c[1].best_per)[0]
    logger.info("Grid search winner: %s", winner)
    return GridResult(gan_train(speech, text, val, inventory, _with(cfg, winner, cfg.steps)), cells)


def _with(cfg: GanTrainConfig, weights: GanWeights, steps: int) -> GanTrainConfig:
    return GanTrainConfig(**{**cfg.__dict__, "weights": weights, "steps": steps})


# ============================================================================
# Controls
# ============================================================================

def supervised_init(gen: Generator, data: Sequence[tuple[SegmentSequence, Sequence[int]]],
                    epochs: int = 30, lr: float = 1e-2) -> list[float]:
    """Train the generator with cross-entropy on true per-segment labels (upper-bound control)."""
    opt = AdamState(lr=lr)
    trace = []
    for epoch in range(epochs):
        total = 0.0
        for segs, labels in data:
            target = one_hot(labels, gen.n_units)
            loss = G.scale(G.sum_(G.mul(G.log_softmax(gen.logits(segs.vectors)), constant(target))),
                           -1.0 / len(labels))
            loss.backward()
            adam_step(gen.params, opt)
            total += loss.item()
        trace.append(total / max(len(data), 1))
    return trace


def segment_labels(segs: SegmentSequence, frame_labels: Sequence[int]) -> list[int]:
    """Majority frame label of every segment (ties -> lowest id)."""
    labels = np.asarray(frame_labels, dtype=np.int64)
    return [int(np.bincount(labels[s:e]).argmax()) for s, e in segs.boundaries]


def save_generator(gen: Generator, path: str) -> None:
    G.save_checkpoint(path, gen.params.snapshot(),
                      meta={"in_dim": gen.in_dim, "n_units": gen.n_units, "kernel": gen.kernel})


def load_generator(path: str) -> Generator:
    arrays, meta = G.load_checkpoint(path)
    gen = Generator(int(meta["in_dim"]), int(meta["n_units"]), int(meta["kernel"]))
    gen.params.load(arrays)
    return gen
