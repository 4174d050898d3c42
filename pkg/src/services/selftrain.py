"""Self-training: Viterbi-trained monophone HMM and a CTC recognizer over framewise features."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence, TypeVar

import numpy as np
from scipy.special import logsumexp

from src.errors import AlignmentError, CtcError, InventoryError, NonFiniteError
from src.services import grad as G
from src.services.grad import AdamState, ParameterSet, Tensor, adam_step, constant
from src.services.textproc import UnitInventory, UnitSequence, unit_error_rate

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
PROB_CLIP = 1e-10
STAGES = ("gan", "hmm", "ctc")

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


# ============================================================================
# Pseudo transcripts
# ============================================================================

@dataclass
class PseudoTranscriptSet:
    """Hypothesized transcripts per utterance id, tagged with the stage that produced them."""
    stage: Literal["gan", "hmm", "ctc"]
    transcripts: dict[str, UnitSequence] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InventoryError(f"Unknown pseudo-transcript stage: {self.stage}")

    def __len__(self) -> int:
        return len(self.transcripts)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for uid in sorted(self.transcripts):
                f.write(f"{uid}\t{self.stage}\t{self.transcripts[uid].to_text()}\n")

    @classmethod
    def load(cls, path: str, inventory: UnitInventory) -> "PseudoTranscriptSet":
        stage = None
        transcripts = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                uid, tag, text = line.split("\t")
                if stage is not None and tag != stage:
                    raise InventoryError(f"{path}: mixed stage tags {stage} and {tag}")
                stage = tag
                transcripts[uid] = UnitSequence.from_text(text, inventory)
        return cls(stage or "gan", transcripts)


# ============================================================================
# HMM
# ============================================================================

@dataclass
class HmmModel:
    """
    Monophone left-to-right chains (silence: 1 state, other units: 3 states).

    Fields:
        means, variances: S x d diagonal Gaussians, one row per state
        stay: self-loop probability per state (advance / exit gets 1 - stay)
        unit_of_state, first_state: chain layout over the inventory surface ids
    """
    inventory: UnitInventory
    means: np.ndarray
    variances: np.ndarray
    stay: np.ndarray
    first_state: np.ndarray = field(init=False)
    n_states_of: np.ndarray = field(init=False)

    def __post_init__(self):
        self.n_states_of = np.array(
            [1 if u == self.inventory.silence_id else 3 for u in range(self.inventory.n_surface)], dtype=np.int64
        )
        self.first_state = np.concatenate([[0], np.cumsum(self.n_states_of)[:-1]]).astype(np.int64)
        if self.means.shape[0] != self.n_states_of.sum():
            raise AlignmentError(f"HMM needs {self.n_states_of.sum()} states, got {self.means.shape[0]}")

    @property
    def n_states(self) -> int:
        return int(self.n_states_of.sum())

    @property
    def last_state(self) -> np.ndarray:
        return self.first_state + self.n_states_of - 1

    def chain(self, units: Sequence[int]) -> np.ndarray:
        """Concatenated state indices for a unit sequence."""
        return np.concatenate([np.arange(self.first_state[u], self.first_state[u] + self.n_states_of[u])
                               for u in units]).astype(np.int64)

    def log_emissions(self, feats: np.ndarray) -> np.ndarray:
        """T x S Gaussian log densities."""
        diff = feats[:, None, :] - self.means[None, :, :]
        return -0.5 * (np.log(2 * np.pi * self.variances).sum(axis=1)[None, :]
                       + (diff * diff / self.variances[None, :, :]).sum(axis=2))

    def save(self, path: str) -> None:
        G.save_checkpoint(path, {"means": self.means, "variances": self.variances, "stay": self.stay},
                          meta={"symbols": list(self.inventory.symbols), "kind": self.inventory.kind})

    @classmethod
    def load(cls, path: str) -> "HmmModel":
        arrays, meta = G.load_checkpoint(path)
        units = [s for s in meta["symbols"][1:-1]]
        return cls(UnitInventory(units, kind=meta["kind"]), arrays["means"], arrays["variances"], arrays["stay"])


@dataclass
class _Stats:
    """Per-state sufficient statistics of aligned frames."""
    count: np.ndarray
    total: np.ndarray
    squares: np.ndarray
    stays: np.ndarray
    advances: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, dim: int) -> "_Stats":
        return cls(np.zeros(n_states), np.zeros((n_states, dim)), np.zeros((n_states, dim)),
                   np.zeros(n_states), np.zeros(n_states))

    def add_path(self, feats: np.ndarray, path: np.ndarray) -> None:
        np.add.at(self.count, path, 1.0)
        np.add.at(self.total, path, feats)
        np.add.at(self.squares, path, feats * feats)
        same = path[1:] == path[:-1]
        np.add.at(self.stays, path[1:][same], 1.0)
        np.add.at(self.advances, path[:-1][~same], 1.0)
        self.advances[path[-1]] += 1.0  # final exit

    def merge(self, other: "_Stats") -> None:
        for name in ("count", "total", "squares", "stays", "advances"):
            getattr(self, name).__iadd__(getattr(other, name))


def _reestimate(model: HmmModel, stats: _Stats) -> HmmModel:
    means = model.means.copy()
    variances = model.variances.copy()
    stay = model.stay.copy()
    seen = stats.count > 0
    means[seen] = stats.total[seen] / stats.count[seen, None]
    variances[seen] = np.maximum(stats.squares[seen] / stats.count[seen, None] - means[seen] ** 2, VAR_FLOOR)
    moves = stats.stays + stats.advances
    moved = moves > 0
    stay[moved] = np.clip(stats.stays[moved] / moves[moved], PROB_CLIP, 1.0 - PROB_CLIP)
    empty = int((~seen).sum())
    if empty:
        logger.warning("HMM re-estimation: %d states received no frames; previous parameters kept", empty)
    return HmmModel(model.inventory, means, np.maximum(variances, VAR_FLOOR), stay)


def _usable(feats: np.ndarray, units: UnitSequence, uid: str) -> bool:
    if len(units) == 0:
        raise AlignmentError(f"Empty pseudo transcript for {uid}")
    if len(feats) < 3 * len(units):
        logger.warning("Skipping %s: %d frames for %d units", uid, len(feats), len(units))
        return False
    return True


def hmm_init(feats: Sequence[np.ndarray], transcripts: Sequence[UnitSequence],
             ids: Optional[Sequence[str]] = None) -> HmmModel:
    """Uniform segmentation of each utterance over its chain states; Gaussian and duration stats."""
    if not transcripts:
        raise AlignmentError("No pseudo transcripts")
    inventory = transcripts[0].inventory
    ids = ids or [str(i) for i in range(len(feats))]
    dim = feats[0].shape[1]
    n_states = sum(1 if u == inventory.silence_id else 3 for u in range(inventory.n_surface))
    all_frames = np.vstack(feats)
    model = HmmModel(
        inventory,
        np.tile(all_frames.mean(axis=0), (n_states, 1)),
        np.tile(np.maximum(all_frames.var(axis=0), VAR_FLOOR), (n_states, 1)),
        np.full(n_states, 0.5),
    )
    stats = _Stats.zeros(n_states, dim)
    for x, units, uid in zip(feats, transcripts, ids):
        if not _usable(x, units, uid):
            continue
        chain = model.chain(units.ids)
        edges = (np.arange(len(chain) + 1) * len(x)) // len(chain)
        path = np.repeat(chain, np.diff(edges))
        stats.add_path(x, path)
    return _reestimate(model, stats)


def viterbi_align(hmm: HmmModel, feats: np.ndarray, units: UnitSequence) -> tuple[np.ndarray, float]:
    """Best state path through the concatenated unit chains, and its log probability.

    The path starts in the first state, ends in the last one and includes the final exit.
    """
    if len(units) == 0:
        raise AlignmentError("Cannot align an empty unit sequence")
    chain = hmm.chain(units.ids)
    n, t_len = len(chain), len(feats)
    if t_len < n:
        raise AlignmentError(f"{t_len} frames cannot traverse {n} states")
    log_b = hmm.log_emissions(feats)[:, chain]
    log_stay = np.log(hmm.stay[chain])
    log_move = np.log1p(-hmm.stay[chain])

    delta = np.full(n, -np.inf)
    delta[0] = log_b[0, 0]
    back = np.zeros((t_len, n), dtype=np.int64)
    for t in range(1, t_len):
        stay = delta + log_stay
        move = np.full(n, -np.inf)
        move[1:] = delta[:-1] + log_move[:-1]
        take_move = move > stay
        back[t] = np.where(take_move, np.arange(n) - 1, np.arange(n))
        delta = np.where(take_move, move, stay) + log_b[t]
    score = delta[-1] + log_move[-1]
    if not np.isfinite(score):
        raise AlignmentError("No finite-probability path")

    path = np.empty(t_len, dtype=np.int64)
    j = n - 1
    for t in range(t_len - 1, -1, -1):
        path[t] = j
        j = back[t, j]
    return chain[path], float(score)


@dataclass
class HmmTrainResult:
    model: HmmModel
    log_likelihood: list[float]


def hmm_train(feats: Sequence[np.ndarray], transcripts: Sequence[UnitSequence], iterations: int,
              init: Optional[HmmModel] = None, ids: Optional[Sequence[str]] = None,
              workers: int = 1) -> HmmTrainResult:
    """Hard-EM: align everything, re-estimate; total aligned log-likelihood is non-decreasing."""
    model = init or hmm_init(feats, transcripts, ids)
    ids = ids or [str(i) for i in range(len(feats))]
    usable = [k for k, (x, u, uid) in enumerate(zip(feats, transcripts, ids)) if _usable(x, u, uid)]
    trace: list[float] = []

    def align_all(m: HmmModel) -> tuple[_Stats, float]:
        results = parallel_map(lambda k: viterbi_align(m, feats[k], transcripts[k]), usable, workers)
        stats = _Stats.zeros(m.n_states, m.means.shape[1])
        total = 0.0
        for k, (path, score) in zip(usable, results):
            stats.add_path(feats[k], path)
            total += score
        return stats, total

    for iteration in range(iterations):
        stats, total = align_all(model)
        trace.append(total)
        logger.info("HMM iteration %d: aligned log-likelihood %.3f", iteration, total)
        model = _reestimate(model, stats)
    if iterations:
        trace.append(align_all(model)[1])
    return HmmTrainResult(model, trace)


def _lm_logs(lm: np.ndarray, weight: float) -> np.ndarray:
    return weight * _log(lm) if weight > 0 else np.zeros_like(lm)


def score_sequence(hmm: HmmModel, feats: np.ndarray, units: UnitSequence, lm: np.ndarray,
                   lm_weight: float = 1.0) -> float:
    """Best-path acoustic score of a given unit sequence plus its weighted bigram LM score."""
    try:
        acoustic = viterbi_align(hmm, feats, units)[1]
    except AlignmentError:
        return -np.inf
    logs = _lm_logs(lm, lm_weight)
    boundary = lm.shape[0] - 1
    prev = boundary
    lm_score = 0.0
    for u in units.ids:
        lm_score += logs[prev, u]
        prev = u
    return float(acoustic + lm_score + logs[prev, boundary])


def hmm_decode(hmm: HmmModel, feats: np.ndarray, lm: np.ndarray, lm_weight: float = 1.0,
               beam: float = 200.0, max_retries: int = 3) -> UnitSequence:
    """Viterbi over the looped unit lattice with bigram LM scores at unit boundaries."""
    for attempt in range(max_retries + 1):
        result = _decode_once(hmm, feats, lm, lm_weight, beam if attempt < max_retries else np.inf)
        if result is not None:
            return result
        logger.warning("HMM decode: everything pruned at beam %.1f, widening", beam)
        beam *= 2.0
    raise AlignmentError("HMM decoding found no complete path")


def _decode_once(hmm: HmmModel, feats: np.ndarray, lm: np.ndarray, lm_weight: float,
                 beam: float) -> Optional[UnitSequence]:
    n_units = hmm.inventory.n_surface
    boundary = n_units
    logs = _lm_logs(lm, lm_weight)
    first, last = hmm.first_state, hmm.last_state
    n = hmm.n_states
    log_b = hmm.log_emissions(feats)
    log_stay = np.log(hmm.stay)
    log_move = np.log1p(-hmm.stay)
    is_first = np.zeros(n, dtype=bool)
    is_first[first] = True
    within_prev = np.arange(n) - 1  # predecessor inside the chain (invalid for first states)

    delta = np.full(n, -np.inf)
    delta[first] = logs[boundary, :n_units] + log_b[0, first]
    t_len = len(feats)
    back = np.zeros((t_len, n), dtype=np.int64)
    crossed = np.zeros((t_len, n), dtype=bool)
    crossed[0, first] = True
    for t in range(1, t_len):
        stay = delta + log_stay
        move = np.full(n, -np.inf)
        inner = ~is_first
        move[inner] = delta[within_prev[inner]] + log_move[within_prev[inner]]
        # unit u (last state) -> unit v (first state)
        exits = delta[last] + log_move[last]
        entry = exits[:, None] + logs[:n_units, :n_units]
        best_from = np.argmax(entry, axis=0)
        entry_score = entry[best_from, np.arange(n_units)]

        new = stay.copy()
        bp = np.arange(n)
        cr = np.zeros(n, dtype=bool)
        better = move > new
        new[better], bp[better] = move[better], within_prev[better]
        enter = entry_score > new[first]
        new[first[enter]] = entry_score[enter]
        bp[first[enter]] = last[best_from[enter]]
        cr[first[enter]] = True

        delta = new + log_b[t]
        if np.isfinite(beam):
            delta[delta < delta.max() - beam] = -np.inf
        back[t], crossed[t] = bp, cr

    final = delta[last] + log_move[last] + logs[:n_units, boundary]
    if not np.any(np.isfinite(final)):
        return None
    j = int(last[np.argmax(final)])
    unit_of_state = np.repeat(np.arange(n_units), hmm.n_states_of)
    units: list[int] = []
    for t in range(t_len - 1, -1, -1):
        if crossed[t, j]:
            units.append(int(unit_of_state[j]))
        j = back[t, j]
    return UnitSequence(tuple(reversed(units)), hmm.inventory)


# ============================================================================
# CTC
# ============================================================================

def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed: one per label plus one blank between repeated labels."""
    repeats = sum(1 for a, b in zip(target[:-1], target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logits: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """-log sum over CTC alignments of prod of frame probabilities (log-domain forward-backward)."""
    x = logits.values
    t_len = x.shape[0]
    target = [int(u) for u in target]
    if t_len < ctc_min_frames(target):
        raise CtcError(f"{t_len} frames too short for a target of {len(target)} labels")
    log_probs = x - logsumexp(x, axis=1, keepdims=True)

    ext = [blank]
    for u in target:
        ext.extend([u, blank])
    ext = np.array(ext, dtype=np.int64)
    s_len = len(ext)
    # skip transition s-2 -> s allowed for non-blank labels differing from s-2
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = log_probs[:, ext]
    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[can_skip] = np.logaddexp(acc[can_skip], prev[np.flatnonzero(can_skip) - 2])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = can_skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[skip_from] = np.logaddexp(acc[skip_from], nxt[np.flatnonzero(skip_from) + 2])
        beta[t] = acc + emit[t]

    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if s_len > 1 else alpha[-1, -1]
    if not np.isfinite(log_z):
        raise CtcError("CTC target has zero probability")

    def backward(g):
        occupancy = np.exp(alpha + beta - emit - log_z)
        posterior = np.zeros_like(x)
        np.add.at(posterior.T, ext, occupancy.T)
        G.accumulate(logits, float(g) * (np.exp(log_probs) - posterior))

    return G.custom_op(np.array(-log_z), (logits,), backward)


def ctc_collapse(frame_ids: Sequence[int], blank: int) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for u in frame_ids:
        u = int(u)
        if u != prev and u != blank:
            out.append(u)
        prev = u
    return tuple(out)


class CtcModel:
    """Two conv1d layers over framewise features, |V|+1 logits (blank last)."""

    def __init__(self, in_dim: int, inventory: UnitInventory, channels: int = 64, kernel: int = 5,
                 rng: Optional[np.random.Generator] = None, input_mean: Optional[np.ndarray] = None,
                 input_std: Optional[np.ndarray] = None):
        rng = rng or np.random.default_rng(0)
        self.inventory = inventory
        self.in_dim = in_dim
        self.channels = channels
        self.kernel = kernel
        left = (kernel - 1) // 2
        self.padding = (left, kernel - 1 - left)
        self.input_mean = np.zeros(in_dim) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.ones(in_dim) if input_std is None else np.asarray(input_std, dtype=np.float64)
        n_out = inventory.n_surface + 1
        self.params = ParameterSet()
        self.params.add("ctc.w0", rng.normal(0.0, 1.0 / np.sqrt(kernel * in_dim), size=(kernel, in_dim, channels)))
        self.params.add("ctc.b0", np.zeros(channels))
        self.params.add("ctc.w1", rng.normal(0.0, 1.0 / np.sqrt(kernel * channels), size=(kernel, channels, n_out)))
        self.params.add("ctc.b1", np.zeros(n_out))

    @property
    def n_outputs(self) -> int:
        return self.params["ctc.b1"].shape[0]

    def forward(self, feats: np.ndarray) -> Tensor:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.in_dim:
            raise CtcError(f"CTC model expects T x {self.in_dim} features, got {feats.shape}")
        x = constant((feats - self.input_mean) / self.input_std)
        h = G.relu(G.conv1d(x, self.params["ctc.w0"], self.params["ctc.b0"], self.padding))
        return G.conv1d(h, self.params["ctc.w1"], self.params["ctc.b1"], self.padding)

    def save(self, path: str) -> None:
        arrays = {**self.params.snapshot(), "input_mean": self.input_mean, "input_std": self.input_std}
        G.save_checkpoint(path, arrays, meta={
            "symbols": list(self.inventory.symbols), "kind": self.inventory.kind,
            "in_dim": self.in_dim, "channels": self.channels, "kernel": self.kernel,
        })

    @classmethod
    def load(cls, path: str) -> "CtcModel":
        arrays, meta = G.load_checkpoint(path)
        inventory = UnitInventory(meta["symbols"][1:-1], kind=meta["kind"])
        model = cls(int(meta["in_dim"]), inventory, int(meta["channels"]), int(meta["kernel"]),
                    input_mean=arrays.pop("input_mean"), input_std=arrays.pop("input_std"))
        model.params.load(arrays)
        return model


def ctc_greedy_decode(model: CtcModel, feats: np.ndarray) -> UnitSequence:
    frame_ids = np.argmax(model.forward(feats).values, axis=1)
    return UnitSequence(ctc_collapse(frame_ids, model.inventory.blank_id), model.inventory)


@dataclass
class CtcTrainResult:
    model: CtcModel
    train_loss: list[float]
    val_per: list[float]
    best_epoch: int


def ctc_train(feats: Sequence[np.ndarray], targets: Sequence[UnitSequence],
              val: Sequence[tuple[np.ndarray, UnitSequence]], inventory: UnitInventory,
              epochs: int = 15, lr: float = 2e-3, channels: int = 64, kernel: int = 5, seed: int = 0,
              normalize: bool = True, workers: int = 1) -> CtcTrainResult:
    """Adam, one utterance per update; the epoch with the lowest validation PER is kept."""
    pairs = [(x, t) for x, t in zip(feats, targets) if len(x) >= ctc_min_frames(t.ids)]
    if len(pairs) < len(feats):
        logger.warning("CTC: skipped %d utterances shorter than their targets", len(feats) - len(pairs))
    if not pairs:
        raise CtcError("No usable CTC training utterances")
    rng = np.random.default_rng(seed)
    stacked = np.vstack([x for x, _ in pairs])
    mean = stacked.mean(axis=0) if normalize else None
    std = np.maximum(stacked.std(axis=0), 1e-3) if normalize else None
    model = CtcModel(stacked.shape[1], inventory, channels, kernel, rng, mean, std)
    opt = AdamState(lr=lr)

    def evaluate() -> float:
        hyps = parallel_map(lambda item: ctc_greedy_decode(model, item[0]), list(val), workers)
        return unit_error_rate(zip(hyps, [ref for _, ref in val]))

    best_per, best_epoch, best = np.inf, -1, model.params.snapshot()
    losses, pers = [], []
    for epoch in range(epochs):
        total = 0.0
        for k in rng.permutation(len(pairs)):
            x, target = pairs[k]
            try:
                loss = ctc_loss(model.forward(x), target.ids, inventory.blank_id)
                loss.backward()
            except NonFiniteError as e:
                raise CtcError(f"CTC training diverged in epoch {epoch}: {e}") from e
            adam_step(model.params, opt)
            total += loss.item() / len(x)
        losses.append(total / len(pairs))
        per = evaluate() if val else float("nan")
        pers.append(per)
        logger.info("CTC epoch %d: loss/frame %.4f, validation PER %.4f", epoch, losses[-1], per)
        if not val or per < best_per:
            best_per, best_epoch, best = per, epoch, model.params.snapshot()
    model.params.load(best)
    return CtcTrainResult(model, losses, pers, best_epoch)
