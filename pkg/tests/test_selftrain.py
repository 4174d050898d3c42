import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from src.errors import AlignmentError, CtcError, InventoryError
from src.services.grad import grad_check
from src.services.selftrain import (
    CtcModel,
    HmmModel,
    PseudoTranscriptSet,
    ctc_collapse,
    ctc_greedy_decode,
    ctc_loss,
    ctc_min_frames,
    ctc_train,
    hmm_decode,
    hmm_init,
    hmm_train,
    parallel_map,
    score_sequence,
    viterbi_align,
)
from src.services.grad import constant
from src.services.textproc import UnitInventory, UnitSequence


@pytest.fixture
def pair_inventory():
    # surface ids: 0 = <sil>, 1 = a, 2 = b; blank = 3
    return UnitInventory(["a", "b"])


@pytest.fixture
def hmm(pair_inventory, rng):
    n_states = 1 + 3 + 3
    return HmmModel(
        pair_inventory,
        rng.normal(size=(n_states, 2)),
        rng.uniform(0.5, 1.5, size=(n_states, 2)),
        rng.uniform(0.2, 0.8, size=n_states),
    )


@pytest.fixture
def bigram(rng):
    lm = rng.uniform(0.1, 1.0, size=(4, 4))
    lm[3, 3] = 0.0
    return lm / lm.sum(axis=1, keepdims=True)


def _compositions(total, parts):
    """Every way to write `total` as `parts` positive integers."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        edges = (0, *cuts, total)
        yield [b - a for a, b in zip(edges, edges[1:])]


def test_ctc_loss_matches_path_enumeration(rng):
    blank, n_out, t_len = 3, 4, 4
    logits = rng.normal(size=(t_len, n_out))
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    for target in [(1, 2), (1, 1), (2,), (0, 1, 2)]:
        scores = [
            sum(log_probs[t, u] for t, u in enumerate(path))
            for path in itertools.product(range(n_out), repeat=t_len)
            if ctc_collapse(path, blank) == target
        ]
        expected = -logsumexp(scores)
        assert ctc_loss(constant(logits), target, blank).item() == pytest.approx(expected, abs=1e-10)


def test_ctc_loss_grad_check(rng):
    logits = rng.normal(size=(6, 4))
    assert grad_check(lambda t: ctc_loss(t, (1, 1, 2), 3), logits) < 1e-6


def test_ctc_needs_enough_frames(rng):
    assert ctc_min_frames((1, 1, 2)) == 4
    with pytest.raises(CtcError):
        ctc_loss(constant(rng.normal(size=(3, 4))), (1, 1, 2), 3)


def test_ctc_collapse_merges_then_drops_blanks():
    assert ctc_collapse([1, 1, 3, 1, 2, 2, 3], blank=3) == (1, 1, 2)
    assert ctc_collapse([3, 3], blank=3) == ()


def test_viterbi_matches_duration_enumeration(hmm, pair_inventory, rng):
    units = UnitSequence((1, 2), pair_inventory)
    feats = rng.normal(size=(8, 2))
    chain = hmm.chain(units.ids)
    log_b = hmm.log_emissions(feats)
    best, best_path = -np.inf, None
    for durations in _compositions(len(feats), len(chain)):
        path = np.repeat(chain, durations)
        score = log_b[np.arange(len(feats)), path].sum()
        score += sum((d - 1) * np.log(hmm.stay[s]) + np.log1p(-hmm.stay[s]) for s, d in zip(chain, durations))
        if score > best:
            best, best_path = score, path
    path, score = viterbi_align(hmm, feats, units)
    assert score == pytest.approx(best, abs=1e-9)
    np.testing.assert_array_equal(path, best_path)


def test_viterbi_rejects_impossible_alignments(hmm, pair_inventory, rng):
    with pytest.raises(AlignmentError):
        viterbi_align(hmm, rng.normal(size=(5, 2)), UnitSequence((1, 2), pair_inventory))
    with pytest.raises(AlignmentError):
        viterbi_align(hmm, rng.normal(size=(5, 2)), UnitSequence((), pair_inventory))


def test_decode_finds_best_scoring_sequence(hmm, pair_inventory, bigram, rng):
    feats = rng.normal(size=(6, 2))
    best = -np.inf
    for length in range(1, 7):
        for ids in itertools.product(range(3), repeat=length):
            best = max(best, score_sequence(hmm, feats, UnitSequence(ids, pair_inventory), bigram, 1.0))
    decoded = hmm_decode(hmm, feats, bigram, lm_weight=1.0, beam=np.inf)
    assert score_sequence(hmm, feats, decoded, bigram, 1.0) == pytest.approx(best, abs=1e-6)


def test_score_sequence_of_unalignable_units_is_minus_infinity(hmm, pair_inventory, bigram, rng):
    assert score_sequence(hmm, rng.normal(size=(2, 2)), UnitSequence((1,), pair_inventory), bigram) == -np.inf


def _synthetic_corpus(inventory, rng, n=6):
    centers = {0: np.array([0.0, 0.0]), 1: np.array([4.0, 0.0]), 2: np.array([0.0, 4.0])}
    feats, transcripts = [], []
    for _ in range(n):
        ids = [int(rng.integers(0, 3))]
        while len(ids) < int(rng.integers(2, 5)):
            # decoder output never repeats a unit back to back
            ids.append(int((ids[-1] + rng.integers(1, 3)) % 3))
        ids = tuple(ids)
        frames = [centers[u] + 0.3 * rng.normal(size=(int(rng.integers(4, 9)), 2)) for u in ids]
        feats.append(np.vstack(frames))
        transcripts.append(UnitSequence(ids, inventory))
    return feats, transcripts


def test_hmm_training_never_lowers_aligned_likelihood(pair_inventory, rng):
    feats, transcripts = _synthetic_corpus(pair_inventory, rng)
    result = hmm_train(feats, transcripts, iterations=4)
    trace = result.log_likelihood
    assert len(trace) == 5
    assert all(b >= a - 1e-6 for a, b in zip(trace, trace[1:]))
    assert np.all(result.model.variances >= 1e-4)


def test_hmm_init_requires_transcripts():
    with pytest.raises(AlignmentError):
        hmm_init([], [])


def test_hmm_save_load(tmp_path, hmm):
    path = str(tmp_path / "hmm.ckpt")
    hmm.save(path)
    loaded = HmmModel.load(path)
    assert loaded.inventory == hmm.inventory
    np.testing.assert_array_equal(loaded.means, hmm.means)
    np.testing.assert_array_equal(loaded.stay, hmm.stay)


def test_pseudo_transcripts_save_load(tmp_path, pair_inventory):
    pts = PseudoTranscriptSet("hmm", {
        "u2": UnitSequence((1, 0, 2), pair_inventory),
        "u1": UnitSequence((2,), pair_inventory),
    })
    path = str(tmp_path / "hmm.tsv")
    pts.save(path)
    loaded = PseudoTranscriptSet.load(path, pair_inventory)
    assert loaded.stage == "hmm"
    assert loaded.transcripts == pts.transcripts
    with open(path, encoding="utf-8") as f:
        assert [line.split("\t")[0] for line in f] == ["u1", "u2"]


def test_pseudo_transcript_stage_tags(tmp_path, pair_inventory):
    with pytest.raises(InventoryError):
        PseudoTranscriptSet("oracle")
    path = tmp_path / "mixed.tsv"
    path.write_text("u1\tgan\ta\nu2\thmm\tb\n", encoding="utf-8")
    with pytest.raises(InventoryError):
        PseudoTranscriptSet.load(str(path), pair_inventory)


def test_ctc_train_selects_an_epoch_and_learns(pair_inventory, rng):
    feats, transcripts = _synthetic_corpus(pair_inventory, rng, n=5)
    val = list(zip(feats[:2], transcripts[:2]))
    result = ctc_train(feats, transcripts, val, pair_inventory, epochs=6, lr=1e-2, channels=8, kernel=3, seed=1)
    assert len(result.train_loss) == 6
    assert len(result.val_per) == 6
    assert 0 <= result.best_epoch < 6
    assert result.val_per[result.best_epoch] == min(result.val_per)
    assert result.train_loss[-1] < result.train_loss[0]


def test_ctc_train_needs_usable_utterances(pair_inventory):
    short = [np.zeros((2, 2))]
    with pytest.raises(CtcError):
        ctc_train(short, [UnitSequence((1, 1, 2), pair_inventory)], [], pair_inventory, epochs=1)


def test_ctc_model_checkpoint(tmp_path, pair_inventory, rng):
    model = CtcModel(2, pair_inventory, channels=4, kernel=3, rng=rng, input_mean=np.ones(2), input_std=np.full(2, 2.0))
    path = str(tmp_path / "ctc.ckpt")
    model.save(path)
    loaded = CtcModel.load(path)
    feats = rng.normal(size=(7, 2))
    np.testing.assert_array_equal(loaded.forward(feats).values, model.forward(feats).values)
    assert ctc_greedy_decode(loaded, feats) == ctc_greedy_decode(model, feats)
    with pytest.raises(CtcError):
        model.forward(np.zeros((4, 3)))


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, [3, 1, 2], workers=3) == [9, 1, 4]
