import os

import numpy as np
import pytest

from src.errors import CorpusError
from src.services.signal import StftConfig
from src.services.textproc import UnitSequence, g2p_convert
from src.services.toylang import (
    MAX_PHONES,
    MIN_PHONES,
    Manifest,
    PhoneSpan,
    ToyLanguageSpec,
    break_pairing,
    build_lexicon,
    classify_frames_by_template,
    formant_separability,
    frame_labels_from_spans,
    generate_corpus,
    mismatched_language,
    phones_to_graphemes,
    preset,
    render_utterance,
    render_with_alignment,
    sample_sentence,
    sample_text_corpus,
    spell_words,
    split_counts,
    utterance_rng,
)


@pytest.fixture(scope="module")
def unambig():
    return preset("unambig")


@pytest.fixture(scope="module")
def digraph():
    return preset("digraph")


def test_presets_share_phones_and_lm(unambig, digraph):
    assert unambig.phones == digraph.phones
    np.testing.assert_array_equal(unambig.lm, digraph.lm)
    assert 8 <= len(unambig.phones) <= 20
    np.testing.assert_allclose(unambig.lm.sum(axis=1), 1.0)


def test_digraph_spelling_is_multi_character(unambig, digraph):
    assert all(len(g) == 1 for g in unambig.orthography.values())
    assert any(len(g) > 1 for g in digraph.orthography.values())
    assert len(digraph.grapheme_inventory().units) < sum(len(g) for g in digraph.orthography.values())


def test_unknown_preset():
    with pytest.raises(CorpusError):
        preset("klingon")


def test_spec_validation(unambig):
    with pytest.raises(CorpusError):
        ToyLanguageSpec(unambig.name, unambig.phones, unambig.lm[:-1], unambig.templates, unambig.orthography)
    templates = dict(unambig.templates)
    del templates["a"]
    with pytest.raises(CorpusError):
        ToyLanguageSpec(unambig.name, unambig.phones, unambig.lm, templates, unambig.orthography)


def test_spec_save_load(tmp_path, digraph):
    path = str(tmp_path / "language.ini")
    digraph.save(path)
    loaded = ToyLanguageSpec.load(path)
    assert loaded.phones == digraph.phones
    assert loaded.orthography == digraph.orthography
    assert loaded.templates == digraph.templates
    assert loaded.snr_db == digraph.snr_db
    np.testing.assert_array_equal(loaded.lm, digraph.lm)


def test_sentences_respect_length_bounds(unambig):
    rng = np.random.default_rng(0)
    for _ in range(50):
        sentence = sample_sentence(unambig, rng)
        assert MIN_PHONES <= len(sentence) <= MAX_PHONES
        assert sentence.inventory == unambig.inventory


def test_rendering_is_deterministic_per_utterance(unambig):
    phones = sample_sentence(unambig, utterance_rng(5, "utt00001"))
    a = render_utterance(phones, unambig, utterance_rng(5, "utt00001"))
    b = render_utterance(phones, unambig, utterance_rng(5, "utt00001"))
    np.testing.assert_array_equal(a.samples, b.samples)


def test_alignment_spans_tile_the_waveform(unambig):
    phones = sample_sentence(unambig, np.random.default_rng(1))
    wave, spans = render_with_alignment(phones, unambig, np.random.default_rng(2))
    assert [s.unit_id for s in spans] == list(phones.ids)
    assert spans[0].start == 0
    assert spans[-1].end == len(wave)
    assert all(a.end == b.start for a, b in zip(spans, spans[1:]))


def test_phones_are_separable_by_formants_at_20_db():
    noisy = preset("unambig", snr_db=20.0)
    rng = np.random.default_rng(3)
    cfg = StftConfig(n_fft=512, hop_length=128, win_length=512)
    truth, predicted = [], []
    for _ in range(5):
        wave, spans = render_with_alignment(sample_sentence(noisy, rng), noisy, rng)
        t, p = classify_frames_by_template(wave, spans, noisy, cfg)
        truth.extend(t)
        predicted.extend(p)
    accuracy = np.mean(np.array(truth) == np.array(predicted))
    assert accuracy >= 0.95


@pytest.mark.parametrize("name", ["unambig", "digraph"])
def test_formant_separability_of_presets(name):
    assert formant_separability(preset(name, snr_db=20.0), 6, np.random.default_rng(4)) >= 0.95


def test_formant_separability_drops_when_noise_dominates():
    drowned = preset("unambig", snr_db=-20.0)
    assert formant_separability(drowned, 4, np.random.default_rng(4)) < 0.95


def test_frame_labels_follow_frame_centers():
    cfg = StftConfig(n_fft=8, hop_length=4, win_length=8)
    spans = [PhoneSpan(1, 0, 10), PhoneSpan(2, 10, 20)]
    # centers at 4, 8, 12, 16, 20 -> the last one falls past the end and keeps the last phone
    np.testing.assert_array_equal(frame_labels_from_spans(spans, 5, cfg), [1, 1, 2, 2, 2])
    with pytest.raises(CorpusError):
        frame_labels_from_spans([], 3, cfg)


def test_phones_to_graphemes_spells_words(digraph):
    phones = digraph.inventory.encode(["k", "o", "<sil>", "r", "a"])
    graphemes = phones_to_graphemes(phones, digraph)
    assert graphemes.to_text() == "c o u <sil> r h a"
    assert spell_words(phones, digraph) == ["cou", "rha"]


def test_g2p_reproduces_transcripts_with_full_lexicon(digraph):
    rng = np.random.default_rng(4)
    transcripts = [sample_sentence(digraph, rng).strip_silence() for _ in range(20)]
    lexicon = build_lexicon(digraph, transcripts)
    for phones in transcripts:
        assert g2p_convert(spell_words(phones, digraph), lexicon) == UnitSequence(
            _collapse_silence(phones), digraph.inventory
        )


def _collapse_silence(phones):
    ids = []
    for i in phones.ids:
        if i == 0 and ids and ids[-1] == 0:
            continue
        ids.append(i)
    return tuple(ids)


def test_g2p_fallback_spells_unseen_words(unambig):
    lexicon = build_lexicon(unambig)
    assert len(lexicon) == 0
    assert g2p_convert(["kasu"], lexicon).to_text() == "k a s u"


def test_digraph_fallback_covers_every_grapheme(digraph):
    lexicon = build_lexicon(digraph)
    assert lexicon.uncovered(digraph.grapheme_inventory().units) == []
    # lone halves of a digraph spell the phone they belong to
    assert g2p_convert(["he", "ei", "o"], lexicon).to_text() == "r e <sil> e <sil> o"


def test_mismatched_language_permutes_units(unambig):
    other = mismatched_language(unambig, seed=1)
    assert other.phones == unambig.phones
    assert not np.array_equal(other.lm, unambig.lm)
    np.testing.assert_allclose(other.lm.sum(axis=1), 1.0)
    assert other.lm[0, 0] == unambig.lm[0, 0]


def test_split_counts():
    assert split_counts(500, (0.8, 0.12, 0.08)) == (400, 60, 40)
    assert sum(split_counts(23, (0.8, 0.12, 0.08))) == 23
    with pytest.raises(CorpusError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_generate_corpus_serial_and_parallel_agree(tmp_path, unambig):
    serial = generate_corpus(unambig, 12, str(tmp_path / "a"), seed=9, workers=1)
    parallel = generate_corpus(unambig, 12, str(tmp_path / "b"), seed=9, workers=3)
    assert serial.digest() == parallel.digest()
    assert len(serial.by_split("train")) + len(serial.by_split("valid")) + len(serial.by_split("test")) == 12


def test_manifest_load_matches_saved(tmp_path, unambig):
    manifest = generate_corpus(unambig, 10, str(tmp_path), seed=1)
    loaded = Manifest.load(os.path.join(str(tmp_path), "manifest.tsv"), unambig.inventory)
    assert loaded.to_tsv() == manifest.to_tsv()
    assert loaded.digest() == manifest.digest()
    assert loaded.seed == 1


def test_manifest_rejects_duplicates_and_bad_lines(tmp_path, unambig):
    manifest = generate_corpus(unambig, 10, str(tmp_path), seed=1)
    with pytest.raises(CorpusError):
        Manifest(manifest.utterances + manifest.utterances[:1], "x", 0)
    bad = tmp_path / "bad.tsv"
    bad.write_text("utt1\twavs/x.wav\tsomewhere\ta\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        Manifest.load(str(bad), unambig.inventory)


def test_break_pairing_halves_are_disjoint(tmp_path, unambig):
    manifest = generate_corpus(unambig, 20, str(tmp_path), seed=2)
    speech, text = break_pairing(manifest, np.random.default_rng(0))
    speech_train = {u.id for u in speech.by_split("train")}
    text_ids = {u.id for u in text.utterances}
    assert not speech_train & text_ids
    assert speech_train | text_ids == {u.id for u in manifest.by_split("train")}
    assert all(u.transcript is None for u in speech.by_split("train"))
    assert all(u.wav_path is None for u in text.utterances)
    assert abs(len(speech_train) - len(text_ids)) <= 1


def test_text_corpus_is_seeded(unambig):
    a = sample_text_corpus(unambig, 5, seed=3)
    b = sample_text_corpus(unambig, 5, seed=3)
    assert a == b
    assert a != sample_text_corpus(unambig, 5, seed=4)
