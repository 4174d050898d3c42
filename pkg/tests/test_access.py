import json

import numpy as np
import pytest

from src.errors import TranscriptAccessError
from src.middlewares.access import AccessMonitor, PairedView, SpeechView, TextView
from src.services.textproc import UnitSequence
from src.services.toylang import Manifest, Utterance, break_pairing, generate_corpus, preset


@pytest.fixture
def manifest(inventory):
    def utt(uid, split):
        return Utterance(uid, f"wavs/{uid}.wav", split, UnitSequence((1, 2), inventory))
    return Manifest([utt("t1", "train"), utt("t2", "train"), utt("v1", "valid"), utt("v2", "valid"),
                     utt("v3", "valid"), utt("e1", "test")], "toy", 0)


def test_monitor_counts_distinct_ids():
    monitor = AccessMonitor()
    monitor.record("valid", "validation", "v1")
    monitor.record("valid", "validation", "v1")
    monitor.record("test", "evaluation", "e1")
    assert monitor.reads() == 2
    assert monitor.reads(split="valid") == 1
    assert monitor.reads(role="evaluation") == 1
    assert monitor.as_dict() == {"test": {"evaluation": 1}, "valid": {"validation": 1}}


def test_monitor_delta_and_replay(tmp_path):
    monitor = AccessMonitor()
    monitor.record("valid", "validation", "v1")
    before = monitor.snapshot()
    monitor.record("valid", "validation", "v2")
    monitor.record("valid", "validation", "v1")
    delta = monitor.since(before)
    assert delta == {"valid": {"validation": ["v2"]}}

    replayed = AccessMonitor()
    replayed.merge(delta)
    replayed.merge(delta)
    assert replayed.reads() == 1
    path = tmp_path / "access.json"
    monitor.save(str(path))
    assert json.loads(path.read_text(encoding="utf-8")) == {"valid": {"validation": 2}}


def test_paired_view_caps_and_records(manifest):
    monitor = AccessMonitor()
    view = PairedView(manifest, "valid", "validation", monitor, cap=2)
    assert view.ids() == ["v1", "v2"]
    assert len(view) == 2
    view.transcript("v1")
    view.transcript("v2")
    with pytest.raises(TranscriptAccessError):
        view.transcript("v3")
    with pytest.raises(TranscriptAccessError):
        view.transcript("t1")
    assert monitor.as_dict() == {"valid": {"validation": 2}}


def test_paired_view_only_filter(manifest):
    view = PairedView(manifest, "train", "training", AccessMonitor(), only=["t2", "zz"])
    assert view.ids() == ["t2"]


def test_speech_view_never_exposes_transcripts(tmp_path):
    spec = preset("unambig")
    corpus = generate_corpus(spec, 10, str(tmp_path), seed=0)
    speech, text = break_pairing(corpus, np.random.default_rng(0))
    view = SpeechView(speech)
    assert not hasattr(view, "transcript")
    train_ids = view.ids("train")
    assert train_ids and all(view.split_of(uid) == "train" for uid in train_ids)
    assert len(view.audio(train_ids[0], sample_rate=16000)) > 0
    with pytest.raises(TranscriptAccessError):
        view.audio(text.utterances[0].id)


def test_text_view_records_text_role(manifest):
    monitor = AccessMonitor()
    text_only = Manifest(manifest.by_split("train"), "toy", 0)
    view = TextView.from_manifest(text_only, monitor)
    assert len(view) == 2
    assert all(isinstance(t, UnitSequence) for t in view.transcripts())
    assert monitor.as_dict() == {"train": {"text": 2}}
