"""Corpus access views: which stage may read audio, which may read transcripts, and how many."""
import json
import logging
import os
from collections import defaultdict
from typing import Iterable, Literal, Optional

from src.errors import TranscriptAccessError
from src.services.signal import Waveform, read_wav
from src.services.textproc import UnitSequence
from src.services.toylang import Manifest, Utterance, load_audio

logger = logging.getLogger(__name__)

Role = Literal["training", "validation", "evaluation", "oracle", "text"]


class AccessMonitor:
    """
    Records every transcript read by (split, role).

    Counts are distinct utterance ids, so a stage that reads the same validation
    transcript twice still uses one slot of the validation cap.
    """

    def __init__(self):
        self._ids: dict[tuple[str, str], set[str]] = defaultdict(set)

    def record(self, split: str, role: str, utt_id: str) -> None:
        self._ids[(split, role)].add(utt_id)

    def reads(self, split: Optional[str] = None, role: Optional[str] = None) -> int:
        return sum(
            len(ids) for (s, r), ids in self._ids.items()
            if (split is None or s == split) and (role is None or r == role)
        )

    def snapshot(self) -> dict[tuple[str, str], frozenset[str]]:
        return {key: frozenset(ids) for key, ids in self._ids.items()}

    def since(self, before: dict[tuple[str, str], frozenset[str]]) -> dict[str, dict[str, list[str]]]:
        """Ids read after `before` was taken, as {split: {role: [ids]}}."""
        delta: dict[str, dict[str, list[str]]] = {}
        for (split, role), ids in sorted(self._ids.items()):
            new = sorted(ids - before.get((split, role), frozenset()))
            if new:
                delta.setdefault(split, {})[role] = new
        return delta

    def merge(self, reads: dict[str, dict[str, list[str]]]) -> None:
        """Replay reads recorded by a cached stage."""
        for split, roles in reads.items():
            for role, ids in roles.items():
                self._ids[(split, role)].update(ids)

    def as_dict(self) -> dict[str, dict[str, int]]:
        result: dict[str, dict[str, int]] = {}
        for (split, role), ids in sorted(self._ids.items()):
            result.setdefault(split, {})[role] = len(ids)
        return result

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)


class SpeechView:
    """Audio only. There is no way to get a transcript out of this view."""

    def __init__(self, manifest: Manifest):
        self._root = manifest.root
        self._paths = {u.id: u.wav_path for u in manifest.utterances if u.wav_path is not None}
        self._splits = {u.id: u.split for u in manifest.utterances if u.wav_path is not None}

    def ids(self, split: Optional[str] = None) -> list[str]:
        return sorted(uid for uid, s in self._splits.items() if split is None or s == split)

    def split_of(self, utt_id: str) -> str:
        return self._splits[utt_id]

    def audio(self, utt_id: str, sample_rate: Optional[int] = None) -> Waveform:
        path = self._paths.get(utt_id)
        if path is None:
            raise TranscriptAccessError(f"No audio for {utt_id} in this view")
        return read_wav(path if os.path.isabs(path) else os.path.join(self._root, path), expected_rate=sample_rate)


class TextView:
    """Unpaired text only (no audio access)."""

    def __init__(self, transcripts: Iterable[tuple[str, UnitSequence]], monitor: AccessMonitor,
                 split: str = "train"):
        self._items = sorted(transcripts, key=lambda item: item[0])
        self._monitor = monitor
        self._split = split

    def __len__(self) -> int:
        return len(self._items)

    def transcripts(self) -> list[UnitSequence]:
        for uid, _ in self._items:
            self._monitor.record(self._split, "text", uid)
        return [t for _, t in self._items]

    @classmethod
    def from_manifest(cls, manifest: Manifest, monitor: AccessMonitor) -> "TextView":
        return cls(((u.id, u.transcript) for u in manifest.utterances if u.transcript is not None), monitor)


class PairedView:
    """
    Audio and transcripts of one split, with a read cap.

    Only the first `cap` utterances (by id) are exposed; asking for any other
    transcript raises TranscriptAccessError.
    """

    def __init__(self, manifest: Manifest, split: str, role: Role, monitor: AccessMonitor,
                 cap: Optional[int] = None, only: Optional[Iterable[str]] = None):
        utterances = [u for u in manifest.by_split(split) if u.transcript is not None]
        if only is not None:
            keep = set(only)
            utterances = [u for u in utterances if u.id in keep]
        if cap is not None:
            if len(utterances) > cap:
                logger.info("Paired %s view limited to %d of %d utterances", split, cap, len(utterances))
            utterances = utterances[:cap]
        self._manifest = manifest
        self._by_id = {u.id: u for u in utterances}
        self.split = split
        self.role = role
        self.cap = cap
        self._monitor = monitor

    def __len__(self) -> int:
        return len(self._by_id)

    def ids(self) -> list[str]:
        return sorted(self._by_id)

    def audio(self, utt_id: str, sample_rate: Optional[int] = None) -> Waveform:
        return load_audio(self._manifest, self._utterance(utt_id), sample_rate)

    def transcript(self, utt_id: str) -> UnitSequence:
        utt = self._utterance(utt_id)
        self._monitor.record(self.split, self.role, utt_id)
        return utt.transcript

    def _utterance(self, utt_id: str) -> Utterance:
        utt = self._by_id.get(utt_id)
        if utt is None:
            raise TranscriptAccessError(f"{utt_id} is outside the paired {self.split} view (cap={self.cap})")
        return utt
