"""Synthetic language: bigram phone LM, formant rendering, corpus generation and splitting."""
import configparser
import hashlib
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.signal.windows import tukey

from src.errors import CorpusError, InventoryError
from src.services.signal import StftConfig, Waveform, read_wav, stft, write_wav
from src.services.textproc import SILENCE, Lexicon, UnitInventory, UnitSequence, segment_graphemes

logger = logging.getLogger(__name__)

BEGIN = "<begin>"
END = "<end>"
MIN_PHONES = 3
MAX_PHONES = 30
RAMP_MS = 10.0
SPLITS = ("train", "valid", "test")


# ============================================================================
# Language spec
# ============================================================================

@dataclass(frozen=True)
class PhoneTemplate:
    """Acoustic template: formant frequencies (Hz), mean duration and jitter (ms)."""
    formants: tuple[float, ...]
    duration_ms: float
    jitter_ms: float


@dataclass
class ToyLanguageSpec:
    """
    Toy language definition.

    Fields:
        phones: unit symbols (silence excluded)
        lm: (V+1) x (V+1) row-stochastic matrix over inventory surface ids; last row is
            the sentence begin, last column the sentence end
        templates: phone (and silence) -> PhoneTemplate
        orthography: phone -> grapheme string
        snr_db: noise level, None for a clean rendering
    """
    name: str
    phones: tuple[str, ...]
    lm: np.ndarray
    templates: dict[str, PhoneTemplate]
    orthography: dict[str, str]
    snr_db: Optional[float] = 25.0
    sample_rate: int = 16000
    inventory: UnitInventory = field(init=False, repr=False)

    def __post_init__(self):
        if not 8 <= len(self.phones) <= 20:
            logger.warning("Language %s has %d phones (expected 8-20)", self.name, len(self.phones))
        self.inventory = UnitInventory(self.phones, kind="phoneme")
        self.lm = np.asarray(self.lm, dtype=np.float64)
        size = self.inventory.n_surface + 1
        if self.lm.shape != (size, size):
            raise CorpusError(f"LM must be {size}x{size}, got {self.lm.shape}")
        if np.any(self.lm < 0) or np.any(np.abs(self.lm.sum(axis=1) - 1.0) > 1e-9):
            raise CorpusError("LM rows must be non-negative and sum to 1")
        for symbol in (*self.phones, SILENCE):
            template = self.templates.get(symbol)
            if template is None:
                raise CorpusError(f"No acoustic template for {symbol}")
            if template.duration_ms <= 0 or template.jitter_ms < 0 or template.jitter_ms >= template.duration_ms:
                raise CorpusError(f"Invalid duration for {symbol}")
            if any(not 0 < f < self.sample_rate / 2 for f in template.formants):
                raise CorpusError(f"Formants of {symbol} must lie in (0, sample_rate/2)")
        missing = [p for p in self.phones if not self.orthography.get(p)]
        if missing:
            raise CorpusError(f"Orthography does not cover: {missing}")

    def grapheme_inventory(self) -> UnitInventory:
        chars = sorted({c for p in self.phones for c in self.orthography[p]})
        return UnitInventory(chars, kind="grapheme")

    def save(self, path: str) -> None:
        """Write the spec as an INI-style text file."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["language"] = {
            "name": self.name,
            "phones": ", ".join(self.phones),
            "snr_db": "none" if self.snr_db is None else repr(self.snr_db),
            "sample_rate": str(self.sample_rate),
        }
        parser["orthography"] = dict(self.orthography)
        parser["templates"] = {
            symbol: f"{' '.join(repr(f) for f in t.formants)} | {t.duration_ms!r} | {t.jitter_ms!r}"
            for symbol, t in self.templates.items()
        }
        row_names = [*self.inventory.symbols[:-1], BEGIN]
        parser["lm"] = {name: " ".join(repr(float(p)) for p in row) for name, row in zip(row_names, self.lm)}
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            parser.write(f)

    @classmethod
    def load(cls, path: str) -> "ToyLanguageSpec":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(path, encoding="utf-8"):
            raise CorpusError(f"Language spec not found: {path}")
        try:
            lang = parser["language"]
            phones = tuple(p.strip() for p in lang["phones"].split(",") if p.strip())
            templates = {}
            for symbol, text in parser["templates"].items():
                formants, duration, jitter = (part.strip() for part in text.split("|"))
                templates[symbol] = PhoneTemplate(
                    tuple(float(f) for f in formants.split()), float(duration), float(jitter)
                )
            inventory = UnitInventory(phones)
            row_names = [*inventory.symbols[:-1], BEGIN]
            lm = np.array([[float(p) for p in parser["lm"][name].split()] for name in row_names])
            snr = lang.get("snr_db", "none")
            return cls(
                name=lang["name"],
                phones=phones,
                lm=lm,
                templates=templates,
                orthography=dict(parser["orthography"]),
                snr_db=None if snr.lower() == "none" else float(snr),
                sample_rate=int(lang.get("sample_rate", "16000")),
            )
        except (KeyError, ValueError) as e:
            raise CorpusError(f"Malformed language spec {path}: {e}") from e


# Twelve phones on a grid of (F1, F2) pairs
_PHONES = ("a", "e", "i", "k", "l", "m", "n", "o", "r", "s", "u", "z")
_F1 = (300.0, 500.0, 700.0)
_F2 = (900.0, 1400.0, 2000.0, 2600.0)
_DIGRAPH_SPELLING = {"e": "ei", "o": "ou", "r": "rh", "z": "sh", "k": "c"}


def _preset_lm(n_units: int, seed: int) -> np.ndarray:
    """Sparse bigram over ids 0 (silence) .. n_units-1 plus a begin row / end column."""
    rng = np.random.default_rng(seed)
    size = n_units + 1
    boundary = n_units
    lm = np.zeros((size, size))
    units = np.arange(1, n_units)
    for row in range(size):
        if row == boundary or row == 0:
            # begin / silence -> any unit, never silence or end
            lm[row, units] = rng.dirichlet(np.full(len(units), 2.0))
            continue
        successors = rng.choice(units[units != row], size=3, replace=False)
        lm[row, successors] = rng.dirichlet(np.full(3, 1.0)) * 0.72
        lm[row, 0] = 0.22
        lm[row, boundary] = 0.06
    return lm / lm.sum(axis=1, keepdims=True)


def _preset(name: str, spelling: dict[str, str], snr_db: Optional[float]) -> ToyLanguageSpec:
    templates = {}
    for n, phone in enumerate(_PHONES):
        templates[phone] = PhoneTemplate(
            formants=(_F1[n % 3], _F2[n // 3]),
            duration_ms=110.0 + 10.0 * (n % 5),
            jitter_ms=25.0,
        )
    templates[SILENCE] = PhoneTemplate(formants=(), duration_ms=120.0, jitter_ms=30.0)
    orthography = {p: spelling.get(p, p) for p in _PHONES}
    return ToyLanguageSpec(
        name=name,
        phones=_PHONES,
        lm=_preset_lm(len(_PHONES) + 1, seed=7),
        templates=templates,
        orthography=orthography,
        snr_db=snr_db,
    )


def preset(name: Literal["unambig", "digraph"], snr_db: Optional[float] = 25.0) -> ToyLanguageSpec:
    """UNAMBIG: one grapheme per phone. DIGRAPH: same language, multi-character ambiguous spelling."""
    if name == "unambig":
        return _preset("unambig", {}, snr_db)
    if name == "digraph":
        return _preset("digraph", _DIGRAPH_SPELLING, snr_db)
    raise CorpusError(f"Unknown language preset: {name}")


def mismatched_language(spec: ToyLanguageSpec, seed: int) -> ToyLanguageSpec:
    """Same phones and acoustics, LM with permuted unit labels (a different random language)."""
    rng = np.random.default_rng(seed)
    n_surface = spec.inventory.n_surface
    perm = np.arange(n_surface + 1)
    units = np.arange(1, n_surface)
    shuffled = rng.permutation(units)
    while np.array_equal(shuffled, units):
        shuffled = rng.permutation(units)
    perm[units] = shuffled
    lm = np.zeros_like(spec.lm)
    lm[np.ix_(perm, perm)] = spec.lm
    return replace(spec, name=f"{spec.name}-mismatched", lm=lm)


# ============================================================================
# Sampling and rendering
# ============================================================================

def sample_sentence(spec: ToyLanguageSpec, rng: np.random.Generator) -> UnitSequence:
    """Markov-chain sample from the bigram LM; length kept in [3, 30] by rejection."""
    boundary = spec.inventory.n_surface
    cumulative = np.cumsum(spec.lm, axis=1)
    for _ in range(10_000):
        ids: list[int] = []
        state = boundary
        while len(ids) <= MAX_PHONES:
            nxt = int(np.searchsorted(cumulative[state], rng.random(), side="right"))
            nxt = min(nxt, boundary)
            if nxt == boundary:
                break
            ids.append(nxt)
            state = nxt
        if MIN_PHONES <= len(ids) <= MAX_PHONES and nxt == boundary:
            return UnitSequence(tuple(ids), spec.inventory)
    raise CorpusError(f"LM of {spec.name} never produced a sentence of {MIN_PHONES}-{MAX_PHONES} phones")


@dataclass(frozen=True)
class PhoneSpan:
    unit_id: int
    start: int  # sample index, inclusive
    end: int  # exclusive


def render_with_alignment(phones: UnitSequence, spec: ToyLanguageSpec,
                          rng: np.random.Generator) -> tuple[Waveform, list[PhoneSpan]]:
    """Render a phone sequence and return the sample span of every phone."""
    if phones.inventory != spec.inventory:
        raise InventoryError("Phone sequence is not over the language inventory")
    sr = spec.sample_rate
    pieces: list[np.ndarray] = []
    spans: list[PhoneSpan] = []
    voiced = []
    pos = 0
    for unit_id in phones.ids:
        symbol = spec.inventory.symbols[unit_id]
        template = spec.templates[symbol]
        ms = template.duration_ms + template.jitter_ms * rng.uniform(-1.0, 1.0)
        n = max(1, int(round(ms * sr / 1000.0)))
        segment = np.zeros(n)
        if template.formants:
            t = np.arange(n) / sr
            for k, f in enumerate(template.formants):
                segment += (0.4 / (k + 1)) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
            ramp = min(1.0, 2 * RAMP_MS * sr / 1000.0 / n)
            segment *= tukey(n, alpha=ramp)
            voiced.append(segment)
        pieces.append(segment)
        spans.append(PhoneSpan(unit_id, pos, pos + n))
        pos += n
    samples = np.concatenate(pieces) if pieces else np.zeros(0)

    if spec.snr_db is not None and len(samples):
        power = float(np.mean(np.concatenate(voiced) ** 2)) if voiced else 0.0
        sigma = np.sqrt(power / 10 ** (spec.snr_db / 10.0)) if power > 0 else 1e-3
        samples = samples + sigma * rng.standard_normal(len(samples))
    return Waveform(samples, sr), spans


def render_utterance(phones: UnitSequence, spec: ToyLanguageSpec, rng: np.random.Generator) -> Waveform:
    return render_with_alignment(phones, spec, rng)[0]


def phones_to_graphemes(phones: UnitSequence, spec: ToyLanguageSpec) -> UnitSequence:
    """Spell each word through the orthography and re-tokenize into single-character graphemes."""
    graphemes = spec.grapheme_inventory()
    chars = graphemes.units
    ids: list[int] = []
    for unit_id in phones.ids:
        if unit_id == phones.inventory.silence_id:
            ids.append(graphemes.silence_id)
            continue
        spelled = spec.orthography[phones.inventory.symbols[unit_id]]
        ids.extend(graphemes.id_of(g) for g in segment_graphemes(spelled, chars))
    return UnitSequence(tuple(ids), graphemes)


def spell_words(phones: UnitSequence, spec: ToyLanguageSpec) -> list[str]:
    """Written form: one string per silence-delimited word."""
    return ["".join(spec.orthography[p] for p in word) for word in phones.words()]


def build_lexicon(spec: ToyLanguageSpec, transcripts: Sequence[UnitSequence] = ()) -> Lexicon:
    """Entries for every word seen in `transcripts`, plus the inverted orthography as fallback.

    Characters that only occur inside a multi-character spelling get a single-character rule:
    the phone whose spelling starts with them, else the first phone whose spelling contains them.
    """
    entries: dict[str, tuple[str, ...]] = {}
    for phones in transcripts:
        for word in phones.words():
            entries.setdefault("".join(spec.orthography[p] for p in word), word)
    fallback: dict[str, tuple[str, ...]] = {}
    for phone in spec.phones:
        fallback.setdefault(spec.orthography[phone], (phone,))
    graphemes = spec.grapheme_inventory().units
    for char in graphemes:
        if char in fallback:
            continue
        owners = [p for p in spec.phones if spec.orthography[p].startswith(char)]
        owners = owners or [p for p in spec.phones if char in spec.orthography[p]]
        fallback[char] = (owners[0],)
    return Lexicon(entries, fallback, spec.inventory, graphemes=graphemes)


def frame_labels_from_spans(spans: Sequence[PhoneSpan], n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Unit id under the center sample of every STFT frame (the last span covers the tail)."""
    if not spans:
        raise CorpusError("No phone spans")
    ends = np.array([s.end for s in spans])
    centers = np.arange(n_frames) * cfg.hop_length + cfg.win_length // 2
    index = np.minimum(np.searchsorted(ends, centers, side="right"), len(spans) - 1)
    return np.array([spans[i].unit_id for i in index], dtype=np.int64)


def classify_frames_by_template(wave: Waveform, spans: Sequence[PhoneSpan], spec: ToyLanguageSpec,
                                cfg: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Label frames lying fully inside a non-silence phone by the best-matching formant template.

    Returns (true ids, predicted ids) for the scored frames.
    """
    magnitude = np.abs(stft(wave, cfg).values)
    candidates = [spec.inventory.id_of(p) for p in spec.phones]
    bins = {
        u: [int(round(f * cfg.n_fft / spec.sample_rate)) for f in spec.templates[spec.inventory.symbols[u]].formants]
        for u in candidates
    }
    truth, predicted = [], []
    for span in spans:
        if span.unit_id == spec.inventory.silence_id:
            continue
        first = -(-span.start // cfg.hop_length)
        last = (span.end - cfg.win_length) // cfg.hop_length
        for frame in range(first, min(last, magnitude.shape[0] - 1) + 1):
            spectrum = magnitude[frame]
            scores = [sum(spectrum[max(b - 1, 0):b + 2].max() for b in bins[u]) for u in candidates]
            truth.append(span.unit_id)
            predicted.append(candidates[int(np.argmax(scores))])
    return np.array(truth, dtype=np.int64), np.array(predicted, dtype=np.int64)


def formant_separability(spec: ToyLanguageSpec, n_utts: int, rng: np.random.Generator,
                         cfg: Optional[StftConfig] = None) -> float:
    """Nearest-template frame accuracy over freshly rendered sentences of `spec`."""
    cfg = cfg or StftConfig(n_fft=512, hop_length=128, win_length=512)
    truth, predicted = [], []
    for _ in range(n_utts):
        wave, spans = render_with_alignment(sample_sentence(spec, rng), spec, rng)
        t, p = classify_frames_by_template(wave, spans, spec, cfg)
        truth.append(t)
        predicted.append(p)
    truth_all, predicted_all = np.concatenate(truth), np.concatenate(predicted)
    if not len(truth_all):
        raise CorpusError(f"No scorable frames in {n_utts} rendered {spec.name} utterances")
    return float(np.mean(truth_all == predicted_all))


# ============================================================================
# Corpus
# ============================================================================

@dataclass(frozen=True)
class Utterance:
    id: str
    wav_path: Optional[str]
    split: Literal["train", "valid", "test"]
    transcript: Optional[UnitSequence] = None


@dataclass
class Manifest:
    """Ordered utterance list; wav paths are stored relative to `root`."""
    utterances: list[Utterance]
    language: str
    seed: int
    root: str = "."

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise CorpusError("Duplicate utterance ids in manifest")
        self.utterances = sorted(self.utterances, key=lambda u: u.id)

    def by_split(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def audio_path(self, utt: Utterance) -> str:
        if utt.wav_path is None:
            raise CorpusError(f"Utterance {utt.id} has no audio")
        return utt.wav_path if os.path.isabs(utt.wav_path) else os.path.join(self.root, utt.wav_path)

    def to_tsv(self) -> str:
        lines = [f"# language={self.language} seed={self.seed}"]
        for u in self.utterances:
            transcript = u.transcript.to_text() if u.transcript is not None else "-"
            lines.append(f"{u.id}\t{u.wav_path or '-'}\t{u.split}\t{transcript}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_tsv())

    @classmethod
    def load(cls, path: str, inventory: UnitInventory) -> "Manifest":
        language, seed = "external", 0
        utterances = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    meta = dict(item.split("=", 1) for item in line[1:].split() if "=" in item)
                    language = meta.get("language", language)
                    seed = int(meta.get("seed", seed))
                    continue
                parts = line.split("\t")
                if len(parts) != 4 or parts[2] not in SPLITS:
                    raise CorpusError(f"Malformed manifest line in {path}: {line!r}")
                uid, wav, split, transcript = parts
                utterances.append(Utterance(
                    id=uid,
                    wav_path=None if wav == "-" else wav,
                    split=split,
                    transcript=None if transcript == "-" else UnitSequence.from_text(transcript, inventory),
                ))
        return cls(utterances, language, seed, root=os.path.dirname(os.path.abspath(path)))

    def digest(self) -> str:
        """sha256 over the TSV text and the bytes of every referenced audio file."""
        h = hashlib.sha256(self.to_tsv().encode("utf-8"))
        for u in self.utterances:
            if u.wav_path is not None:
                with open(self.audio_path(u), "rb") as f:
                    h.update(hashlib.sha256(f.read()).digest())
        return h.hexdigest()


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    """Per-utterance generator: serial and parallel generation agree bit-exactly."""
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def split_counts(n_utts: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise CorpusError(f"Ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_valid = int(round(n_utts * ratios[1]))
    n_test = int(round(n_utts * ratios[2]))
    return n_utts - n_valid - n_test, n_valid, n_test


def generate_corpus(spec: ToyLanguageSpec, n_utts: int, out_dir: str,
                    ratios: Sequence[float] = (0.9, 0.05, 0.05), seed: int = 0, workers: int = 1) -> Manifest:
    """Render n_utts utterances to `out_dir/wavs` and write `out_dir/manifest.tsv`."""
    counts = split_counts(n_utts, ratios)
    splits = ["train"] * counts[0] + ["valid"] * counts[1] + ["test"] * counts[2]
    ids = [f"utt{i:05d}" for i in range(n_utts)]

    def build(index: int) -> Utterance:
        uid = ids[index]
        rng = utterance_rng(seed, uid)
        phones = sample_sentence(spec, rng)
        wave = render_utterance(phones, spec, rng)
        rel = os.path.join("wavs", f"{uid}.wav")
        try:
            write_wav(os.path.join(out_dir, rel), wave)
        except OSError as e:
            raise CorpusError(f"Cannot write audio for {uid}: {e}") from e
        return Utterance(uid, rel, splits[index], phones)

    os.makedirs(os.path.join(out_dir, "wavs"), exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            utterances = list(pool.map(build, range(n_utts)))
    else:
        utterances = [build(i) for i in range(n_utts)]

    manifest = Manifest(utterances, spec.name, seed, root=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.tsv"))
    logger.info("Generated corpus %s: %d train / %d valid / %d test", spec.name, *counts)
    return manifest


def load_audio(manifest: Manifest, utt: Utterance, sample_rate: Optional[int] = None) -> Waveform:
    return read_wav(manifest.audio_path(utt), expected_rate=sample_rate)


def break_pairing(manifest: Manifest, rng: np.random.Generator) -> tuple[Manifest, Manifest]:
    """Split the train utterances into a speech-only half and a text-only half (disjoint).

    Valid/test utterances are kept untouched in the speech half.
    """
    train = manifest.by_split("train")
    if len(train) < 2:
        raise CorpusError(f"Need at least 2 train utterances to break pairing, got {len(train)}")
    order = rng.permutation(len(train))
    half = len(train) // 2
    speech_ids = {train[i].id for i in order[:len(train) - half]}

    speech, text = [], []
    for u in manifest.utterances:
        if u.split != "train":
            speech.append(u)
        elif u.id in speech_ids:
            speech.append(replace(u, transcript=None))
        else:
            text.append(replace(u, wav_path=None))
    return (
        Manifest(speech, manifest.language, manifest.seed, manifest.root),
        Manifest(text, manifest.language, manifest.seed, manifest.root),
    )


def sample_text_corpus(spec: ToyLanguageSpec, n_sentences: int, seed: int) -> list[UnitSequence]:
    """Fresh LM samples for the text half (text drawn from a different source than the audio)."""
    return [sample_sentence(spec, utterance_rng(seed, f"text{i:05d}")) for i in range(n_sentences)]
