"""End-to-end orchestration: corpus, unsupervised ASR, self-training, TTS and intelligibility scoring."""
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from src.config import Config, PipelineConfig
from src.errors import ArtifactError, CheckpointError, ConfigError, GateError, RunLockedError, StageError
from src.middlewares.access import AccessMonitor, PairedView, SpeechView, TextView
from src.services import registry
from src.services.asru import GanTrainConfig, gan_train, grid_search, greedy_decode, save_generator
from src.services.feats import FeaturePipeline, segment_count_ratio
from src.services.figures import emit_attention, emit_mel_pair, write_curve_csv
from src.services.grad import load_checkpoint, save_checkpoint
from src.services.selftrain import (
    CtcModel,
    PseudoTranscriptSet,
    ctc_greedy_decode,
    ctc_train,
    hmm_decode,
    hmm_train,
    parallel_map,
)
from src.services.signal import MelFilterbank, StftConfig, Waveform, mel_filterbank, wav_to_mel, write_wav
from src.services.textproc import (
    UnitInventory,
    UnitSequence,
    estimate_bigram_lm,
    g2p_convert,
    unit_error_rate,
    word_error_rate,
)
from src.services.toylang import (
    Manifest,
    ToyLanguageSpec,
    break_pairing,
    build_lexicon,
    formant_separability,
    generate_corpus,
    mismatched_language,
    phones_to_graphemes,
    preset,
    sample_text_corpus,
    spell_words,
    split_counts,
)
from src.services.tts import GuidedAttentionConfig, TtsDims, TtsModel, synthesize, tts_train

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
TIMINGS_NAME = "timings.json"
STAGES_NAME = "stages.json"
LOCK_NAME = ".lock"


# ============================================================================
# Report
# ============================================================================

@dataclass
class RunReport:
    """
    Metrics of one run. Everything here is a pure function of the config digest.

    Fields:
        stages: per-stage metrics (gan / hmm / ctc / oracle / tts ...)
        tts: intelligibility of synthesized test transcripts (cer, wer, per)
        floor: the oracle recognizer on ground-truth test audio
        comparisons: derived numbers (ASR vs TTS, unsupervised vs supervised gaps)
        access: distinct transcript reads by split and role
    """
    mode: str
    config_digest: str
    corpus_digest: str
    language: str
    units: str
    stages: dict[str, dict] = field(default_factory=dict)
    tts: dict = field(default_factory=dict)
    floor: dict = field(default_factory=dict)
    comparisons: dict = field(default_factory=dict)
    access: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), indent=2, sort_keys=True) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "RunReport":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


def _plain(value):
    """numpy scalars/arrays and tuples -> JSON types."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _read_json(path: str):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _write_json(path: str, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_plain(data), f, indent=2, sort_keys=True)
        f.write("\n")


def stage_key(*parts) -> str:
    """Cache key of a stage: digest of its upstream keys and config sections."""
    blob = json.dumps(_plain(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def gap(unsupervised: float, supervised: float) -> dict[str, float]:
    """Absolute and relative gap of an error rate (relative to the supervised value)."""
    absolute = unsupervised - supervised
    if supervised > 0:
        relative = absolute / supervised
    else:
        relative = float("inf") if absolute > 0 else 0.0
    return {"absolute": absolute, "relative": relative}


# ============================================================================
# Run directory, lock and stage cache
# ============================================================================

@contextmanager
def run_lock(out_dir: str) -> Iterator[str]:
    """Exclusive `<out>/.lock`; a second run in the same directory fails immediately."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"Run directory {out_dir} is locked ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield path
    finally:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass


class StageRunner:
    """Runs stages in order, reusing a completed stage whose artifacts still match the registry digest."""

    def __init__(self, out_dir: str, run_id: int, monitor: AccessMonitor):
        self.out_dir = out_dir
        self.run_id = run_id
        self.monitor = monitor
        self.timings: dict[str, float] = {}
        self.dirs: dict[str, str] = {}

    def run(self, stage: str, cache_key: str, build: Callable[[str], dict]) -> tuple[str, dict]:
        record = registry.find_completed_stage(stage, cache_key)
        if record is not None:
            logger.info("Stage %s: reusing %s", stage, record.artifact_dir)
            artifact_dir = record.artifact_dir
            metrics = _read_json(os.path.join(artifact_dir, "metrics.json"))
            self.monitor.merge(_read_json(os.path.join(artifact_dir, "access.json")))
            self.timings[stage] = 0.0
            self.dirs[stage] = artifact_dir
            return artifact_dir, metrics

        artifact_dir = os.path.join(self.out_dir, "stages", f"{stage}-{cache_key[:12]}")
        if os.path.isdir(artifact_dir):
            shutil.rmtree(artifact_dir)
        os.makedirs(artifact_dir)
        before = self.monitor.snapshot()
        started = time.perf_counter()
        logger.info("Stage %s: start", stage)
        try:
            metrics = _plain(build(artifact_dir))
        except GateError:
            registry.record_stage(self.run_id, stage, cache_key, artifact_dir, status=registry.RunStatus.FAILED.value)
            raise
        except Exception as e:
            logger.error("Stage %s failed: %s", stage, e, exc_info=True)
            registry.record_stage(self.run_id, stage, cache_key, artifact_dir, status=registry.RunStatus.FAILED.value)
            raise StageError(stage, e) from e
        _write_json(os.path.join(artifact_dir, "metrics.json"), metrics)
        _write_json(os.path.join(artifact_dir, "access.json"), self.monitor.since(before))
        elapsed = time.perf_counter() - started
        registry.record_stage(self.run_id, stage, cache_key, artifact_dir, wall_clock_s=elapsed)
        logger.info("Stage %s: done in %.1f s", stage, elapsed)
        self.timings[stage] = elapsed
        self.dirs[stage] = artifact_dir
        return artifact_dir, metrics


@dataclass
class RunContext:
    cfg: PipelineConfig
    mode: str
    out_dir: str
    run_id: int
    monitor: AccessMonitor
    runner: StageRunner
    stft: StftConfig
    bank: MelFilterbank

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    def rng(self, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.run.seed, purpose])


def signal_objects(cfg: PipelineConfig) -> tuple[StftConfig, MelFilterbank]:
    s = cfg.signal
    stft_cfg = StftConfig(n_fft=s.n_fft, hop_length=s.hop_length, win_length=s.win_length, window=s.window)
    bank = mel_filterbank(stft_cfg, n_mels=s.n_mels, f_min=s.f_min, f_max=s.f_max, sample_rate=s.sample_rate)
    return stft_cfg, bank


def _resolve_out_dir(cfg: PipelineConfig, out_dir: Optional[str]) -> str:
    return Config._normalize_path(out_dir or cfg.run.output_dir)


@contextmanager
def open_run(cfg: PipelineConfig, mode: str, out_dir: Optional[str] = None) -> Iterator[RunContext]:
    """Lock the directory, register the run, and on exit persist timings/stage dirs and the run status."""
    out_dir = _resolve_out_dir(cfg, out_dir)
    try:
        stft_cfg, bank = signal_objects(cfg)
    except Exception as e:
        raise ConfigError(f"Invalid signal settings: {e}") from e
    with run_lock(out_dir):
        registry.init_db()
        run_digest = hashlib.sha256(f"{mode}:{cfg.digest()}".encode("utf-8")).hexdigest()
        run = registry.create_run(run_digest, mode, out_dir)
        monitor = AccessMonitor()
        ctx = RunContext(cfg, mode, out_dir, run.id, monitor, StageRunner(out_dir, run.id, monitor), stft_cfg, bank)
        logger.info("Run %d (%s) in %s, config %s", run.id, mode, out_dir, cfg.digest()[:12])
        try:
            yield ctx
        except Exception as e:
            registry.update_run(run.id, status=registry.RunStatus.FAILED.value, error=str(e))
            raise
        else:
            registry.update_run(run.id, status=registry.RunStatus.COMPLETED.value,
                                report_path=os.path.join(out_dir, REPORT_NAME))
        finally:
            _write_json(os.path.join(out_dir, TIMINGS_NAME), ctx.runner.timings)
            _write_json(os.path.join(out_dir, STAGES_NAME), ctx.runner.dirs)


def _finish(ctx: RunContext, report: RunReport) -> RunReport:
    report.access = ctx.monitor.as_dict()
    report.save(os.path.join(ctx.out_dir, REPORT_NAME))
    logger.info("Report written to %s", os.path.join(ctx.out_dir, REPORT_NAME))
    return report


# ============================================================================
# Sanity gates (checked after the stage so cached stages meet current thresholds)
# ============================================================================

def check_separability(accuracy: float, minimum: float) -> None:
    logger.info("Formant separability %.4f (gate %.4f)", accuracy, minimum)
    if accuracy < minimum:
        raise GateError(f"Nearest-template frame accuracy {accuracy:.4f} is below {minimum}: "
                        "corpus phones are not acoustically separable")


def check_segment_ratio(ratio: float, tolerance: float) -> None:
    """Mean segment count must stay within `tolerance` of the true phone count."""
    logger.info("Segment ratio %.3f (gate 1 +/- %.2f)", ratio, tolerance)
    if abs(ratio - 1.0) > tolerance:
        raise GateError(f"Segments per phone {ratio:.3f} is outside 1 +/- {tolerance}: "
                        "segmentation does not track phone boundaries")


def check_self_training(gan_metrics: dict, hmm_metrics: dict) -> None:
    gan_error, hmm_error = gan_metrics["valid_error"], hmm_metrics["valid_error"]
    logger.info("Self-training: validation PER %.4f (GAN) -> %.4f (HMM)", gan_error, hmm_error)
    if not hmm_error < gan_error:
        raise GateError(f"HMM self-training did not improve on the GAN: validation PER "
                        f"{gan_error:.4f} -> {hmm_error:.4f}")


# ============================================================================
# Corpus and unit space
# ============================================================================

@dataclass
class CorpusBundle:
    spec: ToyLanguageSpec
    manifest: Manifest
    digest: str
    key: str
    separability: float


@dataclass(frozen=True)
class UnitSpace:
    """Unit kind the ASR and TTS models work in; transcripts are stored as phones."""
    kind: str
    spec: ToyLanguageSpec
    inventory: UnitInventory

    @classmethod
    def of(cls, kind: str, spec: ToyLanguageSpec) -> "UnitSpace":
        return cls(kind, spec, spec.inventory if kind == "phoneme" else spec.grapheme_inventory())

    def convert(self, phones: UnitSequence) -> UnitSequence:
        return phones if self.kind == "phoneme" else phones_to_graphemes(phones, self.spec)


def _language(cfg: PipelineConfig) -> ToyLanguageSpec:
    c = cfg.corpus
    if c.language_path:
        spec = ToyLanguageSpec.load(c.language_path)
        spec = replace(spec, snr_db=c.snr_db) if c.snr_db is not None else spec
    else:
        spec = preset(c.preset) if c.snr_db is None else preset(c.preset, snr_db=c.snr_db)
    if spec.sample_rate != cfg.signal.sample_rate:
        raise ConfigError(f"Language sample rate {spec.sample_rate} != signal.sample_rate {cfg.signal.sample_rate}")
    return spec


def corpus_key(cfg: PipelineConfig) -> str:
    c = cfg.corpus
    return stage_key("corpus", c.preset, c.language_path, c.n_utts, c.ratios, c.snr_db,
                     cfg.signal.sample_rate, cfg.run.seed)


def stage_corpus(ctx: RunContext) -> CorpusBundle:
    spec = _language(ctx.cfg)
    key = corpus_key(ctx.cfg)
    c = ctx.cfg.corpus

    def build(out: str) -> dict:
        spec.save(os.path.join(out, "language.ini"))
        manifest = generate_corpus(spec, c.n_utts, out, c.ratios, seed=ctx.seed, workers=Config.WORKERS)
        counts = split_counts(c.n_utts, c.ratios)
        return {"digest": manifest.digest(), "language": spec.name,
                "counts": dict(zip(("train", "valid", "test"), counts))}

    out, metrics = ctx.runner.run("corpus", key, build)
    spec = ToyLanguageSpec.load(os.path.join(out, "language.ini"))
    manifest = Manifest.load(os.path.join(out, "manifest.tsv"), spec.inventory)
    gates = ctx.cfg.gates
    separability = formant_separability(spec, gates.separability_utts, ctx.rng(3))
    check_separability(separability, gates.separability_min)
    return CorpusBundle(spec, manifest, metrics["digest"], key, separability)


def generate(cfg: PipelineConfig, out_dir: Optional[str] = None) -> RunReport:
    """gen-corpus: only the corpus stage."""
    with open_run(cfg, "corpus", out_dir) as ctx:
        corpus = stage_corpus(ctx)
        report = RunReport("corpus", cfg.digest(), corpus.digest, corpus.spec.name, cfg.units.kind)
        report.stages["corpus"] = {"utterances": len(corpus.manifest.utterances),
                                   "separability": corpus.separability}
        return _finish(ctx, report)


# ============================================================================
# Shared data views for the unsupervised path
# ============================================================================

@dataclass
class UnsupervisedData:
    """Speech-only audio, unpaired text, capped validation pairs and the held-out test pairs."""
    speech: SpeechView
    text: TextView
    val: PairedView
    test: PairedView
    train_ids: list[str]
    frames: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def eval_ids(self) -> list[str]:
        return self.val.ids() + self.test.ids()

    @property
    def all_ids(self) -> list[str]:
        return self.train_ids + self.eval_ids


def _text_view(ctx: RunContext, corpus: CorpusBundle, text_half: Manifest) -> TextView:
    c = ctx.cfg.corpus
    if c.text_source == "corpus":
        return TextView.from_manifest(text_half, ctx.monitor)
    n = c.n_text or len(text_half.utterances)
    spec = corpus.spec if c.text_source == "lm" else mismatched_language(corpus.spec, seed=ctx.seed)
    sentences = sample_text_corpus(spec, n, seed=ctx.seed)
    logger.info("Text half: %d sentences sampled from %s", n, spec.name)
    return TextView(((f"text{i:05d}", s) for i, s in enumerate(sentences)), ctx.monitor, split=c.text_source)


def unsupervised_data(ctx: RunContext, corpus: CorpusBundle) -> UnsupervisedData:
    speech_half, text_half = break_pairing(corpus.manifest, ctx.rng(1))
    speech = SpeechView(speech_half)
    return UnsupervisedData(
        speech=speech,
        text=_text_view(ctx, corpus, text_half),
        val=PairedView(corpus.manifest, "valid", "validation", ctx.monitor, cap=ctx.cfg.run.val_size),
        test=PairedView(corpus.manifest, "test", "evaluation", ctx.monitor),
        train_ids=speech.ids("train"),
    )


def _stage_error(pseudo: PseudoTranscriptSet, view: PairedView, units: UnitSpace) -> float:
    """Error rate of pseudo transcripts against ground truth of a valid/test view."""
    return unit_error_rate((pseudo.transcripts[uid], units.convert(view.transcript(uid))) for uid in view.ids())


def _pseudo_agreement(pseudo: PseudoTranscriptSet, previous: PseudoTranscriptSet,
                      ids: Sequence[str]) -> Optional[float]:
    """Error rate against the previous stage's pseudo text (None when that text is empty)."""
    pairs = [(pseudo.transcripts[uid], previous.transcripts[uid]) for uid in ids if len(previous.transcripts[uid])]
    return unit_error_rate(pairs) if pairs else None


def _nonempty(ids: Sequence[str], pseudo: PseudoTranscriptSet, stage: str) -> list[str]:
    kept = [uid for uid in ids if len(pseudo.transcripts[uid])]
    if len(kept) < len(ids):
        logger.warning("%s: %d utterances have empty pseudo transcripts and are skipped", stage, len(ids) - len(kept))
    return kept


# ============================================================================
# Unsupervised ASR: features, GAN, HMM, CTC
# ============================================================================

@dataclass
class AsrOutcome:
    features: FeaturePipeline
    pseudo: PseudoTranscriptSet
    final_stage: str
    final_key: str
    metrics: dict[str, dict]


def stage_feats(ctx: RunContext, corpus: CorpusBundle, data: UnsupervisedData,
                units: UnitSpace) -> tuple[FeaturePipeline, str, dict]:
    f = ctx.cfg.feats
    k = f.k or 2 * units.inventory.n_surface
    key = stage_key("feats", corpus.key, ctx.cfg.signal.model_dump(), f.model_dump(), k)
    sr = ctx.cfg.signal.sample_rate

    def make() -> FeaturePipeline:
        return FeaturePipeline(ctx.stft, ctx.bank, k, f.frame_dim, f.segment_dim, f.min_segment_frames, f.deltas)

    def build(out: str) -> dict:
        waves = [data.speech.audio(uid, sr) for uid in data.train_ids]
        pipe = make().fit(waves, ctx.rng(2), max_iters=f.max_iters)
        pipe.save(os.path.join(out, "feats.ckpt"))
        counts = [len(pipe.segments(data.speech.audio(uid, sr))) for uid in data.val.ids()]
        phones = [len(data.val.transcript(uid)) for uid in data.val.ids()]
        ratio = segment_count_ratio(counts, phones)
        logger.info("Segments per phone on validation audio: %.3f", ratio)
        return {"k": k, "segment_ratio": ratio}

    out, metrics = ctx.runner.run("feats", key, build)
    check_segment_ratio(metrics["segment_ratio"], ctx.cfg.gates.segment_ratio_tolerance)
    return make().load(os.path.join(out, "feats.ckpt")), key, metrics


def stage_gan(ctx: RunContext, data: UnsupervisedData, units: UnitSpace, features: FeaturePipeline,
              feats_key: str) -> tuple[PseudoTranscriptSet, str, dict]:
    c, g = ctx.cfg, ctx.cfg.gan
    key = stage_key("gan", feats_key, units.kind, g.model_dump(), c.grid.model_dump(), c.run.val_size,
                    c.corpus.text_source, c.corpus.n_text)
    sr = c.signal.sample_rate

    def build(out: str) -> dict:
        segments = {uid: features.segments(data.speech.audio(uid, sr)) for uid in data.all_ids}
        text = [units.convert(t).ids for t in data.text.transcripts()]
        val = [(segments[uid], units.convert(data.val.transcript(uid))) for uid in data.val.ids()]
        speech = [segments[uid] for uid in data.train_ids]
        train_cfg = GanTrainConfig.from_section(g, seed=c.run.seed)
        metrics: dict = {}
        if c.grid.enabled:
            grid = grid_search(speech, text, val, units.inventory, train_cfg, c.grid.gp_weight,
                               c.grid.smoothness_weight, c.grid.diversity_weight, c.grid.steps)
            result = grid.best
            metrics["grid"] = [{**asdict(w), "valid_error": r.best_per} for w, r in grid.cells]
        else:
            result = gan_train(speech, text, val, units.inventory, train_cfg)
        save_generator(result.generator, os.path.join(out, "generator.ckpt"))
        result.log.to_csv(os.path.join(out, "train_log.csv"))
        pseudo = PseudoTranscriptSet("gan", {
            uid: greedy_decode(result.generator, segments[uid], units.inventory) for uid in data.all_ids
        })
        pseudo.save(os.path.join(out, "pseudo.tsv"))
        metrics.update({
            "valid_error": result.best_per,
            "best_step": result.best_step,
            "weights": asdict(result.weights),
            "test_error": _stage_error(pseudo, data.test, units),
        })
        return metrics

    out, metrics = ctx.runner.run("gan", key, build)
    return PseudoTranscriptSet.load(os.path.join(out, "pseudo.tsv"), units.inventory), key, metrics


def _frames(ctx: RunContext, data: UnsupervisedData, features: FeaturePipeline) -> dict[str, np.ndarray]:
    if not data.frames:
        sr = ctx.cfg.signal.sample_rate
        data.frames = {uid: features.frames(data.speech.audio(uid, sr)) for uid in data.all_ids}
    return data.frames


def stage_hmm(ctx: RunContext, data: UnsupervisedData, units: UnitSpace, features: FeaturePipeline,
              gan_pseudo: PseudoTranscriptSet, gan_key: str) -> tuple[PseudoTranscriptSet, str, dict]:
    h = ctx.cfg.hmm
    key = stage_key("hmm", gan_key, h.model_dump())

    def build(out: str) -> dict:
        frames = _frames(ctx, data, features)
        lm = estimate_bigram_lm([units.convert(t).ids for t in data.text.transcripts()],
                                units.inventory.n_surface, h.lm_smoothing)
        ids = _nonempty(data.train_ids, gan_pseudo, "HMM")
        result = hmm_train([frames[u] for u in ids], [gan_pseudo.transcripts[u] for u in ids], h.iterations,
                           ids=ids, workers=Config.WORKERS)
        result.model.save(os.path.join(out, "hmm.ckpt"))
        save_checkpoint(os.path.join(out, "lm.ckpt"), {"lm": lm})
        hyps = parallel_map(lambda uid: hmm_decode(result.model, frames[uid], lm, h.lm_weight, h.beam),
                            data.all_ids, Config.WORKERS)
        pseudo = PseudoTranscriptSet("hmm", dict(zip(data.all_ids, hyps)))
        pseudo.save(os.path.join(out, "pseudo.tsv"))
        write_curve_csv(os.path.join(out, "log_likelihood.csv"), {"log_likelihood": result.log_likelihood})
        return {
            "valid_error": _stage_error(pseudo, data.val, units),
            "test_error": _stage_error(pseudo, data.test, units),
            "pseudo_valid_error": _pseudo_agreement(pseudo, gan_pseudo, data.val.ids()),
            "log_likelihood": result.log_likelihood,
        }

    out, metrics = ctx.runner.run("hmm", key, build)
    return PseudoTranscriptSet.load(os.path.join(out, "pseudo.tsv"), units.inventory), key, metrics


def stage_ctc(ctx: RunContext, data: UnsupervisedData, units: UnitSpace, features: FeaturePipeline,
              hmm_pseudo: PseudoTranscriptSet, hmm_key: str) -> tuple[PseudoTranscriptSet, str, dict]:
    c = ctx.cfg.ctc
    key = stage_key("ctc", hmm_key, c.model_dump())

    def build(out: str) -> dict:
        frames = _frames(ctx, data, features)
        ids = _nonempty(data.train_ids, hmm_pseudo, "CTC")
        val = [(frames[u], hmm_pseudo.transcripts[u]) for u in _nonempty(data.val.ids(), hmm_pseudo, "CTC")]
        result = ctc_train([frames[u] for u in ids], [hmm_pseudo.transcripts[u] for u in ids], val,
                           units.inventory, c.epochs, c.lr, c.channels, c.kernel, seed=ctx.seed,
                           workers=Config.WORKERS)
        result.model.save(os.path.join(out, "ctc.ckpt"))
        hyps = parallel_map(lambda uid: ctc_greedy_decode(result.model, frames[uid]), data.all_ids, Config.WORKERS)
        pseudo = PseudoTranscriptSet("ctc", dict(zip(data.all_ids, hyps)))
        pseudo.save(os.path.join(out, "pseudo.tsv"))
        write_curve_csv(os.path.join(out, "loss_curve.csv"),
                        {"train_loss": result.train_loss, "pseudo_valid_error": result.val_per})
        return {
            "valid_error": _stage_error(pseudo, data.val, units),
            "test_error": _stage_error(pseudo, data.test, units),
            "pseudo_valid_error": result.val_per[result.best_epoch] if val else None,
            "best_epoch": result.best_epoch,
        }

    out, metrics = ctx.runner.run("ctc", key, build)
    return PseudoTranscriptSet.load(os.path.join(out, "pseudo.tsv"), units.inventory), key, metrics


def unsupervised_asr(ctx: RunContext, corpus: CorpusBundle, data: UnsupervisedData, units: UnitSpace,
                     with_self_training: bool = True) -> AsrOutcome:
    """feats -> GAN (optionally grid) -> HMM -> optional CTC; the last enabled stage labels the corpus."""
    features, feats_key, feats_metrics = stage_feats(ctx, corpus, data, units)
    pseudo, key, gan_metrics = stage_gan(ctx, data, units, features, feats_key)
    metrics = {"feats": feats_metrics, "gan": gan_metrics}
    final = "gan"
    if with_self_training:
        pseudo, key, metrics["hmm"] = stage_hmm(ctx, data, units, features, pseudo, key)
        if ctx.cfg.gates.self_training_monotonic:
            check_self_training(gan_metrics, metrics["hmm"])
        final = "hmm"
        if ctx.cfg.ctc.enabled:
            pseudo, key, metrics["ctc"] = stage_ctc(ctx, data, units, features, pseudo, key)
            final = "ctc"
    return AsrOutcome(features, pseudo, final, key, metrics)


# ============================================================================
# Oracle recognizer and intelligibility
# ============================================================================

def oracle_features(wave: Waveform, stft_cfg: StftConfig, bank: MelFilterbank) -> np.ndarray:
    return wav_to_mel(wave, stft_cfg, bank).frames


def train_oracle_recognizer(train: Sequence[tuple[np.ndarray, UnitSequence]],
                            val: Sequence[tuple[np.ndarray, UnitSequence]],
                            test: Sequence[tuple[np.ndarray, UnitSequence]],
                            inventory: UnitInventory, section, seed: int = 0,
                            workers: int = 1) -> tuple[CtcModel, float]:
    """Phone CTC recognizer on paired ground truth; raises GateError when held-out PER exceeds the gate."""
    result = ctc_train([x for x, _ in train], [t for _, t in train], val, inventory, section.epochs, section.lr,
                       section.channels, section.kernel, seed=seed, workers=workers)
    hyps = parallel_map(lambda item: ctc_greedy_decode(result.model, item[0]), list(test), workers)
    per = unit_error_rate(zip(hyps, [ref for _, ref in test]))
    logger.info("Oracle recognizer: held-out PER %.4f (gate %.4f)", per, section.gate_per)
    if per > section.gate_per:
        raise GateError(f"Oracle recognizer PER {per:.4f} exceeds the gate {section.gate_per}: corpus too hard")
    return result.model, per


def oracle_key(cfg: PipelineConfig) -> str:
    return stage_key("oracle", corpus_key(cfg), cfg.signal.model_dump(), cfg.oracle.model_dump())


def stage_oracle(ctx: RunContext, corpus: CorpusBundle) -> tuple[CtcModel, str, dict]:
    """Trained once per corpus and signal setup; shared by every evaluation on that corpus."""
    key = oracle_key(ctx.cfg)
    sr = ctx.cfg.signal.sample_rate

    def pairs(split: str) -> list[tuple[np.ndarray, UnitSequence]]:
        view = PairedView(corpus.manifest, split, "oracle", ctx.monitor)
        return [(oracle_features(view.audio(uid, sr), ctx.stft, ctx.bank), view.transcript(uid))
                for uid in view.ids()]

    def build(out: str) -> dict:
        model, per = train_oracle_recognizer(pairs("train"), pairs("valid"), pairs("test"), corpus.spec.inventory,
                                             ctx.cfg.oracle, seed=ctx.seed, workers=Config.WORKERS)
        model.save(os.path.join(out, "oracle.ckpt"))
        return {"test_per": per}

    out, metrics = ctx.runner.run("oracle", key, build)
    return CtcModel.load(os.path.join(out, "oracle.ckpt")), key, metrics


@dataclass(frozen=True)
class EvalItem:
    utt_id: str
    units: UnitSequence  # TTS input
    reference: UnitSequence  # phones


@dataclass
class IntelligibilityResult:
    cer: float
    wer: float
    per: float
    n_utterances: int
    max_steps_hits: int = 0
    hypotheses: dict[str, UnitSequence] = field(default_factory=dict)

    def metrics(self) -> dict:
        return {"cer": self.cer, "wer": self.wer, "per": self.per, "n_utterances": self.n_utterances,
                "max_steps_hits": self.max_steps_hits}


def score_with_oracle(oracle: CtcModel, items: Sequence[tuple[str, Waveform, UnitSequence]],
                      spec: ToyLanguageSpec, stft_cfg: StftConfig, bank: MelFilterbank,
                      workers: int = 1) -> IntelligibilityResult:
    """Decode audio with the oracle; CER on spelled graphemes, WER on words, PER on phones."""
    hyps = parallel_map(lambda item: ctc_greedy_decode(oracle, oracle_features(item[1], stft_cfg, bank)),
                        list(items), workers)
    refs = [ref for _, _, ref in items]
    graphemes = [(phones_to_graphemes(h, spec), phones_to_graphemes(r, spec)) for h, r in zip(hyps, refs)]
    return IntelligibilityResult(
        cer=unit_error_rate(graphemes),
        wer=word_error_rate(graphemes),
        per=unit_error_rate(zip(hyps, refs)),
        n_utterances=len(items),
        hypotheses={uid: h for (uid, _, _), h in zip(items, hyps)},
    )


def evaluate_intelligibility(model: TtsModel, items: Sequence[EvalItem], oracle: CtcModel, spec: ToyLanguageSpec,
                             stft_cfg: StftConfig, bank: MelFilterbank, gl_iters: int = 60, seed: int = 0,
                             max_steps_factor: float = 4.0, out_dir: Optional[str] = None,
                             workers: int = 1, gl_momentum: float = 0.99) -> IntelligibilityResult:
    """Synthesize each test transcript, decode it with the oracle and score against the input text."""
    def run(indexed: tuple[int, EvalItem]):
        index, item = indexed
        return synthesize(model, item.units, bank, stft_cfg, gl_iters, seed=seed + index,
                          max_steps_factor=max_steps_factor, gl_momentum=gl_momentum)

    outputs = parallel_map(run, list(enumerate(items)), workers)
    result = score_with_oracle(oracle, [(it.utt_id, wave, it.reference) for it, (wave, _) in zip(items, outputs)],
                               spec, stft_cfg, bank, workers)
    result.max_steps_hits = sum(1 for _, synth in outputs if synth.stop_frame is None)
    if out_dir is not None:
        arrays = {}
        for item, (wave, synth) in zip(items, outputs):
            write_wav(os.path.join(out_dir, "synth", f"{item.utt_id}.wav"), wave)
            arrays[f"syn.{item.utt_id}"] = synth.mel.frames
            arrays[f"att.{item.utt_id}"] = synth.attention
        save_checkpoint(os.path.join(out_dir, "synth.ckpt"), arrays)
    logger.info("Intelligibility: CER %.4f, WER %.4f over %d utterances (%d hit max steps)",
                result.cer, result.wer, result.n_utterances, result.max_steps_hits)
    return result


# ============================================================================
# TTS stages
# ============================================================================

def _tts_dims(cfg: PipelineConfig) -> TtsDims:
    t = cfg.tts
    return TtsDims(n_mels=cfg.signal.n_mels, embedding_dim=t.embedding_dim, encoder_dim=t.encoder_dim,
                   decoder_dim=t.decoder_dim, prenet_dim=t.prenet_dim, attention_dim=t.attention_dim,
                   reduction=t.reduction)


def stage_tts(ctx: RunContext, units: UnitSpace, source_key: str,
              train: Callable[[], list[tuple[UnitSequence, Waveform]]],
              val: Callable[[], list[tuple[UnitSequence, Waveform]]]) -> tuple[TtsModel, str, dict]:
    """Same recipe for pseudo and ground-truth transcripts; only the (units, audio) pairs differ."""
    t = ctx.cfg.tts
    key = stage_key("tts", source_key, units.kind, t.model_dump(), ctx.cfg.signal.model_dump(), ctx.seed)

    def mel_pairs(items: list[tuple[UnitSequence, Waveform]]) -> list[tuple[UnitSequence, np.ndarray]]:
        return [(u, wav_to_mel(w, ctx.stft, ctx.bank).frames) for u, w in items if len(u)]

    def build(out: str) -> dict:
        model, log = tts_train(mel_pairs(train()), mel_pairs(val()), units.inventory, _tts_dims(ctx.cfg),
                               t.epochs, t.lr, GuidedAttentionConfig(t.ga_sigma, t.ga_weight), seed=ctx.seed)
        model.save(os.path.join(out, "tts.ckpt"))
        write_curve_csv(os.path.join(out, "loss_curve.csv"),
                        {"train_loss": log.train_loss, "val_loss": log.val_loss, "val_l1": log.val_l1})
        return {"best_epoch": log.best_epoch,
                "val_loss": log.val_loss[log.best_epoch] if log.val_loss else None,
                "train_loss": log.train_loss[-1]}

    out, metrics = ctx.runner.run("tts", key, build)
    return TtsModel.load(os.path.join(out, "tts.ckpt")), key, metrics


def stage_eval(ctx: RunContext, corpus: CorpusBundle, units: UnitSpace, test: PairedView,
               lexicon_source: Callable[[], list[UnitSequence]], model: TtsModel, tts_key: str,
               oracle: CtcModel, oracle_digest: str) -> dict:
    """Synthesize ground-truth test transcripts (written text through G2P for phone units)."""
    t = ctx.cfg.tts
    key = stage_key("eval", tts_key, oracle_digest, ctx.cfg.signal.gl_iters, ctx.cfg.signal.gl_momentum,
                    t.max_steps_factor, ctx.cfg.corpus.text_source)
    sr = ctx.cfg.signal.sample_rate

    def build(out: str) -> dict:
        lexicon = build_lexicon(corpus.spec, lexicon_source()) if units.kind == "phoneme" else None
        items = []
        for uid in test.ids():
            reference = test.transcript(uid)
            if lexicon is not None:
                inputs = g2p_convert(spell_words(reference, corpus.spec), lexicon)
            else:
                inputs = units.convert(reference)
            items.append(EvalItem(uid, inputs, reference))
        result = evaluate_intelligibility(model, items, oracle, corpus.spec, ctx.stft, ctx.bank,
                                          ctx.cfg.signal.gl_iters, seed=ctx.seed,
                                          max_steps_factor=t.max_steps_factor, out_dir=out,
                                          workers=Config.WORKERS, gl_momentum=ctx.cfg.signal.gl_momentum)
        truth = [(it.utt_id, test.audio(it.utt_id, sr), it.reference) for it in items]
        floor = score_with_oracle(oracle, truth, corpus.spec, ctx.stft, ctx.bank, Config.WORKERS)
        save_checkpoint(os.path.join(out, "truth.ckpt"),
                        {f"gt.{uid}": wav_to_mel(w, ctx.stft, ctx.bank).frames for uid, w, _ in truth})
        logger.info("Evaluation floor (oracle on ground-truth audio): CER %.4f", floor.cer)
        return {"tts": result.metrics(), "floor": floor.metrics()}

    _, metrics = ctx.runner.run("eval", key, build)
    return metrics


# ============================================================================
# Top-level operations
# ============================================================================

def _asr_test_cer(pseudo: PseudoTranscriptSet, test: PairedView, units: UnitSpace, spec: ToyLanguageSpec) -> float:
    """CER of the final ASR pseudo transcripts on test (graphemes), comparable with the TTS CER."""
    def spelled(seq: UnitSequence) -> UnitSequence:
        return phones_to_graphemes(seq, spec) if units.kind == "phoneme" else seq
    return unit_error_rate((spelled(pseudo.transcripts[uid]), phones_to_graphemes(test.transcript(uid), spec))
                           for uid in test.ids())


def run_unsupervised(cfg: PipelineConfig, out_dir: Optional[str] = None) -> RunReport:
    """Unpaired speech and text -> pseudo transcripts -> TTS -> oracle-scored intelligibility."""
    with open_run(cfg, "unsupervised", out_dir) as ctx:
        corpus = stage_corpus(ctx)
        units = UnitSpace.of(cfg.units.kind, corpus.spec)
        data = unsupervised_data(ctx, corpus)
        asr = unsupervised_asr(ctx, corpus, data, units)
        oracle, oracle_digest, oracle_metrics = stage_oracle(ctx, corpus)
        sr = cfg.signal.sample_rate
        pseudo = asr.pseudo.transcripts
        model, tts_key, tts_metrics = stage_tts(
            ctx, units, stage_key("pseudo", asr.final_key),
            train=lambda: [(pseudo[uid], data.speech.audio(uid, sr)) for uid in data.train_ids],
            val=lambda: [(pseudo[uid], data.speech.audio(uid, sr)) for uid in data.val.ids()],
        )
        evaluation = stage_eval(ctx, corpus, units, data.test, data.text.transcripts, model, tts_key,
                                oracle, oracle_digest)

        report = RunReport("unsupervised", cfg.digest(), corpus.digest, corpus.spec.name, units.kind)
        report.stages = {**asr.metrics, "oracle": oracle_metrics, "tts": tts_metrics}
        report.tts = evaluation["tts"]
        report.floor = evaluation["floor"]
        asr_cer = _asr_test_cer(asr.pseudo, data.test, units, corpus.spec)
        report.comparisons = {
            "final_asr_stage": asr.final_stage,
            "asr_test_cer": asr_cer,
            "tts_minus_asr_cer": report.tts["cer"] - asr_cer,
        }
        return _finish(ctx, report)


def run_supervised_topline(cfg: PipelineConfig, out_dir: Optional[str] = None) -> RunReport:
    """The same TTS recipe on ground-truth transcripts of the same speech utterances."""
    with open_run(cfg, "supervised", out_dir) as ctx:
        corpus = stage_corpus(ctx)
        units = UnitSpace.of(cfg.units.kind, corpus.spec)
        data = unsupervised_data(ctx, corpus)
        oracle, oracle_digest, oracle_metrics = stage_oracle(ctx, corpus)
        paired = PairedView(corpus.manifest, "train", "training", ctx.monitor, only=data.train_ids)
        sr = cfg.signal.sample_rate
        model, tts_key, tts_metrics = stage_tts(
            ctx, units, stage_key("truth", corpus.key, data.train_ids),
            train=lambda: [(units.convert(paired.transcript(uid)), paired.audio(uid, sr)) for uid in paired.ids()],
            val=lambda: [(units.convert(data.val.transcript(uid)), data.val.audio(uid, sr)) for uid in data.val.ids()],
        )
        evaluation = stage_eval(ctx, corpus, units, data.test, data.text.transcripts, model, tts_key,
                                oracle, oracle_digest)

        report = RunReport("supervised", cfg.digest(), corpus.digest, corpus.spec.name, units.kind)
        report.stages = {"oracle": oracle_metrics, "tts": tts_metrics}
        report.tts = evaluation["tts"]
        report.floor = evaluation["floor"]
        return _finish(ctx, report)


def compare_supervision(cfg: PipelineConfig, out_dir: Optional[str] = None) -> tuple[RunReport, RunReport, dict]:
    """eval: unsupervised run and supervised topline on one corpus, with CER/WER gaps."""
    root = _resolve_out_dir(cfg, out_dir)
    with run_lock(root):
        unsup = run_unsupervised(cfg, os.path.join(root, "unsupervised"))
        sup = run_supervised_topline(cfg, os.path.join(root, "supervised"))
        comparison = {
            "config_digest": cfg.digest(),
            "corpus_digest": unsup.corpus_digest,
            "unsupervised": {"cer": unsup.tts["cer"], "wer": unsup.tts["wer"]},
            "supervised": {"cer": sup.tts["cer"], "wer": sup.tts["wer"]},
            "floor": unsup.floor,
            "cer_gap": gap(unsup.tts["cer"], sup.tts["cer"]),
            "wer_gap": gap(unsup.tts["wer"], sup.tts["wer"]),
        }
        _write_json(os.path.join(root, "comparison.json"), comparison)
    return unsup, sup, comparison


def compare_units(cfg: PipelineConfig, out_dir: Optional[str] = None) -> tuple[RunReport, RunReport]:
    """Two full unsupervised runs that differ only in the unit kind; writes a side-by-side table."""
    root = _resolve_out_dir(cfg, out_dir)
    with run_lock(root):
        reports = {}
        for kind in ("phoneme", "grapheme"):
            variant = cfg.with_overrides({"units": {"kind": kind}})
            reports[kind] = run_unsupervised(variant, os.path.join(root, kind))
        rows = ["units\tasr_test_cer\ttts_cer\ttts_wer\tfloor_cer"]
        for kind, rep in reports.items():
            rows.append(f"{kind}\t{rep.comparisons['asr_test_cer']:.4f}\t{rep.tts['cer']:.4f}\t"
                        f"{rep.tts['wer']:.4f}\t{rep.floor['cer']:.4f}")
        with open(os.path.join(root, "units.tsv"), "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")
        _write_json(os.path.join(root, "units.json"), {
            "corpus_digest": reports["phoneme"].corpus_digest,
            "cer": {kind: rep.tts["cer"] for kind, rep in reports.items()},
            "wer": {kind: rep.tts["wer"] for kind, rep in reports.items()},
            "cer_difference": reports["grapheme"].tts["cer"] - reports["phoneme"].tts["cer"],
        })
    return reports["phoneme"], reports["grapheme"]


def run_grid(cfg: PipelineConfig, out_dir: Optional[str] = None) -> RunReport:
    """grid-search: feats and the GAN grid only; each cell's validation error lands in the report."""
    cfg = cfg.with_overrides({"grid": {"enabled": True}})
    with open_run(cfg, "grid", out_dir) as ctx:
        corpus = stage_corpus(ctx)
        units = UnitSpace.of(cfg.units.kind, corpus.spec)
        data = unsupervised_data(ctx, corpus)
        asr = unsupervised_asr(ctx, corpus, data, units, with_self_training=False)
        report = RunReport("grid", cfg.digest(), corpus.digest, corpus.spec.name, units.kind)
        report.stages = asr.metrics
        return _finish(ctx, report)


# ============================================================================
# Figures
# ============================================================================

def emit_figures(run_dir: str) -> list[str]:
    """Mel pairs and attention images per test utterance, plus loss-curve CSVs, into `<run>/figures`."""
    stages_path = os.path.join(run_dir, STAGES_NAME)
    if not os.path.isfile(stages_path):
        raise ArtifactError(f"{run_dir} has no {STAGES_NAME}; is it a completed run?")
    stages = _read_json(stages_path)
    if "eval" not in stages:
        raise ArtifactError(f"{run_dir} has no evaluation stage")
    eval_dir = stages["eval"]
    try:
        synth, _ = load_checkpoint(os.path.join(eval_dir, "synth.ckpt"))
        truth, _ = load_checkpoint(os.path.join(eval_dir, "truth.ckpt"))
    except CheckpointError as e:
        raise ArtifactError(f"Missing synthesis artifacts in {eval_dir}: {e}") from e

    out = os.path.join(run_dir, "figures")
    written: list[str] = []
    for name in sorted(truth):
        uid = name[len("gt."):]
        if f"syn.{uid}" not in synth:
            raise ArtifactError(f"No synthetic mel for {uid}")
        written.extend(emit_mel_pair(out, uid, truth[name], synth[f"syn.{uid}"]))
        written.append(emit_attention(out, uid, synth[f"att.{uid}"]))
    curves = {"gan": "train_log.csv", "hmm": "log_likelihood.csv", "ctc": "loss_curve.csv", "tts": "loss_curve.csv"}
    for stage, filename in curves.items():
        source = os.path.join(stages.get(stage, ""), filename)
        if stage in stages and os.path.isfile(source):
            target = os.path.join(out, f"{stage}_{filename}")
            shutil.copyfile(source, target)
            written.append(target)
    logger.info("Wrote %d figure files to %s", len(written), out)
    return written
