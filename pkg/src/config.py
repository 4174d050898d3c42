"""Configuration module: process environment and per-run pipeline configuration."""
import configparser
import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Application configuration loaded from environment variables."""

    # Paths
    BASE_DIR: str = os.getenv("UTTS_BASE_DIR", "./")
    RUNS_DIR: str = os.getenv("UTTS_RUNS_DIR", "./runs")
    DB_PATH: str = os.getenv("UTTS_DB_PATH", "./data/registry.sqlite3")
    LOG_PATH: str = os.getenv("UTTS_LOG_PATH", "./logs/app.log")

    # Logging
    LOG_LEVEL: str = os.getenv("UTTS_LOG_LEVEL", "INFO")

    # Per-utterance fan-out (generation, decoding, synthesis)
    WORKERS: int = int(os.getenv("UTTS_WORKERS", "1"))

    # Environment Flags
    DEV_MODE: bool = os.getenv("UTTS_DEV_MODE", "false").lower() == "true"

    @classmethod
    def _normalize_path(cls, path: str, base_dir: str = None) -> str:
        """Normalize a path relative to BASE_DIR."""
        if base_dir is None:
            base_dir = cls.BASE_DIR

        # Convert to absolute path
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)

        # Normalize the path
        return os.path.normpath(path)

    @classmethod
    def _init_paths(cls):
        """Initialize and normalize all paths."""
        cls.BASE_DIR = os.path.normpath(os.path.abspath(cls.BASE_DIR))
        cls.RUNS_DIR = cls._normalize_path(cls.RUNS_DIR)
        cls.DB_PATH = cls._normalize_path(cls.DB_PATH)
        cls.LOG_PATH = cls._normalize_path(cls.LOG_PATH)

    @classmethod
    def create_dirs(cls):
        """Create necessary directories if they don't exist."""
        cls._init_paths()

        dirs_to_create = [
            os.path.dirname(cls.DB_PATH),  # data/
            os.path.dirname(cls.LOG_PATH),  # logs/
            cls.RUNS_DIR,  # runs/
        ]

        for dir_path in dirs_to_create:
            if dir_path:  # Skip if empty (e.g., if path is in current dir)
                Path(dir_path).mkdir(parents=True, exist_ok=True)


# Initialize paths on module import
Config._init_paths()


# ============================================================================
# Pipeline configuration (one pydantic model per config-file section)
# ============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(_Section):
    """Run-level settings.

    Fields:
        seed: master seed, every stage derives its generator from it
        output_dir: run directory (stage artifacts, report, figures)
        val_size: paired validation utterances readable during training (50-100)
    """
    seed: int = Field(1234, ge=0)
    output_dir: str = "runs/default"
    val_size: int = Field(64, ge=50, le=100)


class CorpusSection(_Section):
    preset: Literal["unambig", "digraph"] = "unambig"
    language_path: Optional[str] = None
    n_utts: int = Field(500, ge=10)
    # 80/12/8 keeps the paired validation split inside 50-100 utterances at n_utts=500
    ratios: tuple[float, float, float] = (0.8, 0.12, 0.08)
    # corpus: text half of the same corpus; lm: fresh LM samples; mismatched: samples of a permuted LM
    text_source: Literal["corpus", "lm", "mismatched"] = "corpus"
    n_text: int = Field(0, ge=0)
    snr_db: Optional[float] = None

    @field_validator("ratios")
    @classmethod
    def _ratios_sum_to_one(cls, value):
        if abs(sum(value) - 1.0) > 1e-9 or min(value) < 0:
            raise ValueError("ratios must be non-negative and sum to 1")
        return value


class UnitsSection(_Section):
    kind: Literal["phoneme", "grapheme"] = "phoneme"


class SignalSection(_Section):
    sample_rate: int = Field(16000, gt=0)
    n_fft: int = Field(512, gt=0)
    win_length: int = Field(512, gt=0)
    hop_length: int = Field(128, gt=0)
    window: Literal["hann", "rectangular"] = "hann"
    n_mels: int = Field(80, gt=0)
    f_min: float = Field(0.0, ge=0)
    f_max: float = 8000.0
    gl_iters: int = Field(60, ge=1)
    gl_momentum: float = Field(0.99, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_geometry(self):
        if not self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError("hop_length <= win_length <= n_fft required")
        if not self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("0 <= f_min < f_max <= sample_rate/2 required")
        return self


class FeatsSection(_Section):
    k: int = Field(0, ge=0)  # 0 -> 2 x inventory size
    segment_dim: int = Field(16, ge=1)
    frame_dim: int = Field(16, ge=1)
    max_iters: int = Field(50, ge=1)
    min_segment_frames: int = Field(2, ge=1)
    deltas: bool = False


class GanSection(_Section):
    gp_weight: float = Field(1.5, ge=0)
    smoothness_weight: float = Field(0.5, ge=0)
    diversity_weight: float = Field(2.0, ge=0)
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(16, ge=1)
    lr_generator: float = Field(4e-4, gt=0)
    lr_discriminator: float = Field(2e-4, gt=0)
    val_interval: int = Field(250, ge=1)
    generator_kernel: int = Field(4, ge=1)
    discriminator_kernel: int = Field(3, ge=1)
    discriminator_channels: int = Field(32, ge=1)


class GridSection(_Section):
    enabled: bool = False
    gp_weight: tuple[float, ...] = (1.5,)
    smoothness_weight: tuple[float, ...] = (0.5,)
    diversity_weight: tuple[float, ...] = (2.0,)
    steps: int = Field(1000, ge=1)

    @field_validator("gp_weight", "smoothness_weight", "diversity_weight", mode="before")
    @classmethod
    def _scalar_to_tuple(cls, value):
        if isinstance(value, (str, int, float)):
            return (value,)
        return value


class HmmSection(_Section):
    iterations: int = Field(10, ge=0)
    lm_weight: float = Field(1.0, ge=0)
    beam: float = Field(200.0, gt=0)
    lm_smoothing: float = Field(0.1, gt=0)


class CtcSection(_Section):
    enabled: bool = True
    epochs: int = Field(15, ge=1)
    lr: float = Field(2e-3, gt=0)
    channels: int = Field(64, ge=1)
    kernel: int = Field(5, ge=1)


class TtsSection(_Section):
    epochs: int = Field(10, ge=1)
    lr: float = Field(1e-3, gt=0)
    embedding_dim: int = Field(32, ge=1)
    encoder_dim: int = Field(48, ge=1)
    decoder_dim: int = Field(64, ge=1)
    prenet_dim: int = Field(32, ge=1)
    attention_dim: int = Field(32, ge=1)
    reduction: int = Field(2, ge=1)
    ga_sigma: float = Field(0.2, gt=0)
    ga_weight: float = Field(1.0, ge=0)
    max_steps_factor: float = Field(4.0, gt=0)


class OracleSection(_Section):
    epochs: int = Field(20, ge=1)
    lr: float = Field(2e-3, gt=0)
    channels: int = Field(64, ge=1)
    kernel: int = Field(5, ge=1)
    gate_per: float = Field(0.10, gt=0)


class GatesSection(_Section):
    """Sanity gates; a failed gate aborts the run with GateError."""
    separability_min: float = Field(0.95, ge=0, le=1)
    separability_utts: int = Field(8, ge=1)
    segment_ratio_tolerance: float = Field(0.3, gt=0)
    self_training_monotonic: bool = True


class PipelineConfig(_Section):
    """Validated pipeline configuration (one attribute per file section)."""
    run: RunSection = RunSection()
    corpus: CorpusSection = CorpusSection()
    units: UnitsSection = UnitsSection()
    signal: SignalSection = SignalSection()
    feats: FeatsSection = FeatsSection()
    gan: GanSection = GanSection()
    grid: GridSection = GridSection()
    hmm: HmmSection = HmmSection()
    ctc: CtcSection = CtcSection()
    tts: TtsSection = TtsSection()
    oracle: OracleSection = OracleSection()
    gates: GatesSection = GatesSection()

    def digest(self, *sections: str) -> str:
        """sha256 of the canonical JSON dump (optionally restricted to some sections)."""
        data = self.model_dump(mode="json")
        if sections:
            data = {name: data[name] for name in sections}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, dict[str, object]]) -> "PipelineConfig":
        """Return a copy with section values replaced (validated again)."""
        data = self.model_dump()
        for section, values in overrides.items():
            if section not in data:
                raise ConfigError(f"Unknown config section: [{section}]")
            data[section].update(values)
        return build_pipeline_config(data)


def build_pipeline_config(data: dict) -> PipelineConfig:
    """Validate a nested dict into a PipelineConfig, mapping errors to ConfigError."""
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid pipeline configuration:\n{e}") from e


def _coerce(raw: str):
    """Comma-separated values become lists; pydantic does the typed coercion."""
    value = raw.strip()
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    if value.lower() in ("none", ""):
        return None
    return value


def parse_overrides(items: list[str]) -> dict[str, dict[str, object]]:
    """Parse `section.key=value` CLI overrides."""
    overrides: dict[str, dict[str, object]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"Override must look like section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        overrides.setdefault(section.strip(), {})[key.strip()] = _coerce(value)
    return overrides


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[list[str]] = None) -> PipelineConfig:
    """Load a `key = value` config file with [sections]; apply CLI overrides."""
    data: dict[str, dict[str, object]] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"Cannot parse config file {path}: {e}") from e
        for section in parser.sections():
            data[section] = {key: _coerce(value) for key, value in parser.items(section)}
    for section, values in parse_overrides(overrides or []).items():
        data.setdefault(section, {}).update(values)
    return build_pipeline_config(data)


def save_pipeline_config(cfg: PipelineConfig, path: str) -> None:
    """Write the config back in the same `key = value` format."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.model_dump(mode="json").items():
        parser[section] = {
            key: ", ".join(str(v) for v in value) if isinstance(value, list) else ("none" if value is None else str(value))
            for key, value in values.items()
        }
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
