"""Shared fixtures: an isolated registry per test and a tiny pipeline configuration."""
import os

import numpy as np
import pytest

from src.config import Config, load_pipeline_config
from src.services import registry
from src.services.textproc import UnitInventory

# Small enough that a full unsupervised run takes seconds; the training-quality gates are disabled.
TINY_OVERRIDES = [
    "corpus.n_utts=24",
    "signal.n_mels=20",
    "signal.gl_iters=3",
    "feats.max_iters=10",
    "gan.steps=4",
    "gan.batch_size=4",
    "gan.val_interval=2",
    "gan.discriminator_channels=8",
    "hmm.iterations=1",
    "ctc.epochs=1",
    "ctc.channels=8",
    "tts.epochs=1",
    "tts.embedding_dim=8",
    "tts.encoder_dim=8",
    "tts.decoder_dim=8",
    "tts.prenet_dim=8",
    "tts.attention_dim=8",
    "tts.max_steps_factor=1.5",
    "oracle.epochs=1",
    "oracle.channels=8",
    "oracle.gate_per=100",
    "gates.segment_ratio_tolerance=100",
    "gates.self_training_monotonic=false",
]


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    """Every test gets its own SQLite registry, log file and runs directory."""
    monkeypatch.setattr(Config, "DB_PATH", str(tmp_path / "data" / "registry.sqlite3"))
    monkeypatch.setattr(Config, "LOG_PATH", str(tmp_path / "logs" / "app.log"))
    monkeypatch.setattr(Config, "RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(Config, "WORKERS", 1)
    registry.reset_engine()
    yield
    registry.reset_engine()


@pytest.fixture
def tiny_overrides():
    return list(TINY_OVERRIDES)


@pytest.fixture
def tiny_cfg(tmp_path):
    return load_pipeline_config(None, TINY_OVERRIDES + [f"run.output_dir={tmp_path / 'run'}"])


@pytest.fixture
def inventory():
    return UnitInventory(["a", "b", "c"])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def write_config():
    """Writer of `key = value` config files with [sections]."""
    def write(path, sections: dict) -> str:
        lines = []
        for section, values in sections.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {value}" for key, value in values.items())
            lines.append("")
        os.makedirs(os.path.dirname(str(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines))
        return str(path)
    return write
