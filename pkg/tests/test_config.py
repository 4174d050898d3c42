import os

import pytest
from pydantic import ValidationError

from src.config import (
    Config,
    PipelineConfig,
    load_pipeline_config,
    parse_overrides,
    save_pipeline_config,
)
from src.errors import ConfigError


def test_defaults_are_valid():
    cfg = load_pipeline_config()
    assert cfg.run.val_size == 64
    assert cfg.corpus.ratios == (0.8, 0.12, 0.08)
    assert cfg.signal.hop_length <= cfg.signal.win_length <= cfg.signal.n_fft
    assert cfg.ctc.enabled
    assert cfg.gates.separability_min == 0.95
    assert cfg.gates.segment_ratio_tolerance == 0.3
    assert cfg.gates.self_training_monotonic


def test_file_values_then_overrides(tmp_path, write_config):
    path = write_config(tmp_path / "cfg" / "run.ini", {
        "run": {"seed": 7, "val_size": 80},
        "corpus": {"preset": "digraph", "ratios": "0.7, 0.2, 0.1  # comment"},
    })
    cfg = load_pipeline_config(path, ["run.seed=9", "hmm.lm_weight=0.5"])
    assert cfg.run.seed == 9
    assert cfg.run.val_size == 80
    assert cfg.corpus.preset == "digraph"
    assert cfg.corpus.ratios == (0.7, 0.2, 0.1)
    assert cfg.hmm.lm_weight == 0.5


def test_missing_file():
    with pytest.raises(ConfigError):
        load_pipeline_config("/nonexistent/run.ini")


@pytest.mark.parametrize("override", [
    "run.val_size=10",
    "run.val_size=101",
    "run.nonsense=1",
    "nosection.key=1",
    "corpus.ratios=0.5,0.5,0.5",
    "corpus.preset=klingon",
    "signal.hop_length=1024",
    "signal.f_max=9000",
    "oracle.gate_per=0",
    "signal.gl_momentum=1",
    "gates.separability_min=1.5",
    "gates.segment_ratio_tolerance=0",
])
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_pipeline_config(None, [override])


@pytest.mark.parametrize("item", ["run.seed", "seed=1", "=1"])
def test_malformed_overrides(item):
    with pytest.raises(ConfigError):
        parse_overrides([item])


def test_none_and_lists_are_coerced():
    assert parse_overrides(["corpus.snr_db=none", "grid.gp_weight=1, 2"]) == {
        "corpus": {"snr_db": None},
        "grid": {"gp_weight": ["1", "2"]},
    }
    cfg = load_pipeline_config(None, ["grid.gp_weight=1,2", "grid.smoothness_weight=0.25"])
    assert cfg.grid.gp_weight == (1.0, 2.0)
    assert cfg.grid.smoothness_weight == (0.25,)


def test_section_digest_ignores_other_sections():
    base = load_pipeline_config()
    changed = base.with_overrides({"gan": {"steps": 10}})
    assert base.digest("corpus", "signal") == changed.digest("corpus", "signal")
    assert base.digest() != changed.digest()
    assert base.digest("gan") != changed.digest("gan")
    with pytest.raises(ConfigError):
        base.with_overrides({"bogus": {}})


def test_config_is_frozen():
    cfg = load_pipeline_config()
    with pytest.raises(ValidationError):
        cfg.run.seed = 3


def test_save_and_reload_preserves_digest(tmp_path):
    cfg = load_pipeline_config(None, ["corpus.snr_db=20", "grid.gp_weight=1,2", "ctc.enabled=false",
                                      "gates.self_training_monotonic=false"])
    path = str(tmp_path / "saved.ini")
    save_pipeline_config(cfg, path)
    reloaded = load_pipeline_config(path)
    assert isinstance(reloaded, PipelineConfig)
    assert reloaded.digest() == cfg.digest()


def test_create_dirs(tmp_path):
    Config.create_dirs()
    assert os.path.isdir(os.path.dirname(Config.DB_PATH))
    assert os.path.isdir(os.path.dirname(Config.LOG_PATH))
    assert os.path.isdir(Config.RUNS_DIR)
