from scripts.clear_runs import clear_runs
from scripts.show_runs import format_runs
from src.services import registry


def _run_with_stage(tmp_path, digest, mode, name):
    run = registry.create_run(digest * 64, mode, str(tmp_path))
    artifacts = tmp_path / name
    artifacts.mkdir()
    (artifacts / "metrics.json").write_text("{}", encoding="utf-8")
    registry.record_stage(run.id, "feats", name * 8, str(artifacts), wall_clock_s=2.0)
    return run, artifacts


def test_format_runs(tmp_path):
    assert format_runs() == []
    run, _ = _run_with_stage(tmp_path, "a", "unsupervised", "s1")
    lines = format_runs(with_stages=True)
    assert len(lines) == 4
    assert "unsupervised" in lines[2] and ("a" * 12) in lines[2]
    assert "feats" in lines[3] and "2.0" in lines[3]
    assert format_runs(mode="grid") == []


def test_clear_runs_dry_run_then_delete(tmp_path):
    _run_with_stage(tmp_path, "a", "unsupervised", "s1")
    _, kept = _run_with_stage(tmp_path, "b", "grid", "s2")

    assert clear_runs(mode="unsupervised", dry_run=True) == {"runs": 1, "stages": 1, "dirs": 1}
    assert (tmp_path / "s1").is_dir()

    assert clear_runs(mode="unsupervised") == {"runs": 1, "stages": 1, "dirs": 1}
    assert not (tmp_path / "s1").exists()
    assert kept.is_dir()
    assert [r.mode for r in registry.list_runs()] == ["grid"]
