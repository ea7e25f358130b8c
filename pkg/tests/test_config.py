import json

import pytest

from morphtools.config import (
    MANIFEST_NAME,
    GradcheckRunConfig,
    MorphRunConfig,
    SweepRunConfig,
    VulnRunConfig,
    config_hash,
    read_manifest,
    setup_logging,
    write_manifest,
)
from morphtools.errors import ConfigError


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv("MORPHBENCH_LOG", "debug")
    assert setup_logging() == "DEBUG"
    monkeypatch.setenv("MORPHBENCH_LOG", "warn")
    assert setup_logging() == "WARNING"
    monkeypatch.setenv("MORPHBENCH_LOG", "chatty")
    assert setup_logging() == "INFO"
    monkeypatch.delenv("MORPHBENCH_LOG")
    assert setup_logging() == "INFO"


def test_models_default_to_seeded_toy():
    assert MorphRunConfig(seed=5).models == "toy:5"
    assert MorphRunConfig(seed=5, models="weights.mbw").models == "weights.mbw"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        MorphRunConfig.from_dict({"pairs": "p.csv", "learning_rate": 0.1})


def test_optimizer_config_carries_overrides():
    cfg = MorphRunConfig(lambda2=0.0, iterations=12, lr0=0.01, decay_every=3)
    opt = cfg.optimizer_config()
    assert (opt.iterations, opt.lr0, opt.decay_every) == (12, 0.01, 3)
    assert opt.weights.lambda2 == 0.0
    assert opt.weights.lambda1 == 0.0002


def test_validate_resolves_paths(tmp_path, pair_csv):
    cfg = MorphRunConfig(pairs=str(pair_csv), out=str(tmp_path / "out")).validate()
    assert cfg.pairs == str(pair_csv.resolve())
    assert not (tmp_path / "out").exists()


def test_validate_rejects_missing_inputs(tmp_path, pair_csv):
    with pytest.raises(ConfigError, match="pair list"):
        MorphRunConfig(pairs=str(tmp_path / "missing.csv")).validate()
    with pytest.raises(ConfigError, match="weight file"):
        MorphRunConfig(pairs=str(pair_csv), models=str(tmp_path / "none.mbw")).validate()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError, match="not a directory"):
        MorphRunConfig(pairs=str(pair_csv), out=str(blocker)).validate()
    with pytest.raises(ConfigError, match="preset"):
        SweepRunConfig(pairs=str(pair_csv), preset="everything").validate()
    with pytest.raises(ConfigError):
        GradcheckRunConfig(trials=0).validate()


def test_validate_parses_the_pair_list(tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("morph_id,subject1_image,subject2_image\nm001,a.png,b.png\nm001,c.png,d.png\n")
    with pytest.raises(ConfigError, match="duplicate morph ids"):
        MorphRunConfig(pairs=str(pairs)).validate()


def test_manifest_round_trip(tmp_path):
    cfg = VulnRunConfig(scores="s.csv", out=str(tmp_path), fmr=0.01, group_by=["gender"])
    path = write_manifest(cfg)
    assert path.name == MANIFEST_NAME
    with open(path) as fh:
        manifest = json.load(fh)
    assert manifest["config_hash"] == config_hash("vuln", cfg.to_dict())
    assert read_manifest(path) == cfg


def test_manifest_hash_detects_edits(tmp_path):
    path = write_manifest(GradcheckRunConfig(out=str(tmp_path), trials=3))
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["config"]["trials"] = 4
    path.write_text(json.dumps(manifest))
    with pytest.raises(ConfigError, match="config_hash"):
        read_manifest(path)


def test_config_hash_ignores_key_order():
    assert config_hash("mad", {"a": 1, "b": 2}) == config_hash("mad", {"b": 2, "a": 1})
    assert config_hash("mad", {"a": 1}) != config_hash("vuln", {"a": 1})


def test_with_out_keeps_everything_else(tmp_path):
    cfg = GradcheckRunConfig(out="a", trials=7, seed=3)
    moved = cfg.with_out(tmp_path)
    assert moved.out == str(tmp_path)
    assert (moved.trials, moved.seed) == (7, 3)
