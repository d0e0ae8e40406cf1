"""Configuration layering, typed access, digests, and object factories."""

import pytest

from pnglab import config as cfg_mod
from pnglab.config import load_config
from pnglab.errors import ConfigError


def test_defaults_resolve_without_a_file():
    cfg = load_config()
    assert cfg.getint("encoder", "layers") == 4
    assert cfg.getint("encoder", "hidden") == 64
    assert cfg.getfloat("masking", "select_fraction") == 0.25
    assert cfg.getbool("encoder", "use_word_positions") is False


def test_ini_file_overrides_defaults(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[corpus]\nlexicon_size = 12\n[pretrain]\nsteps = 5\n")
    cfg = load_config(str(path))
    assert cfg.getint("corpus", "lexicon_size") == 12
    assert cfg.getint("pretrain", "steps") == 5
    assert cfg.getint("corpus", "train_size") == 5000   # untouched default


def test_cli_overrides_beat_file_values(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[pretrain]\nsteps = 5\n")
    cfg = load_config(str(path), overrides=["pretrain.steps=9", "experiment.name=x"])
    assert cfg.getint("pretrain", "steps") == 9
    assert cfg.get("experiment", "name") == "x"


def test_unknown_keys_and_sections_rejected(tmp_path):
    bad_key = tmp_path / "a.ini"
    bad_key.write_text("[corpus]\nplanets = 9\n")
    with pytest.raises(ConfigError, match="unknown configuration key"):
        load_config(str(bad_key))
    bad_section = tmp_path / "b.ini"
    bad_section.write_text("[astrology]\nsign = leo\n")
    with pytest.raises(ConfigError, match="unknown configuration section"):
        load_config(str(bad_section))
    with pytest.raises(ConfigError):
        load_config(overrides=["corpus.planets=9"])
    with pytest.raises(ConfigError):
        load_config(overrides=["no-equals-sign"])
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.ini"))


def test_typed_access_errors():
    cfg = load_config(overrides=["pretrain.steps=soon", "encoder.dropout=damp", "pretrain.pb_mode=maybe"])
    with pytest.raises(ConfigError, match="integer"):
        cfg.getint("pretrain", "steps")
    with pytest.raises(ConfigError, match="number"):
        cfg.getfloat("encoder", "dropout")
    with pytest.raises(ConfigError, match="boolean"):
        cfg.getbool("pretrain", "pb_mode")
    with pytest.raises(ConfigError, match="missing"):
        cfg.get("pretrain", "nonexistent")


def test_digest_is_stable_and_value_sensitive():
    a = load_config()
    b = load_config()
    assert a.digest() == b.digest()
    c = load_config(overrides=["experiment.seed=1"])
    assert c.digest() != a.digest()
    assert len(a.digest()) == 64


def test_canonical_text_is_sorted():
    text = load_config().canonical_text()
    sections = [line[1:-1] for line in text.splitlines() if line.startswith("[")]
    assert sections == sorted(sections)
    assert "[corpus]" in text and "base_lr" in text


def test_factories_build_consistent_objects():
    cfg = load_config(overrides=["encoder.hidden=32", "encoder.heads=2", "finetune.lstm_dim=24"])
    spec = cfg.corpus_spec()
    assert spec.split_sizes == (5000, 500, 500)
    enc = cfg.encoder_config(vocab_size=40)
    assert enc.hidden == 32 and enc.vocab_size == 40
    dec = cfg.decoder_config()
    assert dec.enc_dim == 32 and dec.lstm_dim == 24
    pol = cfg.masking_policy()
    assert pol.weights == (48.0, 8.0, 8.0, 10.0, 10.0)
    sched = cfg.pretrain_schedule(seed=5, pb_mode=True)
    assert sched.seed == 5 and sched.pb_mode is True
    ft = cfg.finetune_schedule()
    assert ft.steps == 2500
    base = cfg.baseline_config(vocab_size=40, tone_input=True)
    assert base.tone_input and base.vocab_size == 40


def test_bad_masking_weights_rejected():
    cfg = load_config(overrides=["masking.weights=1,2,oops"])
    with pytest.raises(ConfigError, match="comma-separated"):
        cfg.masking_policy()


def test_defaults_are_not_mutated_by_overrides():
    before = cfg_mod.DEFAULTS["pretrain"]["steps"]
    load_config(overrides=["pretrain.steps=1"])
    assert cfg_mod.DEFAULTS["pretrain"]["steps"] == before
