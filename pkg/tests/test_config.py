import pytest

from allspark.config import SCHEMA, RunConfig, coerce, load_run_config, parse_config_text
from allspark.errors import ConfigError


def test_text_roundtrip():
    cfg = load_run_config(None, {"channels": "16", "residual": "off", "lr_init": "0.01", "pseudo_source": "memory"})
    back = RunConfig.from_values(parse_config_text(cfg.to_text()))
    assert back.model == cfg.model and back.train == cfg.train
    assert back.model.channels == 16 and back.model.residual is False and back.train.pseudo_source == "memory"


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nchannels = 8\nmax_iterations = 10  # trailing\n")
    cfg = load_run_config(p, {"channels": "12"})
    assert cfg.model.channels == 12 and cfg.train.max_iterations == 10


@pytest.mark.parametrize("raw,want", [("on", True), ("Yes", True), ("0", False), ("false", False)])
def test_bool_spellings(raw, want):
    assert coerce("allspark", raw) is want


def test_rejections(tmp_path):
    with pytest.raises(ConfigError):
        coerce("nope", "1")
    with pytest.raises(ConfigError):
        coerce("channels", "many")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        load_run_config(None, {"heads": "3", "channels": "32"})


def test_schema_has_every_field():
    for key in ("height", "channels", "heads", "expansion", "residual", "lr_init", "head_lr_mult", "seed", "data", "out"):
        assert key in SCHEMA
