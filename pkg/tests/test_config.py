import pytest

from cmswinkan.config import Config, ConfigError, parse_config


def test_parse_comments_and_whitespace():
    text = "# header\nmodel.variant = toy  # trailing\n\n train.lr=1e-3\nempty =\n"
    assert parse_config(text) == {"model.variant": "toy", "train.lr": "1e-3", "empty": ""}


def test_value_may_contain_equals():
    assert parse_config("a.b = x=y") == {"a.b": "x=y"}


@pytest.mark.parametrize("text,line", [("ok=1\nnonsense\n", 2), ("= 3", 1)])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"cfg:{line}:"):
        parse_config(text, "cfg")


def test_typed_getters_and_defaults():
    c = Config({"a.i": "3", "a.f": "2.5", "a.b": "Yes", "a.s": "hi"})
    assert (c.int("a.i"), c.float("a.f"), c.bool("a.b"), c.str("a.s")) == (3, 2.5, True, "hi")
    assert c.int("missing", 7) == 7 and c.bool("missing") is None


def test_bad_value_raises_config_error():
    with pytest.raises(ConfigError, match="a.i"):
        Config({"a.i": "three"}).int("a.i")
    with pytest.raises(ConfigError):
        Config({"a.b": "maybe"}).bool("a.b")


def test_override_maps_double_underscore_and_skips_none():
    c = Config({"train.lr": "1"}).override(train__lr=0.5, train__epochs=None, model__seed=3)
    assert c.values == {"train.lr": "0.5", "model.seed": "3"}


def test_override_leaves_original_untouched():
    base = Config({"x.y": "1"})
    base.override(x__y=2)
    assert base.values == {"x.y": "1"}


def test_section_and_echo():
    c = Config({"vote.alpha": "1", "vote.beta": "8", "train.lr": "0.1"})
    assert c.section("vote") == {"alpha": "1", "beta": "8"}
    assert c.echo() == "train.lr=0.1\nvote.alpha=1\nvote.beta=8"


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        Config.load(tmp_path / "nope.cfg")


def test_shipped_config_parses():
    from pathlib import Path

    c = Config.load(Path(__file__).parent.parent / "configs" / "tiny.cfg")
    assert c.str("model.variant") == "toy" and c.int("train.epochs") == 15 and c.float("vote.beta") == 8.0
