import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainssl.config import KEYS, Config, ConfigError, format_config, parse_config, parse_config_text
from stainssl.dino import DinoConfig
from stainssl.downstream import ProbeConfig


def test_defaults_build_every_section():
    cfg = Config()
    assert cfg.vit().tokens == 65
    assert cfg.dino().momentum_start == 0.9995 and cfg.dino().batch == 64
    assert cfg.probe() == ProbeConfig()
    assert cfg.augment().jitter_strength == 0.5 and cfg.head().out_dim == 1024


def test_published_values():
    cfg = Config()
    d = DinoConfig()
    for name in ("lr", "wd_start", "wd_end", "momentum_start", "momentum_end", "teacher_temp", "student_temp",
                 "center_momentum"):
        assert cfg[f"dino.{name}"] == getattr(d, name)
    assert (cfg["dino.lr"], cfg["dino.teacher_temp"], cfg["dino.student_temp"]) == (5e-4, 0.04, 0.1)
    assert cfg["augment.n_local"] == 8 and cfg["augment.global_scale"] == (0.4, 1.0)
    assert cfg["probe.lr"] == 1e-4 and cfg["probe.patience"] == 5 and cfg["eval.split"] == (0.5, 0.2, 0.3)


def test_format_round_trip_and_sources():
    text = format_config(Config())
    assert parse_config_text(text) == Config()
    assert len(text.splitlines()) == len(KEYS)
    assert all(line.rsplit("# ", 1)[1] in ("published", "desk", "choice") for line in text.splitlines())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.floats(1e-6, 1e-2), st.booleans(), st.lists(st.integers(1, 99), max_size=4))
def test_overrides_round_trip(epochs, lr, constant, ckpts):
    text = (f"dino.epochs = {epochs}\ndino.lr = {lr!r}\ndino.constant_lr = {str(constant).lower()}\n"
            f"dino.checkpoint_epochs = {','.join(map(str, ckpts))}  # trailing comment\n")
    cfg = parse_config_text(text)
    assert cfg["dino.epochs"] == epochs and cfg["dino.lr"] == lr and cfg["dino.constant_lr"] == constant
    assert cfg["dino.checkpoint_epochs"] == tuple(ckpts)
    assert parse_config_text(format_config(cfg)) == cfg


@pytest.mark.parametrize("text,line,match", [
    ("\n\nnope.key = 1\n", 3, "unknown key"),
    ("dino.epochs = 3\ndino.epochs = 4\n", 2, "duplicate"),
    ("dino.epochs = three\n", 1, "expects int"),
    ("head.norm_last_layer = yes\n", 1, "expects bool"),
    ("just words\n", 1, "key = value"),
    ("# c\nvit.embed_dim = 30\n", 2, "divisible"),
    ("dino.teacher_temp = 0.5\n", 1, "dino"),
])
def test_errors_carry_line_numbers(text, line, match):
    with pytest.raises(ConfigError, match=match) as e:
        parse_config_text(text)
    assert e.value.line == line


def test_parse_file_and_bad_encoding(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("corpus.cap = 10\n", encoding="utf-8")
    assert parse_config(p)["corpus.cap"] == 10
    p.write_bytes(b"corpus.cap = \xff\n")
    with pytest.raises(ConfigError, match="UTF-8"):
        parse_config(p)
