import pytest

from momask_lab.toolkit.config import ConfigError, load_config, full_preset, parse_flat, toy_preset


def test_defaults_are_desk_scale():
    cfg = load_config()
    assert (cfg.mformer.hidden, cfg.mformer.layers, cfg.mformer.heads) == (128, 4, 4)
    assert cfg.rvq.layers == 6 and cfg.rvq.dropout_q == 0.2
    assert (cfg.engine.iterations, cfg.engine.s_masked, cfg.engine.s_residual) == (10, 4.0, 5.0)


def test_full_preset_values():
    cfg = full_preset()
    assert (cfg.rvq.layers, cfg.rvq.codebook_size, cfg.rvq.code_dim, cfg.rvq.dropout_q) == (6, 512, 512, 0.2)
    assert (cfg.mformer.hidden, cfg.mformer.layers, cfg.mformer.heads) == (384, 6, 6)
    assert cfg.mformer.lr == 2e-4 and cfg.mformer.warmup == 2000
    assert (cfg.engine.iterations, cfg.engine.s_masked, cfg.engine.s_residual) == (10, 4.0, 5.0)


def test_parse_flat_comments_and_lists():
    vals = parse_flat("# header\nrvq.layers = 4  # trailing\ncorpus.split = 0.7, 0.2, 0.1\nengine.gumbel_anneal = on\n")
    assert vals == {"rvq.layers": 4, "corpus.split": [0.7, 0.2, 0.1], "engine.gumbel_anneal": True}


def test_text_overrides_and_round_trip():
    cfg = load_config("preset = toy\nrvq.codebook_size = 32\nseed = 5\n")
    assert cfg.rvq.codebook_size == 32 and cfg.seed == 5 and cfg.codec.width == toy_preset().codec.width
    again = load_config(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert again.digest() == cfg.digest()


def test_overrides_do_not_leak_into_presets():
    load_config(overrides={"rvq.layers": 3}, preset="toy")
    assert toy_preset().rvq.layers == 6


@pytest.mark.parametrize("text", [
    "rvq.nope = 1\n",
    "bogus.layers = 1\n",
    "rvq.dropout_q = 1.5\n",
    "mformer.hidden = 130\n",
    "codec.window = 30\n",
    "engine.residual_mode = beam\n",
    "corpus.split = 0.5, 0.5, 0.5\n",
    "just words\n",
    "rvq.layers = many\n",
])
def test_invalid_configs_raise(text):
    with pytest.raises(ConfigError):
        load_config(text)
