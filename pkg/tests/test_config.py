import pytest

from ecdm.config import ConfigError, apply_overrides, dump_config, flatten, load_config, parse_lines
from ecdm.tmat import TmatConfig


def test_flatten_covers_nested_configs():
    keys = flatten(TmatConfig())
    for key in ("s_diff", "weights.lambda_edge", "fast_sampler.timesteps", "highpass.cutoff_fraction",
                "denoiser.base_channels", "discriminator.n_layers"):
        assert key in keys


def test_overrides_parse_types():
    cfg = apply_overrides(TmatConfig(), {
        "s_diff": "3", "learning_rate": "2e-5", "fast_sampler.guidance": "false",
        "denoiser.channel_multipliers": "1, 2", "denoiser.attention_levels": "1",
        "stage2_batch_size": "none", "d_learning_rate": "1e-3",
    })
    assert cfg.s_diff == 3 and cfg.learning_rate == 2e-5 and cfg.fast_sampler.guidance is False
    assert cfg.denoiser.channel_multipliers == (1, 2)
    assert cfg.stage2_batch_size is None and cfg.d_lr == 1e-3 and cfg.g_lr == 2e-5


@pytest.mark.parametrize("items", [{"bogus": "1"}, {"weights.bogus": "1"}, {"s_diff": "abc"}, {"s_diff": "2.5"},
                                   {"weights": "1"}, {"s_diff": "0"}])
def test_bad_overrides(items):
    with pytest.raises(ConfigError):
        apply_overrides(TmatConfig(), items)


def test_dump_then_load_roundtrip(tmp_path):
    cfg = apply_overrides(TmatConfig(), {"s_adv": "4", "highpass.cutoff_fraction": "0.1"})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path, TmatConfig()) == cfg
    assert load_config(path, TmatConfig(), ["s_adv=5"]).s_adv == 5


def test_nested_error_names_full_key():
    with pytest.raises(ConfigError, match="weights.bogus"):
        apply_overrides(TmatConfig(), {"weights.bogus": "1"})


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="missing.cfg"):
        load_config(tmp_path / "missing.cfg", TmatConfig())


def test_parse_lines_comments_and_errors():
    assert parse_lines(["# c", "", "a = 1  # trailing"]) == {"a": "1"}
    with pytest.raises(ConfigError, match="line|:1"):
        parse_lines(["no equals sign"])
