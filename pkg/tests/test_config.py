import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidadapt.config import ConfigError, RunConfig, expand_grid, parse_config, parse_sweep, parse_value


def test_roundtrip_through_text():
    cfg = RunConfig(mode="ablate", seeds=[1, 2, 3], merge_ratio=0.5, drop_shared=True, lr=1e-3)
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config(RunConfig().to_text()) == RunConfig()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9).map(lambda k: 2 * k - 1), st.floats(0.01, 10), st.lists(st.integers(0, 99), min_size=1, max_size=4))
def test_roundtrip_property(k, sigma, seeds):
    cfg = RunConfig(kernel_size=k, sigma_intensity=sigma, seeds=seeds)
    assert parse_config(cfg.to_text()) == cfg


def test_unknown_and_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("kernal_size = 3")
    with pytest.raises(ConfigError):
        parse_config("kernel_size = three")
    with pytest.raises(ConfigError):
        parse_config("kernel_size = 4")
    with pytest.raises(ConfigError):
        parse_config("use_adapter = maybe")
    with pytest.raises(ConfigError):
        parse_config("just a line")
    with pytest.raises(ConfigError):
        RunConfig(mode="dance")
    with pytest.raises(ConfigError):
        RunConfig(train_window="0.9,0.5")


def test_comments_dashes_and_optional():
    cfg = parse_config("# header\nlora-rank = 2  # inline\nmerge_ratio = none\n")
    assert cfg.lora_rank == 2 and cfg.merge_ratio is None
    assert parse_value("merge_ratio", "0.25") == 0.25
    assert parse_value("use_controls", "off") is False


def test_sweep_grid():
    axes = parse_sweep("kernel_size = 1,3,5\ninvert_steps = 3,4,5\n")
    grid = expand_grid(axes)
    assert len(grid) == 9 and grid[0] == {"kernel_size": 1, "invert_steps": 3}
    axes = parse_sweep("train_window = 0.5,1;0.8,1\n")
    assert axes["train_window"] == ["0.5,1", "0.8,1"]
    with pytest.raises(ConfigError):
        expand_grid({})
    with pytest.raises(ConfigError):
        parse_sweep("kernel_size = ,")


def test_training_key_ignores_inference_fields():
    a = RunConfig()
    assert a.training_key() == a.replace(kernel_size=5, infer_window="0.8,1").training_key()
    assert a.training_key() != a.replace(lr=1e-3).training_key()
