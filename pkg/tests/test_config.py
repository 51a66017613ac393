import dataclasses

import pytest
from hypothesis import given, strategies as st

from aiorestore.backbone import build_model, parameter_count
from aiorestore.config import (
    DEFAULT_PLAN, ModelConfig, desk_scale_preset, dump_config, load_config, full_preset, parse_config,
)
from aiorestore.exceptions import ConfigError, ValidationError


def test_reference_shape_file_equals_full_preset(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("level_depths = 3, 5, 6, 8\nlevel_heads = 1, 2, 4, 8\nlevel_channels = 48, 96, 192, 384\n")
    assert load_config(p) == full_preset()


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("")
    cfg = load_config(p)
    assert cfg.loss_alpha == 0.25
    assert cfg.loss_gamma == 0.05
    assert cfg.crop_size == 256
    assert cfg.optimizer.batch_size == 4
    assert cfg.optimizer.learning_rate == 2e-4
    assert (cfg.optimizer.beta1, cfg.optimizer.beta2) == (0.9, 0.999)
    assert (cfg.experimental_lambda1, cfg.experimental_lambda2) == (0.1, 0.05)


def test_three_depths_is_validation_error(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("level_depths = 3, 5, 6\n")
    with pytest.raises(ValidationError, match="level_depths"):
        load_config(p)


def test_unknown_key_names_key():
    with pytest.raises(ConfigError, match="no_such_key"):
        parse_config("no_such_key = 3")


def test_unparsable_value_names_key():
    with pytest.raises(ConfigError, match="crop_size"):
        parse_config("crop_size = big")


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt")


def test_comments_and_nested_keys():
    cfg = parse_config("# comment\noptimizer.learning_rate = 0.001\nembed_dims.quality = 32\n"
                       "injection_plan.enc1 = SCA\naugment.weak = brightness:0.01\n")
    assert cfg.optimizer.learning_rate == 0.001
    assert cfg.embed_dims.quality == 32
    assert cfg.injection_plan["enc1"] == "sca"
    assert cfg.augment_weak == (("brightness", 0.01),)


def test_bracketed_lists_accepted():
    cfg = parse_config("level_depths = [3, 5, 6, 8]\nperception_order = (what, where, how)\n")
    assert cfg.level_depths == (3, 5, 6, 8)
    assert cfg.perception_order == ("what", "where", "how")


def test_desk_preset():
    cfg = desk_scale_preset()
    assert cfg.level_depths == (1, 1, 1, 1)
    assert cfg.level_heads == (1, 1, 2, 2)
    assert cfg.level_channels == (8, 16, 16, 32)
    assert cfg.crop_size == 64 and cfg.optimizer.batch_size == 2
    assert cfg.use_quality and cfg.use_semantic and cfg.use_task and cfg.use_icrm
    assert cfg.perception_order == ("how", "where", "what")
    assert cfg.loss_alpha == 0.25
    assert parameter_count(build_model(cfg)) < 500_000


@pytest.mark.parametrize("change", [
    {"level_channels": (16, 8, 16, 32)},
    {"level_heads": (1, 3, 2, 2)},
    {"perception_order": ("how", "how", "what")},
    {"loss_alpha": -1.0},
    {"mask_dropout_rate": 1.5},
    {"injection_plan": {"enc1": "film"}},
    {"injection_plan": {"enc9": "qgm"}},
    {"use_quality": False, "use_semantic": False, "use_task": False, "use_icrm": False},
    {"augment_weak": (("rotate", 0.1),)},
    {"augment_weak": (("brightness", 0.5),)},
    {"dam_content_tokens": 3},
])
def test_invalid_configs_rejected(change):
    with pytest.raises(ValidationError):
        desk_scale_preset().replace(**change)


def test_partial_plan_filled_with_defaults():
    cfg = ModelConfig(injection_plan={"enc1": "dam"})
    assert cfg.injection_plan == {**DEFAULT_PLAN, "enc1": "dam"}


def test_config_round_trip_presets():
    for cfg in (full_preset(), desk_scale_preset()):
        assert parse_config(dump_config(cfg)) == cfg


_valid_channels = st.sampled_from([(8, 16, 16, 32), (4, 8, 8, 16), (8, 8, 8, 8), (6, 12, 24, 24)])


@given(
    channels=_valid_channels,
    alpha=st.floats(0, 10, allow_nan=False),
    gamma=st.floats(0, 1, allow_nan=False),
    lr=st.floats(0, 1, allow_nan=False),
    rate=st.floats(0, 1),
    order=st.permutations(["how", "where", "what"]),
    seed=st.integers(0, 2**31),
    flags=st.tuples(*[st.booleans()] * 4).filter(any),
)
def test_round_trip_property(channels, alpha, gamma, lr, rate, order, seed, flags):
    cfg = ModelConfig(level_channels=channels, level_heads=(1, 1, 2, 2) if channels[0] % 2 == 0 else (1, 1, 1, 1),
                      loss_alpha=alpha, loss_gamma=gamma, mask_dropout_rate=rate, perception_order=tuple(order),
                      seed=seed, use_quality=flags[0], use_semantic=flags[1], use_task=flags[2], use_icrm=flags[3])
    cfg = cfg.with_optimizer(learning_rate=lr)
    back = parse_config(dump_config(cfg))
    for f in dataclasses.fields(cfg):
        assert getattr(back, f.name) == getattr(cfg, f.name), f.name
