import pytest

from training.config import (
    LAMBDA_METRIC_RANGE,
    TrainConfig,
    config_fields,
    config_from_sections,
    config_to_sections,
    describe_keys,
    load_config,
    validate_config,
)
from training.errors import ConfigError

from .conftest import write_toml


def test_empty_config_gives_defaults():
    config, errors = validate_config({}, environ={})
    assert errors == []
    assert config == TrainConfig()
    assert config.image_size == 64
    assert config.temperature == pytest.approx(0.3)
    assert config.lambda_metric is None


def test_negative_batch_size_is_named():
    _, errors = validate_config({"trainer": {"batch_size": -1}}, environ={})
    assert any("trainer.batch_size" in e for e in errors)


def test_all_errors_reported_at_once():
    _, errors = validate_config({"trainer": {"batch_size": 0, "learning_rate": -1.0},
                                 "render": {"fov_deg": 200.0}}, environ={})
    assert len(errors) == 3


def test_type_and_range_errors_reported_together():
    _, errors = validate_config({"trainer": {"batch_size": -1, "learning_rate": "abc"}}, environ={})
    assert len(errors) == 2
    assert any(e.startswith("trainer.learning_rate") for e in errors)
    assert any("trainer.batch_size" in e and "-1" in e for e in errors)


def test_bad_lambda_metric_type_is_not_reported_as_missing():
    _, errors = validate_config({"loss": {"lambda_metric": "lots"}}, environ={}, require_training=True)
    assert len(errors) == 1
    assert errors[0].startswith("loss.lambda_metric")
    assert "未设置" not in errors[0]


def test_unknown_key_rejected():
    _, errors = validate_config({"trainer": {"batchsize": 4}}, environ={})
    assert errors == ["未知配置键: trainer.batchsize"]


def test_wrong_type_rejected():
    _, errors = validate_config({"trainer": {"epochs": "ten"}}, environ={})
    assert len(errors) == 1 and errors[0].startswith("trainer.epochs")


def test_lambda_metric_required_only_for_training():
    config = load_config({}, environ={})
    assert config.lambda_metric is None
    with pytest.raises(ConfigError) as info:
        load_config({}, environ={}, require_training=True)
    message = str(info.value)
    lo, hi = LAMBDA_METRIC_RANGE
    assert "loss.lambda_metric" in message
    assert f"{lo}–{hi}" in message


def test_lambda_metric_zero_is_allowed():
    config = load_config({"loss": {"lambda_metric": 0.0}}, environ={}, require_training=True)
    assert config.lambda_metric == 0.0


def test_multi_view_requires_camera_supervision():
    _, errors = validate_config({"trainer": {"multi_view_fraction": 0.5}}, environ={})
    assert any("camera_supervised" in e for e in errors)


def test_precedence_set_over_file_over_env(tmp_path):
    path = write_toml(tmp_path / "run.toml", {"trainer": {"epochs": 5, "batch_size": 6}})
    environ = {"MCSV_TRAINER_EPOCHS": "7", "MCSV_TRAINER_BATCH_SIZE": "8", "MCSV_TRAINER_SEED": "9"}
    config = load_config(str(path), ["trainer.epochs=3"], environ=environ)
    assert config.epochs == 3
    assert config.batch_size == 6
    assert config.seed == 9


def test_set_override_parses_lists_and_bools():
    config = load_config(None, ["model.shape_hidden=[8, 4]", "trainer.strict=true", "data.dataset_root=runs/x"],
                         environ={})
    assert config.shape_hidden == (8, 4)
    assert config.strict is True
    assert config.dataset_root == "runs/x"


def test_bad_set_syntax():
    _, errors = validate_config(None, ["trainer.epochs"], environ={})
    assert any("key=value" in e for e in errors)


def test_missing_config_file(tmp_path):
    _, errors = validate_config(str(tmp_path / "nope.toml"), environ={})
    assert errors and "配置文件不存在" in errors[0]


def test_describe_keys_lists_every_field():
    text = describe_keys()
    for key in config_fields():
        assert key in text


def test_sections_round_trip():
    config = load_config({"model": {"shape_hidden": [8, 8]}, "loss": {"lambda_metric": 0.1}}, environ={})
    assert config_from_sections(config_to_sections(config)) == config
