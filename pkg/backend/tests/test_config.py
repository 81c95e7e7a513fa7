import json

import pytest

from app.config import RegistrationConfig, load_pipeline_config
from app.error_handlers import DataError, MissingInputError, SchemaVersionError
from app.schemas import PriorAssetDoc, RigStateDoc, parse_document


def test_defaults():
    config = load_pipeline_config()
    assert config.registration.lambda_edge == 0.5
    assert config.registration.stage_iterations == [100, 400, 200]
    assert config.registration.stage3_regularizer_gain == 4.0
    assert config.canonicalization.support_size == 3
    assert config.initialization.radius == 8.0
    assert config.initialization.delta_skel == 1.0
    assert config.grounding.dimension == 256


def test_yaml_file_and_flag_precedence(tmp_path):
    path = tmp_path / "pipeline.yaml"
    path.write_text("registration:\n  enabled: false\n  samples: 1024\nprior:\n  ridge_lambda: 0.5\n", encoding="utf-8")
    config = load_pipeline_config(str(path), {"prior.ridge_lambda": 2.0, "registration.seed": None})
    assert config.registration.enabled is False
    assert config.registration.samples == 1024
    assert config.registration.seed == 0
    assert config.prior.ridge_lambda == 2.0


def test_json_file(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps({"format_version": "1.2", "seed": 11}), encoding="utf-8")
    assert load_pipeline_config(str(path)).seed == 11


def test_missing_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_pipeline_config(str(tmp_path / "absent.yaml"))


def test_unknown_major_version(tmp_path):
    path = tmp_path / "pipeline.yaml"
    path.write_text("format_version: '2.0'\n", encoding="utf-8")
    with pytest.raises(SchemaVersionError):
        load_pipeline_config(str(path))


def test_invalid_values(tmp_path):
    path = tmp_path / "pipeline.yaml"
    path.write_text("registration:\n  samples: lots\n", encoding="utf-8")
    with pytest.raises(DataError, match="registration.samples"):
        load_pipeline_config(str(path))
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_pipeline_config(str(path))


def test_registration_ranges():
    with pytest.raises(DataError):
        RegistrationConfig(lambda_edge=-1.0).validate_ranges()
    with pytest.raises(DataError):
        RegistrationConfig(stage_iterations=[10, 10]).validate_ranges()
    RegistrationConfig().validate_ranges()


def test_documents_reject_unknown_major_versions():
    with pytest.raises(SchemaVersionError):
        parse_document(RigStateDoc, {"format_version": "3.1", "joints": []})
    with pytest.raises(SchemaVersionError):
        parse_document(PriorAssetDoc, {})
    assert parse_document(RigStateDoc, {"format_version": "1.4", "joints": []}).joints == []


def test_documents_report_invalid_fields():
    with pytest.raises(DataError):
        parse_document(RigStateDoc, {"format_version": "1.0", "joints": [{"name": "root"}]})
    with pytest.raises(DataError):
        parse_document(RigStateDoc, ["not", "an", "object"])
