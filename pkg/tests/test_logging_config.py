import json
import logging
import sys

import pytest
from pydantic import ValidationError

from app.core.config import Settings
from app.core.exceptions import ConfigError, MissingArtifactError, NumericError
from app.core.logging_config import JsonFormatter, configure_logging


def _record(**extra):
    record = logging.LogRecord("adaptlab.test", logging.INFO, __file__, 12, "epoch %d done", (3,), None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


def test_json_formatter_carries_training_fields():
    payload = json.loads(JsonFormatter().format(_record(stage="pretrain", epoch=3, loss=1.25, unrelated="x")))
    assert payload["message"] == "epoch 3 done"
    assert payload["level"] == "INFO"
    assert payload["stage"] == "pretrain"
    assert payload["epoch"] == 3
    assert payload["loss"] == 1.25
    assert "unrelated" not in payload


def test_json_formatter_reports_exceptions():
    try:
        raise NumericError("non-finite loss")
    except NumericError:
        record = logging.LogRecord("adaptlab.test", logging.ERROR, __file__, 1, "failed", (), sys.exc_info())
    payload = json.loads(JsonFormatter().format(record))
    assert payload["exception"] == {"type": "NumericError", "message": "non-finite loss"}


def test_configure_logging_replaces_its_handler():
    root = logging.getLogger()
    configure_logging("debug")
    configure_logging("info")
    ours = [h for h in root.handlers if getattr(h, "_adaptlab", False)]
    assert len(ours) == 1
    assert root.level == logging.INFO


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "warning")
    monkeypatch.setenv("OUTPUT_DIR", "elsewhere")
    settings = Settings()
    assert settings.LOG_LEVEL == "WARNING"
    assert settings.OUTPUT_DIR == "elsewhere"
    with pytest.raises(ValidationError):
        Settings(WORKERS=0)


def test_exit_codes():
    assert ConfigError("x").exit_code == 2
    error = MissingArtifactError("pretrain", "runs/pretrain/base_clinical.npz")
    assert error.exit_code == 3
    assert "pretrain" in str(error)
    assert NumericError("x").exit_code == 4
