from __future__ import annotations

import json

import pytest

from app.config import Settings, load_settings, read_env, resolve_config_path


def test_template_defaults_match_settings(tmp_path):
    settings = load_settings(env_path=str(tmp_path / "absent.env"))
    assert settings == Settings()


def test_explicit_config_overrides_defaults(tmp_path):
    config = tmp_path / "fast.json"
    config.write_text(json.dumps({"steps": 50, "eval_snrs": [0, 6], "log_level": "warning"}))
    settings = load_settings(str(config), env_path=str(tmp_path / "absent.env"))
    assert settings.steps == 50
    assert settings.eval_snrs == (0.0, 6.0)
    assert settings.log_level == "WARNING"
    assert settings.lr == Settings().lr


def test_env_file_selects_config_and_log_level(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"batch": 2}))
    env = tmp_path / ".env"
    env.write_text(f"AUDFRONT_CONFIG={config}\nAUDFRONT_LOG_LEVEL=debug\nOTHER_KEY=ignored\n")
    assert set(read_env(str(env))) == {"AUDFRONT_CONFIG", "AUDFRONT_LOG_LEVEL"}
    settings = load_settings(env_path=str(env))
    assert settings.batch == 2
    assert settings.log_level == "DEBUG"


def test_process_environment_is_not_consulted(tmp_path, monkeypatch):
    monkeypatch.setenv("AUDFRONT_LOG_LEVEL", "ERROR")
    assert load_settings(env_path=str(tmp_path / "absent.env")).log_level == "INFO"


def test_invalid_files_are_reported(tmp_path):
    absent_env = str(tmp_path / "absent.env")
    with pytest.raises(FileNotFoundError):
        resolve_config_path(str(tmp_path / "missing.json"))

    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"momentum": 0.9}))
    with pytest.raises(ValueError, match="momentum"):
        load_settings(str(config), env_path=absent_env)

    config.write_text(json.dumps({"batch": 2.5}))
    with pytest.raises(ValueError, match="inteiro"):
        load_settings(str(config), env_path=absent_env)

    config.write_text(json.dumps({"log_level": "LOUD"}))
    with pytest.raises(ValueError, match="LOUD"):
        load_settings(str(config), env_path=absent_env)

    config.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError):
        load_settings(str(config), env_path=absent_env)
