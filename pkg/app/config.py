from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/defaults.json"
DEFAULT_CONFIG_TEMPLATE_PATH = "config/defaults.example.json"
DEFAULT_ENV_PATH = ".env"
ENV_CONFIG_KEY = "AUDFRONT_CONFIG"
ENV_LOG_LEVEL_KEY = "AUDFRONT_LOG_LEVEL"
DECLARED_ENV_KEYS = (ENV_CONFIG_KEY, ENV_LOG_LEVEL_KEY)
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class Settings:
    lr: float = 0.001
    batch: int = 4
    steps: int = 2000
    snr_db: float = 0.0
    eval_snrs: tuple[float, ...] = (-3.0, 0.0, 3.0)
    eval_items: int = 100
    eval_every: int = 250
    crop_seconds: float = 1.0
    log_level: str = "INFO"


def _runtime_root() -> Path:
    if getattr(sys, "frozen", False):
        return Path(sys.executable).resolve().parent
    return Path(__file__).resolve().parents[1]


def _resolve_path(path: str) -> Path:
    file_path = Path(path)
    if file_path.is_absolute():
        return file_path
    return (_runtime_root() / file_path).resolve()


def read_env(env_path: str = DEFAULT_ENV_PATH) -> Dict[str, str]:
    """Declared keys from the .env file; the process environment is never consulted."""
    env_file = _resolve_path(env_path)
    if not env_file.exists():
        return {}
    raw = dotenv_values(env_file)
    values: Dict[str, str] = {}
    for key in DECLARED_ENV_KEYS:
        text = (raw.get(key) or "").strip()
        if text:
            values[key] = text
    ignored = sorted(set(raw) - set(DECLARED_ENV_KEYS))
    if ignored:
        logger.debug("ignoring undeclared .env keys: %s", ", ".join(ignored))
    return values


def resolve_config_path(config_path: str = "", env: Optional[Dict[str, str]] = None) -> Optional[Path]:
    explicit = config_path.strip() or (env or {}).get(ENV_CONFIG_KEY, "")
    if explicit:
        file_path = _resolve_path(explicit)
        if not file_path.exists():
            raise FileNotFoundError(f"Arquivo de configuracao nao encontrado: {explicit}")
        return file_path
    for candidate in (DEFAULT_CONFIG_PATH, DEFAULT_CONFIG_TEMPLATE_PATH):
        file_path = _resolve_path(candidate)
        if file_path.exists():
            return file_path
    return None


def _coerce(name: str, value, default):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ValueError(f"Valor invalido para '{name}': esperado lista de numeros.")
        return tuple(float(v) for v in value)
    if isinstance(default, bool) or isinstance(default, str):
        return str(value)
    if isinstance(default, int):
        if isinstance(value, bool) or int(value) != value:
            raise ValueError(f"Valor invalido para '{name}': esperado inteiro.")
        return int(value)
    return float(value)


def load_settings(config_path: str = "", env_path: str = DEFAULT_ENV_PATH) -> Settings:
    env = read_env(env_path)
    settings = Settings()
    file_path = resolve_config_path(config_path, env)
    if file_path is not None:
        raw = json.loads(file_path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError(f"Configuracao invalida em {file_path}: esperado objeto JSON.")
        defaults = {f.name: getattr(settings, f.name) for f in fields(Settings)}
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ValueError(f"Chave desconhecida em {file_path}: '{unknown[0]}'.")
        settings = replace(settings, **{key: _coerce(key, value, defaults[key]) for key, value in raw.items()})
        logger.debug("settings loaded from %s", file_path)
    if ENV_LOG_LEVEL_KEY in env:
        settings = replace(settings, log_level=env[ENV_LOG_LEVEL_KEY])
    level = settings.log_level.upper()
    if level not in LOG_LEVELS:
        raise ValueError(f"Nivel de log invalido '{settings.log_level}'. Use {', '.join(LOG_LEVELS)}.")
    return replace(settings, log_level=level)
