from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

SETTINGS_PATH = Path(__file__).resolve().parent / "settings.yaml"


class ConfigError(ValueError):
    pass


def load_settings(path: Optional[Union[str, Path]] = None) -> dict:
    """Lädt die Einstellungen aus config/settings.yaml."""
    path = Path(path) if path else SETTINGS_PATH
    if not path.exists():
        raise FileNotFoundError(f"settings.yaml fehlt unter {path}")

    with path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} muss ein YAML-Mapping enthalten")
    return data


def section(settings: Mapping[str, Any], name: str, defaults: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    cfg = settings.get(name) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"Abschnitt '{name}' muss ein Mapping sein")
    return {**(defaults or {}), **cfg}


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Verschachteltes Überschreiben; Listen und Skalare ersetzen komplett."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
