import re
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping

from jinja2 import Environment, StrictUndefined

PROMPT_DIR = Path(__file__).resolve().parent.parent / "config" / "prompts"

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_jinja = Environment(undefined=StrictUndefined, keep_trailing_newline=False, trim_blocks=True)


def load_prompt(name: str) -> str:
    """
    Lädt Prompt-Datei roh (nur das abschließende Newline wird entfernt).
    """
    path = PROMPT_DIR / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(f"Prompt {name}.txt fehlt!")

    raw = path.read_text(encoding="utf-8")
    return raw[:-1] if raw.endswith("\n") else raw


def fill_placeholders(template: str, mapping: Mapping[str, str]) -> str:
    """
    Ersetzt {key} in einem Durchlauf - ohne format(), ersetzte Werte
    werden nicht erneut interpretiert. Unbekannte Platzhalter bleiben stehen.
    """

    def _sub(match: re.Match) -> str:
        key = match.group(1)
        return str(mapping[key]) if key in mapping else match.group(0)

    return _PLACEHOLDER.sub(_sub, template)


@lru_cache(maxsize=None)
def _compiled(name: str):
    return _jinja.from_string(load_prompt(name))


def render_prompt_template(name: str, **context: Any) -> str:
    """Jinja2-Prompt (z.B. Listwise-Fenster mit Schleife über Passagen)."""
    return _compiled(name).render(**context)
