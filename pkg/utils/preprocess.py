import re
from typing import List

_TOKEN_SPLIT = re.compile(r"[\W_]+")
_WORD = re.compile(r"\S+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


# ---------------------------------------------------------
# Tokenizer (BM25, Oracle-Judge, Token-Schätzung)
# casefold, Split an allem Nicht-Alphanumerischen (Unicode), keine Stoppwörter
# ---------------------------------------------------------
def tokenize(text: str) -> List[str]:
    if not text:
        return []
    return [tok for tok in _TOKEN_SPLIT.split(text.casefold()) if tok]


# ---------------------------------------------------------
# Sätze trennen (für synthetische Dokumente und Oracle-Judge)
# ---------------------------------------------------------
def split_sentences(text: str) -> List[str]:
    text = normalize_whitespace(text)
    if not text:
        return []
    return [s for s in _SENTENCE_END.split(text) if s]


# ---------------------------------------------------------
# Whitespace normalisieren
# ---------------------------------------------------------
def normalize_whitespace(text: str) -> str:
    if not text:
        return ""
    return re.sub(r"\s+", " ", text).strip()


# ---------------------------------------------------------
# Text auf maximale Tokenzahl kürzen (Wortgrenzen, Zeilenumbrüche bleiben)
# ---------------------------------------------------------
def limit_tokens(text: str, max_tokens: int) -> str:
    if not text or max_tokens <= 0:
        return ""
    words = list(_WORD.finditer(text))
    if len(words) <= max_tokens:
        return text.strip()
    return text[: words[max_tokens - 1].end()].strip()


def estimate_tokens(text: str) -> int:
    text = normalize_whitespace(text)
    return len(text.split(" ")) if text else 0


# ---------------------------------------------------------
# Passage für Prompts kürzen (Listwise-Fenster, Judge)
# ---------------------------------------------------------
def limit_length(text: str, max_chars: int = 2000) -> str:
    if not text:
        return ""
    return normalize_whitespace(text)[:max_chars]
