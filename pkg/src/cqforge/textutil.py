"""Tokenization and bundled word lists shared by several stages."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")
PERSON_TOKENS = frozenset({"personx", "persony", "personz"})


def unigrams(text: str) -> list[str]:
    """Lowercased word tokens; punctuation and whitespace both delimit."""
    return _WORD.findall(text.lower())


@lru_cache(maxsize=None)
def _bundled_stopwords() -> frozenset[str]:
    raw = resources.files("cqforge.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(_parse_wordlist(raw))


def _parse_wordlist(raw: str) -> list[str]:
    return [ln.strip().lower() for ln in raw.splitlines() if ln.strip() and not ln.startswith("#")]


def load_stopwords(path: Optional[str | Path] = None) -> frozenset[str]:
    if path is None:
        return _bundled_stopwords()
    return frozenset(_parse_wordlist(Path(path).read_text(encoding="utf-8")))


def content_tokens(text: str, stopwords: Optional[frozenset[str]] = None) -> set[str]:
    """Unigrams minus person placeholders and stopwords.

    Possessive suffixes are dropped so "PersonX's" is stripped with PersonX.
    """
    stop = _bundled_stopwords() if stopwords is None else stopwords
    out = set()
    for tok in unigrams(text):
        if tok.endswith("'s"):
            tok = tok[:-2]
        if tok in PERSON_TOKENS or tok in stop:
            continue
        out.add(tok)
    return out
