"""Character n-gram language identification (out-of-place rank distance).

Each language profile is the rank order of its most frequent character
1-4-grams, built from the small corpora bundled under ``data/langid/``.
A text is scored against every profile by summing, over the text's own
ranked n-grams, the rank displacement in the profile (missing n-grams pay
the maximum penalty). The profile with the smallest distance wins.
"""
from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import DataError

PROFILE_DEPTH = 1000
MIN_TEXT_CHARS = 10
INDETERMINATE = "und"

_URL_RE = re.compile(r"https?://\S+|www\.\S+")
_MENTION_RE = re.compile(r"(?<!\S)@\S*")
_NON_LETTER_RE = re.compile(r"[^a-zà-öø-ÿœij'\s]", re.IGNORECASE)


def _clean(text: str) -> str:
    """Lowercased letters-and-spaces view of the text used for profiling."""
    text = unicodedata.normalize("NFC", text).lower()
    text = _URL_RE.sub(" ", text)
    text = _MENTION_RE.sub(" ", text)
    text = _NON_LETTER_RE.sub(" ", text)
    return " ".join(text.split())


def _ngram_counts(cleaned: str) -> Counter:
    counts: Counter = Counter()
    for word in cleaned.split():
        padded = f" {word} "
        for n in range(1, 5):
            for i in range(len(padded) - n + 1):
                counts[padded[i : i + n]] += 1
    return counts


def _rank(counts: Counter, depth: int) -> dict[str, int]:
    # Ties broken by the n-gram itself so profiles are deterministic.
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:depth]
    return {gram: rank for rank, (gram, _) in enumerate(top)}


def build_profile(text: str, depth: int = PROFILE_DEPTH) -> dict[str, int]:
    """Rank map (n-gram -> position) of the ``depth`` most frequent n-grams."""
    return _rank(_ngram_counts(_clean(text)), depth)


@dataclass(frozen=True)
class LanguageProfiles:
    """Ranked n-gram profiles for a set of languages."""

    profiles: dict[str, dict[str, int]]
    depth: int = PROFILE_DEPTH

    def __post_init__(self):
        if "nl" not in self.profiles or len(self.profiles) < 2:
            raise DataError(
                "language profiles must contain 'nl' plus at least one contrast language"
            )

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(sorted(self.profiles))


def detect_language(text: str, profiles: LanguageProfiles) -> tuple[str, float]:
    """Return (language_code, confidence in [0, 1]) for ``text``.

    Texts shorter than 10 characters after cleanup are indeterminate and
    return ``("und", 0.0)``; the caller decides what to do (the corpus
    pipeline keeps them).
    """
    cleaned = _clean(text)
    if len(cleaned) < MIN_TEXT_CHARS:
        return INDETERMINATE, 0.0
    doc_rank = _rank(_ngram_counts(cleaned), profiles.depth)
    penalty = profiles.depth
    worst = penalty * len(doc_rank)
    best_lang, best_dist = INDETERMINATE, None
    for lang in sorted(profiles.profiles):
        ranks = profiles.profiles[lang]
        dist = 0
        for gram, r in doc_rank.items():
            lr = ranks.get(gram)
            dist += penalty if lr is None else abs(lr - r)
        if best_dist is None or dist < best_dist:
            best_lang, best_dist = lang, dist
    confidence = 1.0 - best_dist / worst if worst else 0.0
    return best_lang, max(0.0, min(1.0, confidence))


@lru_cache(maxsize=1)
def load_default_profiles() -> LanguageProfiles:
    """Profiles built from the bundled mini corpora (nl, en, de, fr, af)."""
    root = resources.files("contact").joinpath("data/langid")
    profiles = {}
    for entry in sorted(root.iterdir()):
        if entry.name.endswith(".txt"):
            lang = entry.name[:-4]
            profiles[lang] = build_profile(entry.read_text(encoding="utf-8"))
    return LanguageProfiles(profiles=profiles)
