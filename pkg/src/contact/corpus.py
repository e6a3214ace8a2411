"""Streaming curation pipeline for raw social-media posts.

Stages, in order: topic match -> dedupe -> retweet strip -> language filter
-> anonymize. Every stage except dedupe is a pure function of a single post;
dedupe keeps the first occurrence per normalized text key and is the only
stateful stage. The pipeline is deterministic: the same input file always
yields byte-identical output, regardless of the worker count.
"""
from __future__ import annotations

import random
import re
import unicodedata
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import DataError
from .ioutil import read_jsonl, write_jsonl
from .langid import INDETERMINATE, LanguageProfiles, detect_language

PLATFORMS = ("twitter", "facebook")
RETWEET_PREFIX = "RT @"
USER_TOKEN = "@USER"

_MENTION_TOKEN_RE = re.compile(r"(?<!\S)@\S*")


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class RawPost:
    """One scraped message, prior to any filtering."""

    id: str
    platform: str
    text: str
    is_retweet_flag: bool | None = None
    created_at: str | None = None

    def __post_init__(self):
        if not self.id:
            raise DataError("post id must be nonempty")
        if self.platform not in PLATFORMS:
            raise DataError(f"unknown platform {self.platform!r}")
        if not nfc(self.text):
            raise DataError(f"post {self.id}: text empty after normalization")


@dataclass(frozen=True)
class KeywordRule:
    """A topic lemma plus the compiled patterns that detect it."""

    lemma: str
    patterns: tuple[re.Pattern, ...]


@dataclass(frozen=True)
class CleanDoc:
    """A filter-surviving, anonymized text ready for tokenization."""

    id: str
    platform: str
    text: str
    matched_lemmas: frozenset[str]
    token_count: int

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "platform": self.platform,
            "text": self.text,
            "matched_lemmas": sorted(self.matched_lemmas),
            "token_count": self.token_count,
        }


STAGES = (
    "input",
    "keyword_matched",
    "after_dedup",
    "after_retweet_removal",
    "after_language_filter",
)


@dataclass
class FilterReport:
    """Per-stage survivor counts plus total whitespace tokens retained."""

    counts: dict[str, int] = field(
        default_factory=lambda: {stage: 0 for stage in STAGES}
    )
    tokens_retained: int = 0

    def check_monotone(self) -> None:
        values = [self.counts[s] for s in STAGES]
        if any(a < b for a, b in zip(values, values[1:])):
            raise AssertionError(f"stage counts increased: {self.counts}")

    def to_json(self) -> dict:
        return {"counts": dict(self.counts), "tokens_retained": self.tokens_retained}


def parse_raw_post(rec: dict, where: str = "") -> RawPost:
    try:
        return RawPost(
            id=str(rec["id"]),
            platform=rec["platform"],
            text=rec["text"],
            is_retweet_flag=rec.get("is_retweet_flag"),
            created_at=rec.get("created_at"),
        )
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc}") from exc
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc


def read_raw_posts(path: str | Path) -> Iterator[RawPost]:
    for lineno, rec in read_jsonl(path):
        yield parse_raw_post(rec, where=f"{path}:{lineno}")


def default_rules_path() -> Path:
    return Path(str(resources.files("contact").joinpath("data/default_rules.tsv")))


def compile_rules(rules_file: str | Path) -> list[KeywordRule]:
    """Parse and compile a tab-separated rules file (all-or-nothing).

    Each record is ``lemma<TAB>pattern...``; "#" lines are comments. Every
    pattern must compile (case-insensitive), and at least one pattern per
    rule must match the lemma itself, so the lemma stays discoverable.
    """
    rules: list[KeywordRule] = []
    path = Path(rules_file)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        lemma = parts[0].strip()
        raw_patterns = [p for p in parts[1:] if p.strip()]
        if not lemma or not raw_patterns:
            raise DataError(f"{path}:{lineno}: rule needs a lemma and >=1 pattern")
        compiled = []
        for i, pat in enumerate(raw_patterns):
            try:
                compiled.append(re.compile(pat, re.IGNORECASE))
            except re.error as exc:
                raise DataError(
                    f"{path}:{lineno}: rule {lemma!r} pattern {i}: {exc}"
                ) from exc
        if not any(p.search(lemma) for p in compiled):
            raise DataError(
                f"{path}:{lineno}: rule {lemma!r}: no pattern matches its own lemma"
            )
        rules.append(KeywordRule(lemma=lemma, patterns=tuple(compiled)))
    if not rules:
        raise DataError(f"{path}: no rules")
    return rules


def match_topic(doc_text: str, rules: Sequence[KeywordRule]) -> set[str]:
    """Lemmas whose any pattern matches the NFC-normalized text."""
    if not rules:
        raise ValueError("rules must be nonempty")
    text = nfc(doc_text)
    return {
        rule.lemma
        for rule in rules
        if any(p.search(text) for p in rule.patterns)
    }


def is_retweet(post: RawPost) -> bool:
    if post.is_retweet_flag:
        return True
    return nfc(post.text).lstrip().startswith(RETWEET_PREFIX)


def strip_retweets(posts: Iterable[RawPost]) -> Iterator[RawPost]:
    return (p for p in posts if not is_retweet(p))


def dedupe_key(text: str) -> str:
    return " ".join(nfc(text).lower().split())


def dedupe(posts: Iterable[RawPost]) -> Iterator[RawPost]:
    """First occurrence per normalized key, in input order."""
    seen: set[str] = set()
    for post in posts:
        key = dedupe_key(post.text)
        if key not in seen:
            seen.add(key)
            yield post


def anonymize(text: str) -> str:
    """Replace every whitespace-delimited token starting with "@" by "@USER"."""
    return _MENTION_TOKEN_RE.sub(USER_TOKEN, text)


def _post_facts(
    text: str, rules: Sequence[KeywordRule], profiles: LanguageProfiles
) -> tuple[frozenset[str], str]:
    """Pure per-post work shared by serial and parallel execution."""
    lemmas = frozenset(match_topic(text, rules))
    if not lemmas:
        return lemmas, ""
    lang, _ = detect_language(text, profiles)
    return lemmas, lang


_WORKER_STATE: dict = {}


def _init_worker(rules: Sequence[KeywordRule], profiles: LanguageProfiles) -> None:
    _WORKER_STATE["rules"] = rules
    _WORKER_STATE["profiles"] = profiles


def _facts_worker(text: str) -> tuple[frozenset[str], str]:
    return _post_facts(text, _WORKER_STATE["rules"], _WORKER_STATE["profiles"])


def run_pipeline(
    posts: Iterable[RawPost],
    rules: Sequence[KeywordRule],
    profiles: LanguageProfiles,
    keep_languages: Sequence[str] = ("nl",),
    jobs: int = 1,
) -> tuple[list[CleanDoc], FilterReport]:
    """Run all stages over the post stream and return docs plus stage counts.

    Indeterminate language (very short texts) is kept: recall is preferred
    over precision for short noisy posts. With ``jobs > 1`` the pure per-post
    work fans out to worker processes; output order and content are identical
    to the serial run.
    """
    report = FilterReport()
    posts = list(posts)
    report.counts["input"] = len(posts)

    if jobs > 1 and posts:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_init_worker, initargs=(list(rules), profiles)
        ) as pool:
            facts = list(pool.map(_facts_worker, (p.text for p in posts), chunksize=32))
    else:
        facts = [_post_facts(p.text, rules, profiles) for p in posts]

    matched = [
        (post, lemmas, lang)
        for post, (lemmas, lang) in zip(posts, facts)
        if lemmas
    ]
    report.counts["keyword_matched"] = len(matched)

    seen: set[str] = set()
    unique = []
    for item in matched:
        key = dedupe_key(item[0].text)
        if key not in seen:
            seen.add(key)
            unique.append(item)
    report.counts["after_dedup"] = len(unique)

    no_retweets = [item for item in unique if not is_retweet(item[0])]
    report.counts["after_retweet_removal"] = len(no_retweets)

    keep = set(keep_languages) | {INDETERMINATE}
    surviving = [item for item in no_retweets if item[2] in keep]
    report.counts["after_language_filter"] = len(surviving)

    docs = []
    for post, lemmas, _ in surviving:
        text = anonymize(nfc(post.text))
        doc = CleanDoc(
            id=post.id,
            platform=post.platform,
            text=text,
            matched_lemmas=lemmas,
            token_count=len(text.split()),
        )
        report.tokens_retained += doc.token_count
        docs.append(doc)
    report.check_monotone()
    return docs, report


def sample_for_audit(
    docs: Iterable[CleanDoc], n: int, seed: int
) -> list[CleanDoc]:
    """Uniform reservoir sample of ``n`` docs, deterministic under ``seed``.

    If the stream holds fewer than ``n`` docs the whole stream is returned
    and a UserWarning is emitted.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    reservoir: list[CleanDoc] = []
    total = 0
    for total, doc in enumerate(docs, start=1):
        if total <= n:
            reservoir.append(doc)
        else:
            j = rng.randrange(total)
            if j < n:
                reservoir[j] = doc
    if total < n:
        warnings.warn(
            f"audit sample requested {n} docs but the stream holds only {total}",
            UserWarning,
            stacklevel=2,
        )
    return reservoir


def write_clean_docs(path: str | Path, docs: Iterable[CleanDoc]) -> int:
    return write_jsonl(path, (d.to_record() for d in docs))


def read_clean_docs(path: str | Path) -> Iterator[CleanDoc]:
    for lineno, rec in read_jsonl(path):
        try:
            yield CleanDoc(
                id=str(rec["id"]),
                platform=rec["platform"],
                text=rec["text"],
                matched_lemmas=frozenset(rec.get("matched_lemmas", [])),
                token_count=int(rec["token_count"]),
            )
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from exc


def read_texts(path: str | Path) -> list[str]:
    """Texts from any JSONL whose records carry a "text" field.

    Accepts both RawPost and CleanDoc files; the training code only needs
    the text stream.
    """
    texts = []
    for lineno, rec in read_jsonl(path):
        if "text" not in rec:
            raise DataError(f"{path}:{lineno}: record has no 'text' field")
        texts.append(rec["text"])
    return texts
