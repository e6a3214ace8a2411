"""Labeled-post record type shared by training and the evaluation harness."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError
from .ioutil import read_jsonl, write_jsonl

ARGUMENT_CLASSES = (
    "development",
    "liberty",
    "institutional_motives",
    "efficacy",
    "safety",
    "criticism",
    "alternative_medicine",
    "conspiracy",
)

STANCE4 = ("anti", "hesitant", "neutral", "pro")
STANCE2 = ("hesitant", "not_hesitant")
HESITANT_STANCE4 = frozenset({"anti", "hesitant"})


def stance2_from_stance4(stance4: str) -> str:
    if stance4 not in STANCE4:
        raise DataError(f"unknown stance4 value {stance4!r}")
    return "hesitant" if stance4 in HESITANT_STANCE4 else "not_hesitant"


@dataclass(frozen=True)
class LabeledPost:
    """Text plus binary stance and a possibly empty argument-label set."""

    id: str
    platform: str
    text: str
    stance2: str
    stance4: str | None = None
    arguments: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.platform not in ("twitter", "facebook"):
            raise DataError(f"post {self.id}: unknown platform {self.platform!r}")
        if self.stance2 not in STANCE2:
            raise DataError(f"post {self.id}: unknown stance2 {self.stance2!r}")
        if self.stance4 is not None:
            derived = stance2_from_stance4(self.stance4)
            if derived != self.stance2:
                raise DataError(
                    f"post {self.id}: stance2 {self.stance2!r} inconsistent with "
                    f"stance4 {self.stance4!r} (expected {derived!r})"
                )
        unknown = set(self.arguments) - set(ARGUMENT_CLASSES)
        if unknown:
            raise DataError(
                f"post {self.id}: unknown argument label(s) {sorted(unknown)}"
            )

    @property
    def hesitant(self) -> bool:
        return self.stance2 == "hesitant"

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "platform": self.platform,
            "text": self.text,
            "stance2": self.stance2,
            "arguments": sorted(self.arguments),
        }
        if self.stance4 is not None:
            rec["stance4"] = self.stance4
        return rec


def parse_labeled_post(rec: dict, where: str = "") -> LabeledPost:
    try:
        stance4 = rec.get("stance4")
        stance2 = rec.get("stance2")
        if stance2 is None:
            if stance4 is None:
                raise DataError("record carries neither stance2 nor stance4")
            stance2 = stance2_from_stance4(stance4)
        return LabeledPost(
            id=str(rec["id"]),
            platform=rec["platform"],
            text=rec["text"],
            stance2=stance2,
            stance4=stance4,
            arguments=frozenset(rec.get("arguments", [])),
        )
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc}") from exc
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from exc


def read_labeled_posts(path: str | Path) -> Iterator[LabeledPost]:
    for lineno, rec in read_jsonl(path):
        yield parse_labeled_post(rec, where=f"{path}:{lineno}")


def write_labeled_posts(path: str | Path, posts: Iterable[LabeledPost]) -> int:
    return write_jsonl(path, (p.to_record() for p in posts))
