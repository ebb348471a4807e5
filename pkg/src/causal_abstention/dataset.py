"""Multilingual multiple-choice QA ingestion, splits, and language metadata."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

logger = logging.getLogger(__name__)

from .errors import (
    EmptyDataset,
    ParseError,
    UnknownLanguage,
    UnknownSetting,
)

# Language registry: every code that can appear natively or in a related-language
# group. Names are the English exonyms used when asking a model for feedback.
LANGUAGES: dict[str, str] = {
    "ar": "Arabic",
    "bn": "Bengali",
    "ca": "Catalan",
    "da": "Danish",
    "de": "German",
    "en": "English",
    "fr": "French",
    "hi": "Hindi",
    "hu": "Hungarian",
    "id": "Indonesian",
    "it": "Italian",
    "kn": "Kannada",
    "ml": "Malayalam",
    "mr": "Marathi",
    "ne": "Nepali",
    "nl": "Dutch",
    "ro": "Romanian",
    "ru": "Russian",
    "sk": "Slovak",
    "ta": "Tamil",
    "te": "Telugu",
    "uk": "Ukrainian",
    "vi": "Vietnamese",
    "zh": "Chinese",
}

_NAME_TO_CODE = {name.casefold(): code for code, name in LANGUAGES.items()}


def language_name(code: str) -> str:
    """English name for a language code; raises UnknownLanguage otherwise."""

    try:
        return LANGUAGES[code]
    except KeyError:
        raise UnknownLanguage(code) from None


def language_code(name: str) -> str:
    """Code for an English language name (case-insensitive)."""

    try:
        return _NAME_TO_CODE[name.strip().casefold()]
    except KeyError:
        raise UnknownLanguage(name) from None


class ResourceTier(str, Enum):
    """Pre-training data share tiers: >1% high, 0.1-1% medium, <0.1% low."""

    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


RESOURCE_TIERS: dict[str, ResourceTier] = {
    "zh": ResourceTier.HIGH,
    "it": ResourceTier.HIGH,
    "ar": ResourceTier.MEDIUM,
    "id": ResourceTier.MEDIUM,
    "bn": ResourceTier.LOW,
    "te": ResourceTier.LOW,
    "ne": ResourceTier.LOW,
    "kn": ResourceTier.LOW,
}


def resource_tier(code: str) -> ResourceTier | None:
    """Tier for the evaluated language roster; None for untiered languages."""

    return RESOURCE_TIERS.get(code)


@dataclass(frozen=True)
class QAInstance:
    """One multiple-choice question with its gold option."""

    id: str
    language: str
    question: str
    options: tuple[str, ...]
    gold_index: int

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError(f"instance {self.id}: needs at least 2 options")
        if not (0 <= self.gold_index < len(self.options)):
            raise ValueError(
                f"instance {self.id}: gold_index {self.gold_index} out of range "
                f"for {len(self.options)} options"
            )
        if self.language not in LANGUAGES:
            raise UnknownLanguage(self.language)


@dataclass(frozen=True)
class LanguageConfig:
    """Native language of a run plus the languages feedback is elicited in."""

    native: str
    related: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        language_name(self.native)
        for code in self.related:
            language_name(code)

    @property
    def resource_tier(self) -> ResourceTier | None:
        return resource_tier(self.native)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint test/validation sampling, reproducible under ``seed``."""

    test_size: int = 500
    validation_size: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.test_size < 0 or self.validation_size < 0:
            raise ValueError("split sizes must be non-negative")


def load(
    path: str | Path,
    language: str,
    *,
    lenient: bool = False,
) -> list[QAInstance]:
    """Load a JSONL dataset file into validated instances.

    Each line is an object with ``id``, ``question``, ``options`` (>= 2
    strings) and ``answer_index``. Malformed lines are fatal with their line
    number, or skipped with a warning count under ``lenient``.

    Raises:
        ParseError: malformed line in strict mode.
        EmptyDataset: the file yields no instances.
    """

    path = Path(path)
    instances: list[QAInstance] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                instances.append(_parse_line(line, line_number, language))
            except ParseError as exc:
                if lenient:
                    logger.warning("%s: skipping %s", path, exc)
                    continue
                raise
    if not instances:
        raise EmptyDataset(f"{path}: no usable instances")
    return instances


def _parse_line(line: str, line_number: int, language: str) -> QAInstance:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {line_number}: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise ParseError(f"line {line_number}: expected an object")
    for key, kind in (("id", str), ("question", str), ("options", list), ("answer_index", int)):
        if key not in record:
            raise ParseError(f"line {line_number}: missing field {key!r}")
        if not isinstance(record[key], kind) or isinstance(record[key], bool):
            raise ParseError(f"line {line_number}: field {key!r} has wrong type")
    options = record["options"]
    if not all(isinstance(opt, str) for opt in options):
        raise ParseError(f"line {line_number}: options must all be strings")
    try:
        return QAInstance(
            id=record["id"],
            language=language,
            question=record["question"],
            options=tuple(options),
            gold_index=record["answer_index"],
        )
    except (ValueError, UnknownLanguage) as exc:
        raise ParseError(f"line {line_number}: {exc}") from exc


def split(
    instances: Sequence[QAInstance], spec: SplitSpec
) -> tuple[list[QAInstance], list[QAInstance]]:
    """Sample disjoint (test, validation) subsets, deterministic per seed."""

    needed = spec.test_size + spec.validation_size
    if needed > len(instances):
        raise ValueError(
            f"split needs {needed} instances but the corpus holds {len(instances)}"
        )
    rng = random.Random(spec.seed)
    picked = rng.sample(range(len(instances)), needed)
    test = [instances[i] for i in picked[: spec.test_size]]
    validation = [instances[i] for i in picked[spec.test_size :]]
    return test, validation


# Related-language groups. The shipped table lists, per native language, 12
# candidate languages read as four ordered groups of three. Groups are
# addressed by 1-based index; the aliases below are positional conventions
# for readability, not claims about which linguistic attribute produced
# each group.
GROUP_ALIASES: dict[str, int] = {
    "culture": 1,
    "geography": 2,
    "phonology": 3,
    "default": 4,
}

_GROUP_SIZE = 3
_GROUP_COUNT = 4


def _related_table() -> dict[str, list[str]]:
    payload = (
        resources.files("causal_abstention.resources")
        .joinpath("related_languages.json")
        .read_text(encoding="utf-8")
    )
    return json.loads(payload)


_TABLE_CACHE: dict[str, list[str]] | None = None


def related_language_table() -> dict[str, list[str]]:
    """The full 12-entry candidate table keyed by native language code."""

    global _TABLE_CACHE
    if _TABLE_CACHE is None:
        _TABLE_CACHE = _related_table()
    return _TABLE_CACHE


def candidate_groups(native: str, table: Mapping[str, Sequence[str]] | None = None) -> list[tuple[str, ...]]:
    """All four 3-language candidate groups for a native language, as codes."""

    table = table if table is not None else related_language_table()
    if native not in table:
        raise UnknownLanguage(native)
    names = table[native]
    if len(names) != _GROUP_SIZE * _GROUP_COUNT:
        raise ParseError(
            f"related-language entry for {native!r} must list "
            f"{_GROUP_SIZE * _GROUP_COUNT} languages, found {len(names)}"
        )
    groups = []
    for start in range(0, len(names), _GROUP_SIZE):
        groups.append(tuple(language_code(name) for name in names[start : start + _GROUP_SIZE]))
    return groups


def related_languages(
    native: str,
    setting: int | str,
    table: Mapping[str, Sequence[str]] | None = None,
) -> tuple[str, ...]:
    """One 3-language group for a native language.

    ``setting`` is a 1-based group index or one of the positional aliases
    in :data:`GROUP_ALIASES`.

    Raises:
        UnknownLanguage: native code absent from the table.
        UnknownSetting: selector out of range or unrecognized.
    """

    groups = candidate_groups(native, table)
    if isinstance(setting, str):
        key = setting.strip().casefold()
        if key not in GROUP_ALIASES:
            raise UnknownSetting(setting)
        index = GROUP_ALIASES[key]
    else:
        index = setting
    if not (1 <= index <= _GROUP_COUNT):
        raise UnknownSetting(str(setting))
    return groups[index - 1]
