"""Prompt rendering for the four call kinds, and parsing of model replies."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from .core import Verdict
from .dataset import language_name
from .errors import MissingField


class Stage(str, Enum):
    PROPOSE = "propose"
    DIRECT_REVIEW = "direct-review"
    GENERATE_FEEDBACK = "generate-feedback"
    DECIDE_FROM_FEEDBACK = "decide-from-feedback"


@dataclass(frozen=True)
class PromptKind:
    """A call kind; feedback generation carries exactly one target language."""

    stage: Stage
    language: str | None = None

    def __post_init__(self) -> None:
        if self.stage is Stage.GENERATE_FEEDBACK and not self.language:
            raise ValueError("feedback generation needs a target language")
        if self.stage is not Stage.GENERATE_FEEDBACK and self.language is not None:
            raise ValueError(f"{self.stage.value} does not take a language")

    @classmethod
    def propose(cls) -> "PromptKind":
        return cls(Stage.PROPOSE)

    @classmethod
    def direct_review(cls) -> "PromptKind":
        return cls(Stage.DIRECT_REVIEW)

    @classmethod
    def generate_feedback(cls, language: str) -> "PromptKind":
        return cls(Stage.GENERATE_FEEDBACK, language)

    @classmethod
    def decide_from_feedback(cls) -> "PromptKind":
        return cls(Stage.DECIDE_FROM_FEEDBACK)


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    kind: PromptKind
    question_id: str = ""


# The answer-proposal instruction, localized to the roster languages so the
# model is addressed in the question's own language. English elsewhere.
PROPOSE_INSTRUCTIONS: dict[str, str] = {
    "en": (
        "Answer the following multiple-choice question. Reply with the letter "
        "of the best option followed by its text."
    ),
    "zh": "请回答下列选择题。请以最佳选项的字母作答，并附上该选项的内容。",
    "it": (
        "Rispondi alla seguente domanda a scelta multipla. Rispondi con la "
        "lettera dell'opzione migliore seguita dal suo testo."
    ),
    "ar": "أجب عن سؤال الاختيار من متعدد التالي. أجب بحرف الخيار الأفضل متبوعًا بنصه.",
    "id": (
        "Jawablah pertanyaan pilihan ganda berikut. Balas dengan huruf pilihan "
        "terbaik diikuti teksnya."
    ),
    "bn": "নিচের বহুনির্বাচনী প্রশ্নের উত্তর দিন। সেরা বিকল্পের অক্ষর এবং তার পাঠ্যসহ উত্তর দিন।",
    "te": "కింది బహుళైచ్ఛిక ప్రశ్నకు సమాధానం ఇవ్వండి. ఉత్తమ ఎంపిక అక్షరాన్ని, దాని పాఠ్యాన్ని కలిపి ఇవ్వండి.",
    "ne": "तलको बहुवैकल्पिक प्रश्नको उत्तर दिनुहोस्। उत्तम विकल्पको अक्षर र त्यसको पाठ सहित जवाफ दिनुहोस्।",
    "kn": "ಕೆಳಗಿನ ಬಹು ಆಯ್ಕೆಯ ಪ್ರಶ್ನೆಗೆ ಉತ್ತರಿಸಿ. ಅತ್ಯುತ್ತಮ ಆಯ್ಕೆಯ ಅಕ್ಷರ ಮತ್ತು ಅದರ ಪಠ್ಯದೊಂದಿಗೆ ಉತ್ತರಿಸಿ.",
}


@dataclass(frozen=True)
class TemplateSet:
    """The four prompt templates. Placeholders: {instruction} (propose only),
    {question}, {options}, {answer}, {language}, {feedback}."""

    propose: str = (
        "{instruction}\n\nQuestion: {question}\nOptions:\n{options}"
    )
    direct_review: str = (
        "Question: {question}\nOptions:\n{options}\n\n"
        "Proposed Answer: {answer}\n\n"
        "Please review the correctness of proposed answer True or False directly."
    )
    generate_feedback: str = (
        "Question: {question}\nOptions:\n{options}\n\n"
        "Proposed Answer: {answer}\n\n"
        "Please review the proposed answer and provide a paragraph of feedback "
        "on its correctness. Feedback should be in {language}."
    )
    decide_from_feedback: str = (
        "Question: {question}\nOptions:\n{options}\n\n"
        "Proposed Answer: {answer}\n\n"
        "Feedback: {feedback}\n\n"
        "Based on the feedback for measuring the correctness of the answer, "
        "is the proposed answer True or False?"
    )

    def with_overrides(self, **overrides: str) -> "TemplateSet":
        return replace(self, **overrides)


DEFAULT_TEMPLATES = TemplateSet()

_OPTION_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def format_options(options: Sequence[str]) -> str:
    """Options as lettered lines: ``A. first`` / ``B. second`` / ..."""

    if len(options) > len(_OPTION_LETTERS):
        raise ValueError(f"too many options ({len(options)})")
    return "\n".join(f"{_OPTION_LETTERS[i]}. {text}" for i, text in enumerate(options))


def render(
    kind: PromptKind,
    question: str,
    options: Sequence[str],
    proposed_answer: str | None = None,
    feedback: str | None = None,
    *,
    question_id: str = "",
    question_language: str = "en",
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> RenderedPrompt:
    """Render one prompt. The proposed answer is required for every kind
    except the initial proposal; feedback only for the decide kind.

    Raises:
        MissingField: a required substitution is absent.
    """

    if kind.stage is not Stage.PROPOSE and proposed_answer is None:
        raise MissingField(f"{kind.stage.value} prompt needs the proposed answer")
    if kind.stage is Stage.DECIDE_FROM_FEEDBACK and feedback is None:
        raise MissingField("decide-from-feedback prompt needs the feedback text")

    fields = {
        "question": question,
        "options": format_options(options),
        "answer": proposed_answer,
        "feedback": feedback,
    }
    if kind.stage is Stage.PROPOSE:
        template = templates.propose
        fields["instruction"] = PROPOSE_INSTRUCTIONS.get(
            question_language, PROPOSE_INSTRUCTIONS["en"]
        )
    elif kind.stage is Stage.DIRECT_REVIEW:
        template = templates.direct_review
    elif kind.stage is Stage.GENERATE_FEEDBACK:
        template = templates.generate_feedback
        fields["language"] = language_name(kind.language)
    else:
        template = templates.decide_from_feedback

    try:
        text = template.format_map(_Strict(fields))
    except KeyError as exc:
        raise MissingField(f"template placeholder {exc.args[0]!r} has no value") from exc
    return RenderedPrompt(text=text, kind=kind, question_id=question_id)


class _Strict(dict):
    def __missing__(self, key: str) -> str:
        raise KeyError(key)

    def __getitem__(self, key: str):
        value = super().__getitem__(key)
        if value is None:
            raise KeyError(key)
        return value


_VERDICT_TOKEN = re.compile(r"\b(true|false)\b", re.IGNORECASE)
# Leading option letter, terminated by punctuation, whitespace, or end of text.
_LEADING_CHOICE = re.compile(
    r"^[\s\(\[\*\"'“「]*([A-Za-z])(?=$|[\s.。．:：)）\]。，,、;；\*\"'”」-])"
)


def parse_verdict(text: str) -> Verdict:
    """Scan a model reply for a standalone true/false token.

    The first occurrence wins when both appear; no token at all parses as
    invalid. Applies to model responses only, never to rendered prompts.
    """

    match = _VERDICT_TOKEN.search(text)
    if match is None:
        return Verdict.INVALID
    return Verdict.TRUE if match.group(1).lower() == "true" else Verdict.FALSE


def _normalize(text: str) -> str:
    return re.sub(r"\s+", "", text).casefold()


def parse_choice(text: str, options: Sequence[str]) -> int | None:
    """Map a model reply to an option index, or None when unmatched.

    A leading option letter wins (``C``, ``C.``, ``c)`` all resolve alike);
    otherwise the longest option text found verbatim inside the reply, after
    whitespace/case normalization.
    """

    if not options:
        raise ValueError("options must be non-empty")
    match = _LEADING_CHOICE.match(text)
    if match is not None:
        index = _OPTION_LETTERS.find(match.group(1).upper())
        if 0 <= index < len(options):
            return index
    haystack = _normalize(text)
    best_index: int | None = None
    best_length = 0
    for index, option in enumerate(options):
        needle = _normalize(option)
        if needle and needle in haystack and len(needle) > best_length:
            best_index = index
            best_length = len(needle)
    return best_index
