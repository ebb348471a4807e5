"""Chat-completion backends: HTTP, scripted replay, synthetic simulation, caching.

All backends share one contract: ``complete(request) -> CompletionResponse``,
safe for concurrent invocation.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import httpx

from .dataset import QAInstance, language_name
from .errors import AuthFailure, BackendUnavailable, ParseError, ScriptExhausted
from .prompts import RenderedPrompt, Stage

MAX_TEMPERATURE = 2.0


@dataclass(frozen=True)
class CompletionRequest:
    """One sampling request. ``seed_hint`` is the iteration ordinal; it keys
    otherwise-identical prompts to distinct cache entries."""

    prompt: RenderedPrompt
    temperature: float = 1.0
    max_tokens: int = 512
    seed_hint: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.temperature <= MAX_TEMPERATURE):
            raise ValueError(f"temperature must lie in [0, {MAX_TEMPERATURE}]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    backend_id: str
    latency_ms: int = 0
    from_cache: bool = False


def cache_key(request: CompletionRequest, backend_id: str) -> str:
    """Content-addressed digest for a request against one backend."""

    payload = json.dumps(
        {
            "backend": backend_id,
            "prompt": request.prompt.text,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "ordinal": request.seed_hint,
        },
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _digest12(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


class Backend(ABC):
    """Uniform completion contract."""

    backend_id: str

    @abstractmethod
    def complete(self, request: CompletionRequest) -> CompletionResponse:
        """Return model text for one request. Raises backend errors."""


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client with retry and a global
    in-flight cap.

    Transient failures (HTTP 429, 5xx, timeouts, transport errors) retry
    with exponential backoff up to ``max_retries`` extra attempts. 401/403
    fail immediately as :class:`AuthFailure`.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str = "OPENAI_API_KEY",
        api_key: str | None = None,
        max_retries: int = 3,
        timeout_s: float = 60.0,
        concurrency_limit: int = 4,
        max_tokens_ceiling: int = 4096,
        backoff_s: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if api_key is None:
            api_key = os.environ.get(api_key_env, "")
            if not api_key:
                raise AuthFailure(f"environment variable {api_key_env} is not set")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.max_tokens_ceiling = max_tokens_ceiling
        self.backoff_s = backoff_s
        self.backend_id = f"{model}@{self.base_url}"
        self.calls = 0
        self._lock = threading.Lock()
        self._semaphore = threading.BoundedSemaphore(concurrency_limit)
        self._client = httpx.Client(
            timeout=timeout_s,
            headers={"Authorization": f"Bearer {api_key}"},
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if request.max_tokens > self.max_tokens_ceiling:
            raise ValueError(
                f"max_tokens {request.max_tokens} exceeds ceiling "
                f"{self.max_tokens_ceiling}"
            )
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        with self._lock:
            self.calls += 1
        started = time.monotonic()
        last_failure = "no attempt made"
        with self._semaphore:
            for attempt in range(self.max_retries + 1):
                if attempt:
                    time.sleep(self.backoff_s * (2 ** (attempt - 1)))
                try:
                    response = self._client.post(
                        f"{self.base_url}/chat/completions", json=body
                    )
                except httpx.HTTPError as exc:
                    last_failure = f"transport error: {exc}"
                    continue
                if response.status_code in (401, 403):
                    raise AuthFailure(
                        f"backend rejected credentials (HTTP {response.status_code})"
                    )
                if response.status_code == 429 or response.status_code >= 500:
                    last_failure = f"HTTP {response.status_code}"
                    continue
                if response.status_code != 200:
                    raise BackendUnavailable(
                        f"unexpected HTTP {response.status_code}: {response.text[:200]}"
                    )
                text = self._extract_text(response)
                latency_ms = int((time.monotonic() - started) * 1000)
                return CompletionResponse(
                    text=text, backend_id=self.backend_id, latency_ms=latency_ms
                )
        raise BackendUnavailable(
            f"gave up after {self.max_retries + 1} attempts ({last_failure})"
        )

    @staticmethod
    def _extract_text(response: httpx.Response) -> str:
        try:
            payload = response.json()
            choices = payload["choices"]
            message = choices[0]["message"]
            # An upstream empty response stays empty and later parses invalid.
            return message.get("content") or ""
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed completion payload: {exc}") from exc


@dataclass(frozen=True)
class ScriptEntry:
    """One scripted response. ``match`` is a prompt substring, a 0-based call
    ordinal, or None to match any request."""

    response: str
    match: str | int | None = None

    def matches(self, prompt_text: str, ordinal: int) -> bool:
        if self.match is None:
            return True
        if isinstance(self.match, int):
            return self.match == ordinal
        return self.match in prompt_text


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a script file: a JSON array of {"match": ..., "response": ...}."""

    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(payload, list):
        raise ParseError(f"{path}: script file must hold a JSON array")
    entries = []
    for index, record in enumerate(payload):
        if not isinstance(record, dict) or "response" not in record:
            raise ParseError(f"{path}: entry {index} needs a 'response' field")
        match = record.get("match")
        if match is not None and not isinstance(match, (str, int)):
            raise ParseError(f"{path}: entry {index} match must be string or int")
        entries.append(ScriptEntry(response=record["response"], match=match))
    return entries


class ScriptedBackend(Backend):
    """Deterministic replay backend: each request consumes the first
    unconsumed entry whose match rule accepts it.

    Exhaustion is a hard error; a scripted run never silently falls back.
    """

    def __init__(self, entries: Iterable[ScriptEntry], *, backend_id: str | None = None):
        self.entries = list(entries)
        if backend_id is None:
            digest = _digest12(
                json.dumps(
                    [[e.match, e.response] for e in self.entries],
                    ensure_ascii=True,
                    default=str,
                )
            )
            backend_id = f"scripted:{digest}"
        self.backend_id = backend_id
        self.calls = 0
        self.call_log: list[CompletionRequest] = []
        self._consumed = [False] * len(self.entries)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(load_script(path))

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            ordinal = self.calls
            self.calls += 1
            self.call_log.append(request)
            for index, entry in enumerate(self.entries):
                if self._consumed[index]:
                    continue
                if entry.matches(request.prompt.text, ordinal):
                    self._consumed[index] = True
                    return CompletionResponse(
                        text=entry.response, backend_id=self.backend_id
                    )
        preview = request.prompt.text[:80].replace("\n", " ")
        raise ScriptExhausted(f"call {ordinal}: no scripted response for {preview!r}")

    def remaining(self) -> int:
        with self._lock:
            return self._consumed.count(False)


@dataclass(frozen=True)
class FeedbackQuality:
    """Chance that one language's feedback endorses the proposed answer,
    conditioned on whether the answer is actually correct."""

    true_given_correct: float = 0.75
    true_given_wrong: float = 0.30


class SyntheticBackend(Backend):
    """Deterministic simulation of a model with known competence rates.

    Every reply is a pure function of (salt, instance id, call kind,
    iteration), so runs replay bit-identically regardless of call order or
    concurrency. Useful for offline demos and statistical validation.
    """

    STANCE_TRUE = "[stance:true]"
    STANCE_FALSE = "[stance:false]"

    def __init__(
        self,
        instances: Iterable[QAInstance],
        *,
        answer_accuracy: float = 0.6,
        direct_true_given_correct: float = 0.8,
        direct_true_given_wrong: float = 0.35,
        feedback_quality: Mapping[str, FeedbackQuality] | None = None,
        default_feedback_quality: FeedbackQuality = FeedbackQuality(),
        salt: str = "synthetic",
    ) -> None:
        self.by_id = {instance.id: instance for instance in instances}
        self.answer_accuracy = answer_accuracy
        self.direct_true_given_correct = direct_true_given_correct
        self.direct_true_given_wrong = direct_true_given_wrong
        self.feedback_quality = dict(feedback_quality or {})
        self.default_feedback_quality = default_feedback_quality
        self.salt = salt
        fingerprint = json.dumps(
            {
                "salt": salt,
                "answer_accuracy": answer_accuracy,
                "direct": [direct_true_given_correct, direct_true_given_wrong],
                "feedback": {
                    code: [q.true_given_correct, q.true_given_wrong]
                    for code, q in sorted(self.feedback_quality.items())
                },
                "default": [
                    default_feedback_quality.true_given_correct,
                    default_feedback_quality.true_given_wrong,
                ],
            },
            sort_keys=True,
        )
        self.backend_id = f"synthetic:{_digest12(fingerprint)}"
        self.calls = 0
        self.call_log: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def _uniform(self, *parts) -> float:
        tag = "|".join(str(part) for part in (self.salt, *parts))
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") / 2**64

    def answers_correctly(self, instance_id: str) -> bool:
        """Whether this simulated model proposes the gold option for an instance."""

        return self._uniform("propose", instance_id) < self.answer_accuracy

    def proposed_index(self, instance: QAInstance) -> int:
        if self.answers_correctly(instance.id):
            return instance.gold_index
        return (instance.gold_index + 1) % len(instance.options)

    def quality_for(self, language: str) -> FeedbackQuality:
        return self.feedback_quality.get(language, self.default_feedback_quality)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls += 1
            self.call_log.append(request)
        prompt = request.prompt
        instance = self.by_id.get(prompt.question_id)
        if instance is None:
            raise BackendUnavailable(
                f"synthetic backend knows no instance {prompt.question_id!r}"
            )
        text = self._respond(prompt, instance, request.seed_hint or 0)
        return CompletionResponse(text=text, backend_id=self.backend_id)

    def _respond(self, prompt: RenderedPrompt, instance: QAInstance, ordinal: int) -> str:
        stage = prompt.kind.stage
        if stage is Stage.PROPOSE:
            index = self.proposed_index(instance)
            letter = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[index]
            return f"{letter}. {instance.options[index]}"
        correct = self.answers_correctly(instance.id)
        if stage is Stage.DIRECT_REVIEW:
            rate = (
                self.direct_true_given_correct
                if correct
                else self.direct_true_given_wrong
            )
            endorse = self._uniform("direct", instance.id, ordinal) < rate
            return "True." if endorse else "False."
        if stage is Stage.GENERATE_FEEDBACK:
            language = prompt.kind.language
            rate = (
                self.quality_for(language).true_given_correct
                if correct
                else self.quality_for(language).true_given_wrong
            )
            endorse = self._uniform("feedback", instance.id, language, ordinal) < rate
            stance = self.STANCE_TRUE if endorse else self.STANCE_FALSE
            judgement = "supports" if endorse else "disputes"
            return (
                f"A reviewer writing in {language_name(language)} {judgement} the "
                f"proposed answer. {stance}"
            )
        # Decide-from-feedback: follow the stance embedded in the feedback text.
        true_at = prompt.text.rfind(self.STANCE_TRUE)
        false_at = prompt.text.rfind(self.STANCE_FALSE)
        if true_at < 0 and false_at < 0:
            return "No judgement possible."
        return "True" if true_at > false_at else "False"


class CachedBackend(Backend):
    """Persistent cache in front of any backend: one JSON file per cache key.

    Reads are lock-free; writes are serialized and land via write-then-rename
    so crashes never leave partial entries.
    """

    def __init__(self, inner: Backend, cache_dir: str | Path) -> None:
        self.inner = inner
        self.backend_id = inner.backend_id
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path_for(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = cache_key(request, self.inner.backend_id)
        path = self._path_for(key)
        if path.exists():
            payload = json.loads(path.read_text(encoding="utf-8"))
            return CompletionResponse(
                text=payload["response_text"],
                backend_id=self.backend_id,
                latency_ms=payload.get("latency_ms", 0),
                from_cache=True,
            )
        response = self.inner.complete(request)
        payload = {
            "key": key,
            "backend_id": self.inner.backend_id,
            "prompt_text": request.prompt.text,
            "stage": request.prompt.kind.stage.value,
            "question_id": request.prompt.question_id,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "ordinal": request.seed_hint,
            "response_text": response.text,
            "latency_ms": response.latency_ms,
            "timestamp": time.time(),
        }
        with self._write_lock:
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                tmp.write_text(
                    json.dumps(payload, ensure_ascii=False, sort_keys=True),
                    encoding="utf-8",
                )
                tmp.replace(path)
        return response


def cache_stats(cache_dir: str | Path) -> dict:
    """Entry count and total bytes for a cache directory."""

    cache_dir = Path(cache_dir)
    files = sorted(cache_dir.glob("*.json")) if cache_dir.exists() else []
    return {
        "entries": len(files),
        "bytes": sum(f.stat().st_size for f in files),
        "path": str(cache_dir),
    }


def cache_clear(cache_dir: str | Path) -> int:
    """Delete all cache entries; returns how many were removed."""

    cache_dir = Path(cache_dir)
    removed = 0
    if cache_dir.exists():
        for file in cache_dir.glob("*.json"):
            file.unlink()
            removed += 1
    return removed
