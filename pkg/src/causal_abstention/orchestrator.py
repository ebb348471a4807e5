"""Per-instance workflow execution, strategy dispatch, and run persistence."""

from __future__ import annotations

import json
import re
import hashlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .backend import Backend, CompletionRequest, ScriptEntry
from .core import (
    AbstainVerdict,
    CausalEffects,
    Decision,
    DecisionSample,
    DecisionSet,
    NO_FEEDBACK,
    Verdict,
    causal_effects,
    decide_multi,
    decide_native,
    feedback_in,
    vote_combined,
    vote_direct_only,
    vote_dominant_languages,
    vote_feedback_only,
)
from .dataset import LanguageConfig, QAInstance
from .errors import AbstentionError, ConfigError, EmptyEvidence
from .prompts import (
    DEFAULT_TEMPLATES,
    PromptKind,
    TemplateSet,
    parse_choice,
    parse_verdict,
    render,
)


class Strategy(str, Enum):
    """Decision strategies: the two causal rules plus the four pooled-vote
    variants that skip parts of the comparison machinery."""

    CAUSAL_NATIVE = "causal-native"
    CAUSAL_MULTI = "causal-multi"
    IGNORE_FEEDBACK = "ignore-feedback"
    FEEDBACK_ONLY = "feedback-only"
    NO_COMPARISON = "no-comparison"
    NO_AGGREGATION = "no-aggregation"


_MULTI_LANGUAGE_STRATEGIES = frozenset(
    {
        Strategy.CAUSAL_MULTI,
        Strategy.FEEDBACK_ONLY,
        Strategy.NO_COMPARISON,
        Strategy.NO_AGGREGATION,
    }
)


@dataclass(frozen=True)
class Temperatures:
    """Sampling temperatures per call kind. Review/feedback/decide default to
    1.0 so repeated iterations actually diversify; the proposal is greedy."""

    propose: float = 0.0
    review: float = 1.0
    feedback: float = 1.0
    decide: float = 1.0

    def to_dict(self) -> dict:
        return {
            "propose": self.propose,
            "review": self.review,
            "feedback": self.feedback,
            "decide": self.decide,
        }


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy
    languages: LanguageConfig
    n_iterations: int = 3
    temperatures: Temperatures = Temperatures()
    max_tokens: int = 512
    concurrency_limit: int = 4
    tie_break: Decision = Decision.ABSTAIN

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if self.strategy in _MULTI_LANGUAGE_STRATEGIES and not self.languages.related:
            raise ConfigError(
                f"strategy {self.strategy.value} needs at least one related language"
            )

    def feedback_languages(self) -> tuple[str, ...]:
        if self.strategy is Strategy.CAUSAL_NATIVE:
            return (self.languages.native,)
        if self.strategy is Strategy.IGNORE_FEEDBACK:
            return ()
        return tuple(self.languages.related)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "native_language": self.languages.native,
            "related_languages": list(self.languages.related),
            "n_iterations": self.n_iterations,
            "temperatures": self.temperatures.to_dict(),
            "max_tokens": self.max_tokens,
            "concurrency_limit": self.concurrency_limit,
            "tie_break": self.tie_break.value,
        }


@dataclass(frozen=True)
class RetriedCall:
    """A discarded invalid reply that triggered the one-shot re-request."""

    stage: str  # "direct" or "decide"
    language: str
    iteration: int
    raw_text: str

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "language": self.language,
            "iteration": self.iteration,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "RetriedCall":
        return cls(
            stage=payload["stage"],
            language=payload["language"],
            iteration=payload["iteration"],
            raw_text=payload["raw_text"],
        )


def _set_to_dict(decisions: DecisionSet) -> dict:
    return {
        "condition": decisions.condition.feedback_language,
        "samples": [
            {
                "verdict": s.verdict.value,
                "raw_text": s.raw_text,
                "language": s.language,
                "iteration": s.iteration,
            }
            for s in decisions.samples
        ],
    }


def _set_from_dict(payload: Mapping) -> DecisionSet:
    language = payload["condition"]
    condition = NO_FEEDBACK if language is None else feedback_in(language)
    samples = tuple(
        DecisionSample(
            verdict=Verdict(s["verdict"]),
            raw_text=s["raw_text"],
            language=s["language"],
            iteration=s["iteration"],
            condition=condition,
        )
        for s in payload["samples"]
    )
    return DecisionSet(samples=samples)


@dataclass(frozen=True)
class InstanceResult:
    """Complete transcript and outcome of one instance under one strategy."""

    instance_id: str
    language: str
    strategy: Strategy
    question: str
    options: tuple[str, ...]
    proposed_answer: str
    proposed_index: int | None
    no_feedback_set: DecisionSet
    feedback_texts: Mapping[str, tuple[str, ...]]
    feedback_sets: Mapping[str, DecisionSet]
    effects: CausalEffects
    verdict: AbstainVerdict
    request_count: int
    prompting_rounds: int
    retried: tuple[RetriedCall, ...] = ()

    def __post_init__(self) -> None:
        if set(self.feedback_texts) != set(self.feedback_sets):
            raise ValueError("feedback texts and decision sets name different languages")
        for language, texts in self.feedback_texts.items():
            if len(texts) != self.feedback_sets[language].n:
                raise ValueError(f"feedback[{language}]: texts and decisions disagree on N")

    def to_dict(self) -> dict:
        order = list(self.feedback_texts.keys())
        return {
            "instance_id": self.instance_id,
            "language": self.language,
            "strategy": self.strategy.value,
            "question": self.question,
            "options": list(self.options),
            "proposed_answer": self.proposed_answer,
            "proposed_index": self.proposed_index,
            "no_feedback_set": _set_to_dict(self.no_feedback_set),
            "feedback_languages": order,
            "feedback_texts": {k: list(v) for k, v in self.feedback_texts.items()},
            "feedback_sets": {k: _set_to_dict(v) for k, v in self.feedback_sets.items()},
            "effects": self.effects.to_dict(),
            "verdict": self.verdict.to_dict(),
            "request_count": self.request_count,
            "prompting_rounds": self.prompting_rounds,
            "retried": [r.to_dict() for r in self.retried],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "InstanceResult":
        order = payload["feedback_languages"]
        return cls(
            instance_id=payload["instance_id"],
            language=payload["language"],
            strategy=Strategy(payload["strategy"]),
            question=payload["question"],
            options=tuple(payload["options"]),
            proposed_answer=payload["proposed_answer"],
            proposed_index=payload["proposed_index"],
            no_feedback_set=_set_from_dict(payload["no_feedback_set"]),
            feedback_texts={
                lang: tuple(payload["feedback_texts"][lang]) for lang in order
            },
            feedback_sets={
                lang: _set_from_dict(payload["feedback_sets"][lang]) for lang in order
            },
            effects=CausalEffects.from_dict(payload["effects"]),
            verdict=AbstainVerdict.from_dict(payload["verdict"]),
            request_count=payload["request_count"],
            prompting_rounds=payload["prompting_rounds"],
            retried=tuple(RetriedCall.from_dict(r) for r in payload["retried"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, payload: str) -> "InstanceResult":
        return cls.from_dict(json.loads(payload))


class StageError(AbstentionError):
    """A workflow stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def propose_answer(
    instance: QAInstance,
    config: RunConfig,
    backend: Backend,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> tuple[str, int | None]:
    """Elicit the model's answer once, greedily, and parse the chosen option.

    An unparseable reply is kept (index None): the instance still runs and is
    scored as answered incorrectly, so abstaining on it counts as correct.
    """

    prompt = render(
        PromptKind.propose(),
        instance.question,
        instance.options,
        question_id=instance.id,
        question_language=instance.language,
        templates=templates,
    )
    response = backend.complete(
        CompletionRequest(
            prompt=prompt,
            temperature=config.temperatures.propose,
            max_tokens=config.max_tokens,
            seed_hint=0,
        )
    )
    return response.text, parse_choice(response.text, instance.options)


def _sample_with_retry(
    backend: Backend,
    prompt,
    temperature: float,
    max_tokens: int,
    iteration: int,
    n_iterations: int,
    stage: str,
    language: str,
    retried: list[RetriedCall],
) -> tuple[Verdict, str, int]:
    """One verdict sample; an invalid parse earns exactly one fresh request."""

    response = backend.complete(
        CompletionRequest(
            prompt=prompt,
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=iteration,
        )
    )
    verdict = parse_verdict(response.text)
    calls = 1
    if verdict is Verdict.INVALID:
        retried.append(
            RetriedCall(
                stage=stage,
                language=language,
                iteration=iteration,
                raw_text=response.text,
            )
        )
        response = backend.complete(
            CompletionRequest(
                prompt=prompt,
                temperature=temperature,
                max_tokens=max_tokens,
                seed_hint=iteration + n_iterations,
            )
        )
        verdict = parse_verdict(response.text)
        calls = 2
    return verdict, response.text, calls


def collect_direct(
    instance: QAInstance,
    proposed_answer: str,
    config: RunConfig,
    backend: Backend,
    templates: TemplateSet = DEFAULT_TEMPLATES,
    retried: list[RetriedCall] | None = None,
) -> tuple[DecisionSet, int]:
    """N independent direct reviews of the proposed answer.

    Raises:
        EmptyEvidence: every iteration stayed invalid after its retry.
    """

    if retried is None:
        retried = []
    prompt = render(
        PromptKind.direct_review(),
        instance.question,
        instance.options,
        proposed_answer,
        question_id=instance.id,
        templates=templates,
    )
    samples = []
    calls = 0
    for iteration in range(1, config.n_iterations + 1):
        verdict, raw_text, used = _sample_with_retry(
            backend,
            prompt,
            config.temperatures.review,
            config.max_tokens,
            iteration,
            config.n_iterations,
            "direct",
            instance.language,
            retried,
        )
        calls += used
        samples.append(
            DecisionSample(
                verdict=verdict,
                raw_text=raw_text,
                language=instance.language,
                iteration=iteration,
                condition=NO_FEEDBACK,
            )
        )
    decisions = DecisionSet(samples=tuple(samples))
    if not decisions.valid_samples():
        raise EmptyEvidence(
            f"instance {instance.id}: all {config.n_iterations} direct reviews invalid"
        )
    return decisions, calls


def collect_feedback(
    instance: QAInstance,
    proposed_answer: str,
    language: str,
    config: RunConfig,
    backend: Backend,
    templates: TemplateSet = DEFAULT_TEMPLATES,
    retried: list[RetriedCall] | None = None,
) -> tuple[tuple[str, ...], DecisionSet, int]:
    """N feedback paragraphs in ``language``, each followed by the decision it
    mediates. Decision j is conditioned on feedback j alone.

    Raises:
        EmptyEvidence: every mediated decision stayed invalid after its retry.
    """

    if retried is None:
        retried = []
    condition = feedback_in(language)
    texts: list[str] = []
    samples = []
    calls = 0
    for iteration in range(1, config.n_iterations + 1):
        feedback_prompt = render(
            PromptKind.generate_feedback(language),
            instance.question,
            instance.options,
            proposed_answer,
            question_id=instance.id,
            templates=templates,
        )
        feedback_response = backend.complete(
            CompletionRequest(
                prompt=feedback_prompt,
                temperature=config.temperatures.feedback,
                max_tokens=config.max_tokens,
                seed_hint=iteration,
            )
        )
        calls += 1
        texts.append(feedback_response.text)

        decide_prompt = render(
            PromptKind.decide_from_feedback(),
            instance.question,
            instance.options,
            proposed_answer,
            feedback=feedback_response.text,
            question_id=instance.id,
            templates=templates,
        )
        verdict, raw_text, used = _sample_with_retry(
            backend,
            decide_prompt,
            config.temperatures.decide,
            config.max_tokens,
            iteration,
            config.n_iterations,
            "decide",
            language,
            retried,
        )
        calls += used
        samples.append(
            DecisionSample(
                verdict=verdict,
                raw_text=raw_text,
                language=language,
                iteration=iteration,
                condition=condition,
            )
        )
    decisions = DecisionSet(samples=tuple(samples))
    if not decisions.valid_samples():
        raise EmptyEvidence(
            f"instance {instance.id}: all feedback-mediated decisions in "
            f"{language} invalid"
        )
    return tuple(texts), decisions, calls


def _decide(
    config: RunConfig,
    no_feedback: DecisionSet,
    feedback_sets: Mapping[str, DecisionSet],
) -> tuple[AbstainVerdict, CausalEffects]:
    ordered = list(feedback_sets.values())
    strategy = config.strategy
    if strategy is Strategy.CAUSAL_NATIVE:
        verdict = decide_native(
            no_feedback, feedback_sets[config.languages.native], tie_break=config.tie_break
        )
        return verdict, verdict.effects
    if strategy is Strategy.CAUSAL_MULTI:
        verdict = decide_multi(no_feedback, ordered, tie_break=config.tie_break)
        return verdict, verdict.effects
    effects = causal_effects(no_feedback, ordered)
    if strategy is Strategy.IGNORE_FEEDBACK:
        return (
            vote_direct_only(no_feedback, effects=effects, tie_break=config.tie_break),
            effects,
        )
    if strategy is Strategy.FEEDBACK_ONLY:
        return vote_feedback_only(ordered, tie_break=config.tie_break), effects
    if strategy is Strategy.NO_COMPARISON:
        return vote_combined(no_feedback, ordered, tie_break=config.tie_break), effects
    return (
        vote_dominant_languages(no_feedback, ordered, tie_break=config.tie_break),
        effects,
    )


def run_instance(
    instance: QAInstance,
    config: RunConfig,
    backend: Backend,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> InstanceResult:
    """Execute the full workflow for one instance: propose, review directly,
    collect per-language feedback, compare effects, and vote."""

    retried: list[RetriedCall] = []
    try:
        proposed_answer, proposed_index = propose_answer(
            instance, config, backend, templates
        )
    except AbstentionError as exc:
        raise StageError("propose", exc) from exc

    try:
        no_feedback_set, direct_calls = collect_direct(
            instance, proposed_answer, config, backend, templates, retried
        )
    except AbstentionError as exc:
        raise StageError("direct-review", exc) from exc

    feedback_texts: dict[str, tuple[str, ...]] = {}
    feedback_sets: dict[str, DecisionSet] = {}
    feedback_calls = 0
    for language in config.feedback_languages():
        try:
            texts, decisions, calls = collect_feedback(
                instance, proposed_answer, language, config, backend, templates, retried
            )
        except AbstentionError as exc:
            raise StageError(f"feedback[{language}]", exc) from exc
        feedback_texts[language] = texts
        feedback_sets[language] = decisions
        feedback_calls += calls

    try:
        verdict, effects = _decide(config, no_feedback_set, feedback_sets)
    except AbstentionError as exc:
        raise StageError("decide", exc) from exc

    return InstanceResult(
        instance_id=instance.id,
        language=instance.language,
        strategy=config.strategy,
        question=instance.question,
        options=instance.options,
        proposed_answer=proposed_answer,
        proposed_index=proposed_index,
        no_feedback_set=no_feedback_set,
        feedback_texts=feedback_texts,
        feedback_sets=feedback_sets,
        effects=effects,
        verdict=verdict,
        request_count=1 + direct_calls + feedback_calls,
        prompting_rounds=1 + config.n_iterations * len(feedback_sets),
        retried=tuple(retried),
    )


def script_from_result(result: InstanceResult) -> list[ScriptEntry]:
    """Rebuild an ordered replay script from a persisted transcript.

    Feeding it to a scripted backend and re-running the instance reproduces
    the identical verdict set, retries included.
    """

    retried_at = {(r.stage, r.language, r.iteration): r.raw_text for r in result.retried}
    entries = [ScriptEntry(response=result.proposed_answer)]
    for sample in result.no_feedback_set.samples:
        discarded = retried_at.get(("direct", sample.language, sample.iteration))
        if discarded is not None:
            entries.append(ScriptEntry(response=discarded))
        entries.append(ScriptEntry(response=sample.raw_text))
    for language, texts in result.feedback_texts.items():
        decisions = result.feedback_sets[language].samples
        for text, sample in zip(texts, decisions):
            entries.append(ScriptEntry(response=text))
            discarded = retried_at.get(("decide", language, sample.iteration))
            if discarded is not None:
                entries.append(ScriptEntry(response=discarded))
            entries.append(ScriptEntry(response=sample.raw_text))
    return entries


@dataclass(frozen=True)
class InstanceFailure:
    instance_id: str
    stage: str
    error: str

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "stage": self.stage, "error": self.error}


@dataclass
class RunOutcome:
    results: list[InstanceResult]
    failures: list[InstanceFailure]
    executed: int
    resumed: int

    @property
    def ok(self) -> bool:
        return not self.failures


_SAFE_ID = re.compile(r"[A-Za-z0-9._-]{1,120}")


def result_filename(instance_id: str) -> str:
    if _SAFE_ID.fullmatch(instance_id):
        return f"{instance_id}.json"
    slug = re.sub(r"[^A-Za-z0-9._-]", "_", instance_id)[:40]
    digest = hashlib.sha256(instance_id.encode("utf-8")).hexdigest()[:16]
    return f"{slug}-{digest}.json"


def run_dataset(
    instances: Sequence[QAInstance],
    config: RunConfig,
    backend: Backend,
    run_dir: str | Path,
    templates: TemplateSet = DEFAULT_TEMPLATES,
    snapshot: Mapping | None = None,
) -> RunOutcome:
    """Process a batch with bounded concurrency, streaming each result to
    ``run_dir/results/`` as it completes.

    Already-persisted instances are loaded instead of re-run, so an
    interrupted run resumes without re-issuing backend calls. Failures are
    collected per instance (never partially persisted) and written to
    ``run_dir/failures.json``.
    """

    ids = [instance.id for instance in instances]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate instance ids in the batch")

    run_dir = Path(run_dir)
    results_dir = run_dir / "results"
    results_dir.mkdir(parents=True, exist_ok=True)
    run_file = run_dir / "run.json"
    if not run_file.exists():
        payload = dict(snapshot) if snapshot is not None else {"config": config.to_dict()}
        run_file.write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    completed: dict[str, InstanceResult] = {}
    pending: list[QAInstance] = []
    for instance in instances:
        path = results_dir / result_filename(instance.id)
        if path.exists():
            completed[instance.id] = InstanceResult.from_json(
                path.read_text(encoding="utf-8")
            )
        else:
            pending.append(instance)
    resumed = len(completed)

    failures: list[InstanceFailure] = []
    if pending:
        with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
            futures = {
                pool.submit(run_instance, instance, config, backend, templates): instance
                for instance in pending
            }
            for future in as_completed(futures):
                instance = futures[future]
                try:
                    result = future.result()
                except StageError as exc:
                    failures.append(
                        InstanceFailure(instance.id, exc.stage, str(exc.cause))
                    )
                    continue
                except Exception as exc:  # backend/infra errors outside a stage
                    failures.append(InstanceFailure(instance.id, "run", str(exc)))
                    continue
                path = results_dir / result_filename(instance.id)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(result.to_json(), encoding="utf-8")
                tmp.replace(path)
                completed[instance.id] = result

    failures.sort(key=lambda f: f.instance_id)
    (run_dir / "failures.json").write_text(
        json.dumps([f.to_dict() for f in failures], ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    ordered = [completed[i] for i in ids if i in completed]
    return RunOutcome(
        results=ordered,
        failures=failures,
        executed=len(pending) - len(failures),
        resumed=resumed,
    )


def load_result(run_dir: str | Path, instance_id: str) -> InstanceResult:
    """Load one persisted result; raises ResultNotFound when absent."""

    from .errors import ResultNotFound

    path = Path(run_dir) / "results" / result_filename(instance_id)
    if not path.exists():
        raise ResultNotFound(f"no result for {instance_id!r} under {run_dir}")
    return InstanceResult.from_json(path.read_text(encoding="utf-8"))


def load_results(run_dir: str | Path) -> list[InstanceResult]:
    """Load every persisted result in a run directory, sorted by instance id."""

    results_dir = Path(run_dir) / "results"
    results = [
        InstanceResult.from_json(path.read_text(encoding="utf-8"))
        for path in sorted(results_dir.glob("*.json"))
    ]
    results.sort(key=lambda r: r.instance_id)
    return results
