"""Pure decision mathematics: likelihood estimation, divergences, and abstention rules.

Everything in this module is a deterministic function over immutable values,
safe to call concurrently from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import ConditionMismatch, EmptyEvidence


class Verdict(str, Enum):
    """Tri-state outcome of one model review call."""

    TRUE = "true"
    FALSE = "false"
    INVALID = "invalid"


@dataclass(frozen=True)
class Condition:
    """Sampling condition: plain direct review, or review mediated by feedback.

    ``feedback_language`` is the language code of the mediating feedback, or
    ``None`` for the no-feedback condition.
    """

    feedback_language: str | None = None

    @property
    def has_feedback(self) -> bool:
        return self.feedback_language is not None

    def describe(self) -> str:
        if self.feedback_language is None:
            return "no-feedback"
        return f"feedback[{self.feedback_language}]"


NO_FEEDBACK = Condition()


def feedback_in(language: str) -> Condition:
    return Condition(feedback_language=language)


@dataclass(frozen=True)
class DecisionSample:
    """One true/false/invalid verdict from a single model call.

    ``verdict`` is ``INVALID`` only when parsing failed after the retry
    budget. ``iteration`` is 1-based and bounded by the run's sample count.
    """

    verdict: Verdict
    raw_text: str
    language: str
    iteration: int
    condition: Condition = NO_FEEDBACK

    def __post_init__(self) -> None:
        if self.iteration < 1:
            raise ValueError(f"iteration must be >= 1, got {self.iteration}")


@dataclass(frozen=True)
class DecisionSet:
    """An ordered batch of decision samples drawn under one shared condition."""

    samples: tuple[DecisionSample, ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("a decision set needs at least one sample")
        first = self.samples[0].condition
        for sample in self.samples[1:]:
            if sample.condition != first:
                raise ConditionMismatch(
                    f"mixed conditions in one set: {first.describe()} vs "
                    f"{sample.condition.describe()}"
                )

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def condition(self) -> Condition:
        return self.samples[0].condition

    def valid_samples(self) -> tuple[DecisionSample, ...]:
        return tuple(s for s in self.samples if s.verdict is not Verdict.INVALID)

    def true_count(self) -> int:
        return sum(1 for s in self.samples if s.verdict is Verdict.TRUE)

    def false_count(self) -> int:
        return sum(1 for s in self.samples if s.verdict is Verdict.FALSE)

    def invalid_count(self) -> int:
        return sum(1 for s in self.samples if s.verdict is Verdict.INVALID)


def decision_set(
    verdicts: Iterable[Verdict | bool],
    *,
    language: str = "en",
    condition: Condition = NO_FEEDBACK,
    raw_texts: Sequence[str] | None = None,
) -> DecisionSet:
    """Convenience constructor used heavily by tests and replay tooling.

    Booleans map to TRUE/FALSE; pass ``Verdict.INVALID`` explicitly for
    invalid slots.
    """

    samples = []
    for index, verdict in enumerate(verdicts):
        if isinstance(verdict, bool):
            verdict = Verdict.TRUE if verdict else Verdict.FALSE
        raw = raw_texts[index] if raw_texts is not None else verdict.value
        samples.append(
            DecisionSample(
                verdict=verdict,
                raw_text=raw,
                language=language,
                iteration=index + 1,
                condition=condition,
            )
        )
    return DecisionSet(samples=tuple(samples))


@dataclass(frozen=True)
class LikelihoodDistribution:
    """Bernoulli parameter for the decision variable: P(decision = true)."""

    p_true: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_true <= 1.0) or math.isnan(self.p_true):
            raise ValueError(f"p_true must lie in [0, 1], got {self.p_true}")

    @property
    def p_false(self) -> float:
        return 1.0 - self.p_true


#: Uninformative reference distribution against which direct confidence is measured.
BASELINE = LikelihoodDistribution(p_true=0.5)


def likelihood(decisions: DecisionSet) -> LikelihoodDistribution:
    """Estimate P(decision = true) from a decision set.

    Invalid samples are excluded; the remaining true/false indicator means
    are pushed through a two-way softmax, so even a unanimous set yields a
    probability strictly inside (0, 1).

    Raises:
        EmptyEvidence: every sample in the set is invalid.
    """

    valid = decisions.valid_samples()
    if not valid:
        raise EmptyEvidence(
            f"no valid samples under condition {decisions.condition.describe()}"
        )
    true_count = sum(1 for s in valid if s.verdict is Verdict.TRUE)
    mean_true = true_count / len(valid)
    mean_false = (len(valid) - true_count) / len(valid)
    e_true = math.exp(mean_true)
    e_false = math.exp(mean_false)
    return LikelihoodDistribution(p_true=e_true / (e_true + e_false))


def _kl_bernoulli(p: float, q: float) -> float:
    # 0 * ln(0/x) contributes nothing. q is a pointwise mean including p/2,
    # so q can only hit 0.0 with p > 0 through subnormal underflow, where the
    # true term is at most p * ln 2 < 1e-323: below double resolution, skip.
    total = 0.0
    for a, b in ((p, q), (1.0 - p, 1.0 - q)):
        if a > 0.0 and b > 0.0:
            total += a * math.log(a / b)
    # Mathematically >= 0; guard against cancellation for near-identical inputs.
    return max(total, 0.0)


def jsd(p: LikelihoodDistribution, q: LikelihoodDistribution) -> float:
    """Jensen-Shannon divergence between two Bernoulli distributions, in nats.

    Symmetric, zero iff the distributions coincide, bounded above by ln 2.
    """

    mid = (p.p_true + q.p_true) / 2.0
    return _kl_bernoulli(p.p_true, mid) / 2.0 + _kl_bernoulli(q.p_true, mid) / 2.0


def nde(no_feedback: DecisionSet) -> float:
    """Direct effect: divergence of the no-feedback decision from the baseline.

    Raises:
        ConditionMismatch: the set was sampled under a feedback condition.
        EmptyEvidence: propagated from likelihood estimation.
    """

    if no_feedback.condition.has_feedback:
        raise ConditionMismatch(
            f"nde expects the no-feedback set, got {no_feedback.condition.describe()}"
        )
    return jsd(likelihood(no_feedback), BASELINE)


def tie(feedback: DecisionSet, no_feedback: DecisionSet) -> float:
    """Indirect effect of one language's feedback: how far it shifts the decision.

    Raises:
        ConditionMismatch: the arguments are not (feedback, no-feedback) sets.
        EmptyEvidence: propagated from likelihood estimation.
    """

    if not feedback.condition.has_feedback:
        raise ConditionMismatch("tie expects a feedback-conditioned set first")
    if no_feedback.condition.has_feedback:
        raise ConditionMismatch(
            f"tie expects the no-feedback set second, got "
            f"{no_feedback.condition.describe()}"
        )
    return jsd(likelihood(feedback), likelihood(no_feedback))


@dataclass(frozen=True)
class CausalEffects:
    """Direct and per-language mediated effects for one instance, in nats.

    ``te`` is stored as ``nde + sum(tie.values())`` by construction; use
    :meth:`compose` rather than the raw constructor.
    """

    nde: float
    tie: Mapping[str, float]
    te: float

    @classmethod
    def compose(cls, nde: float, tie: Mapping[str, float]) -> "CausalEffects":
        ordered = dict(tie)
        return cls(nde=nde, tie=ordered, te=nde + sum(ordered.values()))

    def max_tie(self) -> float:
        return max(self.tie.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "nde": self.nde,
            "tie": dict(self.tie),
            "te": self.te,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "CausalEffects":
        return cls(
            nde=payload["nde"],
            tie=dict(payload["tie"]),
            te=payload["te"],
        )


def causal_effects(
    no_feedback: DecisionSet, feedback_sets: Sequence[DecisionSet]
) -> CausalEffects:
    """Compute the full effect decomposition for one instance."""

    by_language = {}
    for feedback_set in feedback_sets:
        language = feedback_set.condition.feedback_language
        if language is None:
            raise ConditionMismatch("feedback sets must carry a feedback condition")
        if language in by_language:
            raise ConditionMismatch(f"duplicate feedback language {language!r}")
        by_language[language] = tie(feedback_set, no_feedback)
    return CausalEffects.compose(nde(no_feedback), by_language)


class Decision(str, Enum):
    ABSTAIN = "abstain"
    NOT_ABSTAIN = "not-abstain"


class Branch(str, Enum):
    """Which evidence pool the final vote was taken over."""

    DIRECT_ONLY = "direct-only"
    FEEDBACK_NATIVE = "feedback-native"
    FEEDBACK_AGGREGATED = "feedback-aggregated"


@dataclass(frozen=True)
class VoteTally:
    true_count: int
    false_count: int
    invalid_count: int

    @property
    def valid(self) -> int:
        return self.true_count + self.false_count

    def to_list(self) -> list[int]:
        return [self.true_count, self.false_count, self.invalid_count]


def tally(samples: Iterable[DecisionSample]) -> VoteTally:
    true_count = false_count = invalid_count = 0
    for sample in samples:
        if sample.verdict is Verdict.TRUE:
            true_count += 1
        elif sample.verdict is Verdict.FALSE:
            false_count += 1
        else:
            invalid_count += 1
    return VoteTally(true_count, false_count, invalid_count)


def majority_vote(
    samples: Iterable[DecisionSample],
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> Decision:
    """Majority vote over valid verdicts: more false reviews means abstain.

    An exact tie resolves to ``tie_break`` (abstaining by default, the safer
    failure mode).

    Raises:
        EmptyEvidence: no valid samples to vote over.
    """

    counts = tally(samples)
    if counts.valid == 0:
        raise EmptyEvidence("majority vote needs at least one valid verdict")
    if counts.true_count > counts.false_count:
        return Decision.NOT_ABSTAIN
    if counts.false_count > counts.true_count:
        return Decision.ABSTAIN
    return tie_break


@dataclass(frozen=True)
class AbstainVerdict:
    """Final abstention decision plus the branch and tally that produced it.

    ``effects`` is attached when the effect comparison participated in the
    decision; pooled ablation votes that never consult it leave it ``None``.
    """

    decision: Decision
    branch: Branch
    vote_tally: VoteTally
    effects: CausalEffects | None = None

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.value,
            "branch": self.branch.value,
            "vote_tally": self.vote_tally.to_list(),
            "effects": self.effects.to_dict() if self.effects is not None else None,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "AbstainVerdict":
        effects = payload.get("effects")
        return cls(
            decision=Decision(payload["decision"]),
            branch=Branch(payload["branch"]),
            vote_tally=VoteTally(*payload["vote_tally"]),
            effects=CausalEffects.from_dict(effects) if effects is not None else None,
        )


def _verdict_from(
    pool: Sequence[DecisionSample],
    branch: Branch,
    effects: CausalEffects | None,
    tie_break: Decision,
) -> AbstainVerdict:
    return AbstainVerdict(
        decision=majority_vote(pool, tie_break=tie_break),
        branch=branch,
        vote_tally=tally(pool),
        effects=effects,
    )


def decide_native(
    no_feedback: DecisionSet,
    feedback: DecisionSet,
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Single-language rule: trust feedback only when it moves the decision
    more than the model's own direct confidence.

    When the direct effect is at least as large as the mediated effect
    (ties included), the vote is taken over the no-feedback reviews;
    otherwise over the feedback-conditioned ones.
    """

    effects = causal_effects(no_feedback, [feedback])
    language = feedback.condition.feedback_language
    if effects.nde >= effects.tie[language]:
        return _verdict_from(no_feedback.samples, Branch.DIRECT_ONLY, effects, tie_break)
    return _verdict_from(feedback.samples, Branch.FEEDBACK_NATIVE, effects, tie_break)


def decide_multi(
    no_feedback: DecisionSet,
    feedback_sets: Sequence[DecisionSet],
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Multi-language rule with aggregated voting.

    If the direct effect dominates every language's mediated effect, the
    feedback is disregarded and the no-feedback reviews vote. If any
    language's feedback shifts the decision harder than the direct effect,
    all feedback verdicts across all languages (including the dominated
    ones) pool into one majority vote.
    """

    if not feedback_sets:
        raise ValueError("decide_multi needs at least one feedback set")
    effects = causal_effects(no_feedback, feedback_sets)
    if all(effects.nde >= value for value in effects.tie.values()):
        return _verdict_from(no_feedback.samples, Branch.DIRECT_ONLY, effects, tie_break)
    pooled = [sample for fs in feedback_sets for sample in fs.samples]
    return _verdict_from(pooled, Branch.FEEDBACK_AGGREGATED, effects, tie_break)


def vote_direct_only(
    no_feedback: DecisionSet,
    *,
    effects: CausalEffects | None = None,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Ablation: ignore feedback entirely and vote the direct reviews."""

    return _verdict_from(no_feedback.samples, Branch.DIRECT_ONLY, effects, tie_break)


def vote_feedback_only(
    feedback_sets: Sequence[DecisionSet],
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Ablation: pool every feedback verdict and vote, skipping the comparison."""

    if not feedback_sets:
        raise ValueError("feedback-only vote needs at least one feedback set")
    pooled = [sample for fs in feedback_sets for sample in fs.samples]
    return _verdict_from(pooled, Branch.FEEDBACK_AGGREGATED, None, tie_break)


def vote_combined(
    no_feedback: DecisionSet,
    feedback_sets: Sequence[DecisionSet],
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Ablation: vote the union of direct and feedback verdicts, no comparison."""

    pooled = list(no_feedback.samples)
    for feedback_set in feedback_sets:
        pooled.extend(feedback_set.samples)
    return _verdict_from(pooled, Branch.FEEDBACK_AGGREGATED, None, tie_break)


def vote_dominant_languages(
    no_feedback: DecisionSet,
    feedback_sets: Sequence[DecisionSet],
    *,
    tie_break: Decision = Decision.ABSTAIN,
) -> AbstainVerdict:
    """Ablation: vote only the languages whose mediated effect beats the
    direct effect, without aggregating across the rest.

    Falls back to the direct vote when no language clears the bar.
    """

    if not feedback_sets:
        raise ValueError("dominant-language vote needs at least one feedback set")
    effects = causal_effects(no_feedback, feedback_sets)
    selected = [
        fs
        for fs in feedback_sets
        if effects.tie[fs.condition.feedback_language] > effects.nde
    ]
    if not selected:
        return _verdict_from(no_feedback.samples, Branch.DIRECT_ONLY, effects, tie_break)
    pooled = [sample for fs in selected for sample in fs.samples]
    return _verdict_from(pooled, Branch.FEEDBACK_AGGREGATED, effects, tie_break)
