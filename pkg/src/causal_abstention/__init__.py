"""Feedback-gated abstention decisions for multilingual question answering.

The core idea: sample a model's direct reviews of its own proposed answer
and its reviews mediated by generated feedback in one or more languages,
estimate Bernoulli decision distributions from each sample set, and compare
the direct effect (shift away from an uninformative baseline) against each
language's mediated effect (shift induced by the feedback). Feedback only
participates in the final abstention vote when it moves the decision more
than the model's own confidence does.
"""

from .core import (
    AbstainVerdict,
    BASELINE,
    Branch,
    CausalEffects,
    Condition,
    Decision,
    DecisionSample,
    DecisionSet,
    LikelihoodDistribution,
    NO_FEEDBACK,
    Verdict,
    VoteTally,
    causal_effects,
    decide_multi,
    decide_native,
    decision_set,
    feedback_in,
    jsd,
    likelihood,
    majority_vote,
    nde,
    tie,
    vote_combined,
    vote_direct_only,
    vote_dominant_languages,
    vote_feedback_only,
)
from .backend import (
    Backend,
    CachedBackend,
    CompletionRequest,
    CompletionResponse,
    FeedbackQuality,
    HttpBackend,
    ScriptEntry,
    ScriptedBackend,
    SyntheticBackend,
    cache_key,
)
from .dataset import (
    LanguageConfig,
    QAInstance,
    ResourceTier,
    SplitSpec,
    candidate_groups,
    language_code,
    language_name,
    load,
    related_languages,
    resource_tier,
    split,
)
from .evaluation import (
    BranchStat,
    Cell,
    EvalReport,
    ScoredInstance,
    TuneCandidate,
    TuneChoice,
    abstain_accuracy,
    branch_stats,
    build_report,
    emit_report,
    score,
    tune_related_languages,
)
from .orchestrator import (
    InstanceResult,
    RunConfig,
    RunOutcome,
    StageError,
    Strategy,
    Temperatures,
    collect_direct,
    collect_feedback,
    load_result,
    load_results,
    propose_answer,
    run_dataset,
    run_instance,
    script_from_result,
)
from .prompts import (
    DEFAULT_TEMPLATES,
    PromptKind,
    RenderedPrompt,
    Stage,
    TemplateSet,
    parse_choice,
    parse_verdict,
    render,
)

__version__ = "0.1.0"
