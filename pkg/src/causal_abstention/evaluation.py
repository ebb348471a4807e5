"""Scoring, reports, and related-language tuning on a validation split."""

from __future__ import annotations

import csv
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .backend import Backend
from .core import Branch, Decision
from .dataset import LanguageConfig, QAInstance
from .errors import ConfigError, EmptyInput, MissingGold
from .orchestrator import InstanceResult, RunConfig, Strategy, run_instance
from .prompts import DEFAULT_TEMPLATES, TemplateSet


class Cell(str, Enum):
    """Confusion cell with abstention as the positive class."""

    TP = "tp"  # abstained on a wrong answer
    TN = "tn"  # answered with a correct answer
    FP = "fp"  # abstained although the answer was correct
    FN = "fn"  # answered although the answer was wrong


def classify(answer_correct: bool, abstained: bool) -> Cell:
    if abstained:
        return Cell.FP if answer_correct else Cell.TP
    return Cell.TN if answer_correct else Cell.FN


@dataclass(frozen=True)
class ScoredInstance:
    instance_id: str
    language: str
    answer_correct: bool
    abstained: bool
    cell: Cell


def score(
    results: Sequence[InstanceResult],
    gold: Mapping[str, QAInstance] | Sequence[QAInstance],
) -> list[ScoredInstance]:
    """Score each result against its gold label.

    An unmatched proposal counts as an incorrect answer, so abstaining on it
    is a correct abstention decision.

    Raises:
        MissingGold: a result's instance id has no gold entry.
    """

    if not isinstance(gold, Mapping):
        gold = {instance.id: instance for instance in gold}
    scored = []
    for result in results:
        if result.instance_id not in gold:
            raise MissingGold(result.instance_id)
        instance = gold[result.instance_id]
        answer_correct = result.proposed_index == instance.gold_index
        abstained = result.verdict.decision is Decision.ABSTAIN
        scored.append(
            ScoredInstance(
                instance_id=result.instance_id,
                language=result.language,
                answer_correct=answer_correct,
                abstained=abstained,
                cell=classify(answer_correct, abstained),
            )
        )
    return scored


def confusion_counts(scored: Sequence[ScoredInstance]) -> dict[Cell, int]:
    counts = {cell: 0 for cell in Cell}
    for item in scored:
        counts[item.cell] += 1
    return counts


def abstain_accuracy(scored: Sequence[ScoredInstance]) -> float:
    """Share of abstention decisions that match answer correctness.

    Raises:
        EmptyInput: nothing to score.
    """

    if not scored:
        raise EmptyInput("abstain accuracy over an empty result set")
    counts = confusion_counts(scored)
    return (counts[Cell.TP] + counts[Cell.TN]) / len(scored)


@dataclass(frozen=True)
class BranchStat:
    count: int
    fraction: float
    accuracy: float | None  # None when no instance took the branch

    def to_dict(self) -> dict:
        return {"count": self.count, "fraction": self.fraction, "accuracy": self.accuracy}


def branch_stats(
    results: Sequence[InstanceResult], scored: Sequence[ScoredInstance]
) -> dict[Branch, BranchStat]:
    """Per-branch share of instances and decision accuracy within the branch."""

    if len(results) != len(scored):
        raise ValueError("results and scored sequences are misaligned")
    totals = {branch: 0 for branch in Branch}
    correct = {branch: 0 for branch in Branch}
    for result, item in zip(results, scored):
        if result.instance_id != item.instance_id:
            raise ValueError("results and scored sequences are misaligned")
        branch = result.verdict.branch
        totals[branch] += 1
        if item.cell in (Cell.TP, Cell.TN):
            correct[branch] += 1
    grand_total = len(results)
    stats = {}
    for branch in Branch:
        count = totals[branch]
        stats[branch] = BranchStat(
            count=count,
            fraction=count / grand_total if grand_total else 0.0,
            accuracy=correct[branch] / count if count else None,
        )
    return stats


@dataclass(frozen=True)
class LanguageBreakdown:
    count: int
    abstain_accuracy: float
    confusion: dict

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "abstain_accuracy": self.abstain_accuracy,
            "confusion": dict(self.confusion),
        }


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics for one strategy run.

    ``abstain_accuracy`` pools every instance; ``overall`` is the unweighted
    mean of the per-language accuracies, which is what a cross-language
    summary column reports.
    """

    strategy: str
    instance_count: int
    abstain_accuracy: float
    overall: float
    per_language: Mapping[str, LanguageBreakdown]
    branch_stats: Mapping[Branch, BranchStat]
    confusion: Mapping[Cell, int]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "instance_count": self.instance_count,
            "abstain_accuracy": self.abstain_accuracy,
            "overall": self.overall,
            "per_language": {
                lang: breakdown.to_dict() for lang, breakdown in self.per_language.items()
            },
            "branch_stats": {
                branch.value: stat.to_dict() for branch, stat in self.branch_stats.items()
            },
            "confusion": {cell.value: count for cell, count in self.confusion.items()},
        }


def build_report(
    results: Sequence[InstanceResult],
    scored: Sequence[ScoredInstance],
    strategy: str,
) -> EvalReport:
    if not scored:
        raise EmptyInput("cannot report on an empty run")
    per_language: dict[str, LanguageBreakdown] = {}
    for language in sorted({item.language for item in scored}):
        subset = [item for item in scored if item.language == language]
        per_language[language] = LanguageBreakdown(
            count=len(subset),
            abstain_accuracy=abstain_accuracy(subset),
            confusion={cell.value: count for cell, count in confusion_counts(subset).items()},
        )
    overall = sum(b.abstain_accuracy for b in per_language.values()) / len(per_language)
    return EvalReport(
        strategy=strategy,
        instance_count=len(scored),
        abstain_accuracy=abstain_accuracy(scored),
        overall=overall,
        per_language=per_language,
        branch_stats=branch_stats(results, scored),
        confusion=confusion_counts(scored),
    )


def _report_txt(report: EvalReport) -> str:
    languages = list(report.per_language.keys())
    header = ["Method"] + languages + ["Overall"]
    row = [report.strategy]
    row += [f"{report.per_language[lang].abstain_accuracy:.3f}" for lang in languages]
    row += [f"{report.overall:.3f}"]
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join(v.ljust(w) for v, w in zip(row, widths)),
        "",
        f"Instances: {report.instance_count}",
        "Confusion: "
        + "  ".join(f"{cell.value.upper()}={report.confusion[cell]}" for cell in Cell),
        "Branches:",
    ]
    for branch, stat in report.branch_stats.items():
        accuracy = "n/a" if stat.accuracy is None else f"{stat.accuracy:.3f}"
        lines.append(
            f"  {branch.value:<20} count={stat.count:<6} "
            f"fraction={stat.fraction:.3f}  accuracy={accuracy}"
        )
    return "\n".join(lines) + "\n"


def emit_report(
    report: EvalReport,
    out_dir: str | Path,
    formats: Sequence[str] = ("json", "csv", "txt"),
) -> list[Path]:
    """Write the report as machine-readable JSON, per-language CSV rows, and
    a plain-text summary table. Returns the written paths."""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out_dir / f"report.{fmt}"
        if fmt == "json":
            path.write_text(
                json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)
                + "\n",
                encoding="utf-8",
            )
        elif fmt == "csv":
            with path.open("w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(
                    ["strategy", "language", "instances", "abstain_accuracy",
                     "tp", "tn", "fp", "fn"]
                )
                for language, breakdown in report.per_language.items():
                    writer.writerow(
                        [
                            report.strategy,
                            language,
                            breakdown.count,
                            repr(breakdown.abstain_accuracy),
                            breakdown.confusion["tp"],
                            breakdown.confusion["tn"],
                            breakdown.confusion["fp"],
                            breakdown.confusion["fn"],
                        ]
                    )
        elif fmt == "txt":
            path.write_text(_report_txt(report), encoding="utf-8")
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


@dataclass(frozen=True)
class TuneCandidate:
    """One related-language setting to try: a label plus the language codes."""

    label: str
    languages: tuple[str, ...]


@dataclass(frozen=True)
class TuneChoice:
    label: str
    languages: tuple[str, ...]
    abstain_accuracy: float | None  # None when chosen without evaluation
    evaluated: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "languages": list(self.languages),
            "abstain_accuracy": self.abstain_accuracy,
            "evaluated": [[label, acc] for label, acc in self.evaluated],
        }


def _run_batch(
    instances: Sequence[QAInstance],
    config: RunConfig,
    backend: Backend,
    templates: TemplateSet,
) -> list[InstanceResult]:
    with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
        return list(
            pool.map(lambda inst: run_instance(inst, config, backend, templates), instances)
        )


def tune_related_languages(
    validation_instances: Sequence[QAInstance],
    candidates_by_native: Mapping[str, Sequence[TuneCandidate]],
    config: RunConfig,
    backend: Backend,
    *,
    holdout_size: int = 100,
    seed: int = 0,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> dict[str, TuneChoice]:
    """Pick the best related-language setting per native language by abstain
    accuracy on a held-out slice of the validation split.

    A single candidate is chosen outright without spending any model calls.
    Ties break toward the earlier candidate.
    """

    by_language: dict[str, list[QAInstance]] = {}
    for instance in validation_instances:
        by_language.setdefault(instance.language, []).append(instance)

    choices: dict[str, TuneChoice] = {}
    for native, instances in sorted(by_language.items()):
        candidates = list(candidates_by_native.get(native, ()))
        if not candidates:
            raise ConfigError(f"no related-language candidates for {native!r}")
        if len(candidates) == 1:
            only = candidates[0]
            choices[native] = TuneChoice(
                label=only.label,
                languages=only.languages,
                abstain_accuracy=None,
                evaluated=(),
            )
            continue
        holdout = instances
        if len(instances) > holdout_size:
            holdout = random.Random(seed).sample(instances, holdout_size)
        gold = {instance.id: instance for instance in holdout}
        evaluated: list[tuple[str, float]] = []
        best: tuple[float, int] | None = None
        for index, candidate in enumerate(candidates):
            candidate_config = replace(
                config,
                strategy=Strategy.CAUSAL_MULTI,
                languages=LanguageConfig(native=native, related=candidate.languages),
            )
            results = _run_batch(holdout, candidate_config, backend, templates)
            accuracy = abstain_accuracy(score(results, gold))
            evaluated.append((candidate.label, accuracy))
            if best is None or accuracy > best[0]:
                best = (accuracy, index)
        chosen = candidates[best[1]]
        choices[native] = TuneChoice(
            label=chosen.label,
            languages=chosen.languages,
            abstain_accuracy=best[0],
            evaluated=tuple(evaluated),
        )
    return choices
