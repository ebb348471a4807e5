"""Scoring, reports, branch statistics, and related-language tuning."""

from __future__ import annotations

import csv
import json
import random

import pytest

from causal_abstention import (
    Branch,
    Cell,
    LanguageConfig,
    RunConfig,
    ScoredInstance,
    Strategy,
    SyntheticBackend,
    TuneCandidate,
    abstain_accuracy,
    branch_stats,
    build_report,
    emit_report,
    run_instance,
    score,
    tune_related_languages,
)
from causal_abstention.evaluation import classify, confusion_counts
from causal_abstention.errors import EmptyInput, MissingGold
from conftest import make_corpus


class TestClassify:
    def test_cells(self):
        assert classify(answer_correct=False, abstained=True) is Cell.TP
        assert classify(answer_correct=True, abstained=False) is Cell.TN
        assert classify(answer_correct=True, abstained=True) is Cell.FP
        assert classify(answer_correct=False, abstained=False) is Cell.FN


def run_batch(corpus, config, backend):
    return [run_instance(instance, config, backend) for instance in corpus]


def native_config(**overrides):
    defaults = dict(
        strategy=Strategy.CAUSAL_NATIVE,
        languages=LanguageConfig(native="zh"),
        concurrency_limit=1,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


class TestScore:
    def setup_method(self):
        self.corpus = make_corpus(12)
        self.backend = SyntheticBackend(self.corpus, answer_accuracy=0.5, salt="score")
        self.results = run_batch(self.corpus, native_config(), self.backend)

    def test_cells_follow_definitions(self):
        scored = score(self.results, self.corpus)
        for result, item in zip(self.results, scored):
            gold = next(i for i in self.corpus if i.id == result.instance_id)
            assert item.answer_correct == (result.proposed_index == gold.gold_index)
            assert item.cell is classify(item.answer_correct, item.abstained)

    def test_partition(self):
        scored = score(self.results, self.corpus)
        counts = confusion_counts(scored)
        assert sum(counts.values()) == len(scored)

    def test_missing_gold(self):
        with pytest.raises(MissingGold):
            score(self.results, self.corpus[:3])

    def test_unmatched_proposal_scores_incorrect(self):
        result = self.results[0]
        patched = json.loads(result.to_json())
        patched["proposed_index"] = None
        from causal_abstention import InstanceResult

        unmatched = InstanceResult.from_dict(patched)
        scored = score([unmatched], self.corpus)
        assert scored[0].answer_correct is False


class TestAbstainAccuracy:
    def make_scored(self, tp, tn, fp, fn):
        scored = []
        plan = [(Cell.TP, tp), (Cell.TN, tn), (Cell.FP, fp), (Cell.FN, fn)]
        index = 0
        for cell, count in plan:
            for _ in range(count):
                answer_correct = cell in (Cell.TN, Cell.FP)
                abstained = cell in (Cell.TP, Cell.FP)
                scored.append(
                    ScoredInstance(
                        instance_id=f"s{index}",
                        language="zh",
                        answer_correct=answer_correct,
                        abstained=abstained,
                        cell=cell,
                    )
                )
                index += 1
        return scored

    def test_hand_constructed_cells(self):
        scored = self.make_scored(2, 3, 1, 4)
        assert abstain_accuracy(scored) == 0.5

    def test_all_correct(self):
        scored = self.make_scored(0, 5, 0, 0)
        assert abstain_accuracy(scored) == 1.0

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            abstain_accuracy([])

    def test_permutation_invariant(self):
        scored = self.make_scored(3, 7, 2, 8)
        shuffled = scored[:]
        random.Random(5).shuffle(shuffled)
        assert abstain_accuracy(scored) == abstain_accuracy(shuffled)

    def test_independent_recount(self):
        rng = random.Random(41)
        cells = [rng.choice(list(Cell)) for _ in range(40)]
        scored = []
        for index, cell in enumerate(cells):
            answer_correct = cell in (Cell.TN, Cell.FP)
            abstained = cell in (Cell.TP, Cell.FP)
            scored.append(
                ScoredInstance(f"r{index}", "zh", answer_correct, abstained, cell)
            )
        expected = sum(1 for c in cells if c in (Cell.TP, Cell.TN)) / len(cells)
        assert abstain_accuracy(scored) == expected


class TestBranchStats:
    def test_fractions_and_accuracy(self):
        corpus = make_corpus(20)
        backend = SyntheticBackend(corpus, answer_accuracy=0.5, salt="branches")
        config = RunConfig(
            strategy=Strategy.CAUSAL_MULTI,
            languages=LanguageConfig(native="zh", related=("en", "it")),
            concurrency_limit=1,
        )
        results = run_batch(corpus, config, backend)
        scored = score(results, corpus)
        stats = branch_stats(results, scored)
        assert sum(s.fraction for s in stats.values()) == pytest.approx(1.0, abs=1e-12)
        assert sum(s.count for s in stats.values()) == len(results)
        recount = {}
        for result, item in zip(results, scored):
            branch = result.verdict.branch
            total, good = recount.get(branch, (0, 0))
            recount[branch] = (
                total + 1,
                good + (1 if item.cell in (Cell.TP, Cell.TN) else 0),
            )
        for branch, stat in stats.items():
            total, good = recount.get(branch, (0, 0))
            assert stat.count == total
            if total:
                assert stat.accuracy == pytest.approx(good / total)
            else:
                assert stat.accuracy is None

    def test_all_direct_fraction_one(self):
        corpus = make_corpus(5)
        backend = SyntheticBackend(corpus, salt="direct-only")
        config = native_config(strategy=Strategy.IGNORE_FEEDBACK)
        results = run_batch(corpus, config, backend)
        scored = score(results, corpus)
        stats = branch_stats(results, scored)
        assert stats[Branch.DIRECT_ONLY].fraction == 1.0
        assert stats[Branch.FEEDBACK_AGGREGATED].count == 0

    def test_misalignment_rejected(self):
        corpus = make_corpus(4)
        backend = SyntheticBackend(corpus, salt="misaligned")
        results = run_batch(corpus, native_config(), backend)
        scored = score(results, corpus)
        with pytest.raises(ValueError):
            branch_stats(results, list(reversed(scored)))


class TestReports:
    def build(self, languages=("zh",), count=8):
        results = []
        instances = []
        for language in languages:
            corpus = make_corpus(count, language=language)
            backend = SyntheticBackend(corpus, answer_accuracy=0.5, salt="report")
            config = native_config(languages=LanguageConfig(native=language))
            results.extend(run_batch(corpus, config, backend))
            instances.extend(corpus)
        scored = score(results, instances)
        return build_report(results, scored, "causal-native"), results, scored

    def test_single_language_overall_equals_accuracy(self):
        report, _, scored = self.build()
        assert report.overall == abstain_accuracy(scored)
        assert list(report.per_language) == ["zh"]

    def test_multi_language_overall_is_unweighted_mean(self):
        report, _, _ = self.build(languages=("zh", "it", "bn"))
        mean = sum(b.abstain_accuracy for b in report.per_language.values()) / 3
        assert report.overall == pytest.approx(mean, abs=1e-15)

    def test_emit_formats(self, tmp_path):
        report, _, _ = self.build(languages=("zh", "it"))
        written = emit_report(report, tmp_path)
        names = {path.name for path in written}
        assert names == {"report.json", "report.csv", "report.txt"}

        payload = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert payload == report.to_dict()  # bit-exact reload

        with (tmp_path / "report.csv").open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2  # one row per language
        assert {row["language"] for row in rows} == {"zh", "it"}
        for row in rows:
            breakdown = report.per_language[row["language"]]
            assert float(row["abstain_accuracy"]) == breakdown.abstain_accuracy

        text = (tmp_path / "report.txt").read_text(encoding="utf-8")
        assert "Overall" in text
        assert "causal-native" in text

    def test_single_language_csv_row(self, tmp_path):
        report, _, _ = self.build()
        emit_report(report, tmp_path, formats=("csv",))
        with (tmp_path / "report.csv").open(encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert len(rows) == 2  # header + one data row


class TestTuning:
    def make_setup(self, count=24):
        corpus = make_corpus(count)
        # English feedback is made sharply informative, Italian useless, so
        # the candidate containing English must win.
        from causal_abstention import FeedbackQuality

        backend = SyntheticBackend(
            corpus,
            answer_accuracy=0.5,
            direct_true_given_correct=0.55,
            direct_true_given_wrong=0.45,
            feedback_quality={
                "en": FeedbackQuality(0.95, 0.05),
                "it": FeedbackQuality(0.5, 0.5),
            },
            salt="tuning",
        )
        config = RunConfig(
            strategy=Strategy.CAUSAL_MULTI,
            languages=LanguageConfig(native="zh", related=("en",)),
            concurrency_limit=2,
        )
        return corpus, backend, config

    def test_picks_higher_accuracy_candidate(self):
        corpus, backend, config = self.make_setup()
        candidates = {
            "zh": [
                TuneCandidate(label="useless", languages=("it",)),
                TuneCandidate(label="sharp", languages=("en",)),
            ]
        }
        choices = tune_related_languages(
            corpus, candidates, config, backend, holdout_size=20, seed=3
        )
        assert choices["zh"].label == "sharp"
        assert len(choices["zh"].evaluated) == 2

    def test_tie_breaks_to_first_candidate(self):
        corpus, backend, config = self.make_setup()
        candidates = {
            "zh": [
                TuneCandidate(label="first", languages=("en",)),
                TuneCandidate(label="duplicate", languages=("en",)),
            ]
        }
        choices = tune_related_languages(
            corpus, candidates, config, backend, holdout_size=10, seed=3
        )
        assert choices["zh"].label == "first"

    def test_single_candidate_short_circuits(self):
        corpus, backend, config = self.make_setup()
        candidates = {"zh": [TuneCandidate(label="only", languages=("en", "it"))]}
        choices = tune_related_languages(corpus, candidates, config, backend)
        assert choices["zh"].label == "only"
        assert choices["zh"].abstain_accuracy is None
        assert backend.calls == 0
