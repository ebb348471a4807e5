"""Command-line entry point: run, tune, inspect, convert, cache."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import dataset as ds
from .backend import (
    Backend,
    CachedBackend,
    FeedbackQuality,
    HttpBackend,
    ScriptedBackend,
    SyntheticBackend,
    cache_clear,
    cache_stats,
)
from .core import Decision
from .dataset import LanguageConfig, QAInstance, SplitSpec
from .errors import (
    AbstentionError,
    AuthFailure,
    BackendUnavailable,
    ConfigError,
    ParseError,
    ResultNotFound,
    ScriptExhausted,
)
from .evaluation import (
    TuneCandidate,
    build_report,
    emit_report,
    score,
    tune_related_languages,
)
from .orchestrator import (
    InstanceResult,
    RunConfig,
    Strategy,
    Temperatures,
    load_result,
    run_dataset,
)
from .prompts import DEFAULT_TEMPLATES, TemplateSet

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_NOT_FOUND = 4


def _load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return payload


def _get(config: Mapping, dotted: str, default: Any = None, required: bool = False) -> Any:
    node: Any = config
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            if required:
                raise ConfigError(f"missing config field: {dotted}")
            return default
        node = node[part]
    return node


def _apply_overrides(config: dict, overrides: Mapping[str, Any]) -> dict:
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config field {dotted} collides with a scalar")
        node[parts[-1]] = value
    return config


def _load_templates(config: Mapping) -> TemplateSet:
    section = _get(config, "prompts", {}) or {}
    overrides = {}
    for name in ("propose", "direct_review", "generate_feedback", "decide_from_feedback"):
        path = section.get(name)
        if path is None:
            continue
        file = Path(path)
        if not file.exists():
            raise ConfigError(f"prompts.{name}: template file not found: {path}")
        overrides[name] = file.read_text(encoding="utf-8")
    return DEFAULT_TEMPLATES.with_overrides(**overrides) if overrides else DEFAULT_TEMPLATES


def _related_table(config: Mapping) -> dict | None:
    """Optional user override of the shipped related-language table."""

    path = _get(config, "dataset.related_table")
    if path is None:
        return None
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"dataset.related_table: file not found: {path}")
    try:
        return json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"dataset.related_table: invalid JSON: {exc}") from exc


def _related_languages(config: Mapping, native: str) -> tuple[str, ...]:
    explicit = _get(config, "run.related_languages")
    if explicit is not None:
        if not isinstance(explicit, list) or not explicit:
            raise ConfigError("run.related_languages must be a non-empty list")
        return tuple(explicit)
    group = _get(config, "run.related_group")
    if group is not None:
        return ds.related_languages(native, group, _related_table(config))
    return ()


def _run_config(config: Mapping) -> RunConfig:
    strategy_name = _get(config, "run.strategy", "causal-native")
    try:
        strategy = Strategy(strategy_name)
    except ValueError:
        valid = ", ".join(s.value for s in Strategy)
        raise ConfigError(f"run.strategy: unknown strategy {strategy_name!r} (valid: {valid})")
    native = _get(config, "run.native_language") or _get(
        config, "dataset.language", required=True
    )
    languages = LanguageConfig(native=native, related=_related_languages(config, native))
    temps = _get(config, "run.temperatures", {}) or {}
    tie_break_name = _get(config, "run.tie_break", Decision.ABSTAIN.value)
    try:
        tie_break = Decision(tie_break_name)
    except ValueError:
        raise ConfigError(f"run.tie_break: expected abstain or not-abstain, got {tie_break_name!r}")
    try:
        return RunConfig(
            strategy=strategy,
            languages=languages,
            n_iterations=int(_get(config, "run.n_iterations", 3)),
            temperatures=Temperatures(
                propose=float(temps.get("propose", 0.0)),
                review=float(temps.get("review", 1.0)),
                feedback=float(temps.get("feedback", 1.0)),
                decide=float(temps.get("decide", 1.0)),
            ),
            max_tokens=int(_get(config, "run.max_tokens", 512)),
            concurrency_limit=int(_get(config, "run.concurrency_limit", 4)),
            tie_break=tie_break,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run section: {exc}") from exc


def _load_instances(config: Mapping) -> list[QAInstance]:
    path = _get(config, "dataset.path", required=True)
    language = _get(config, "dataset.language", required=True)
    if not Path(path).exists():
        raise ConfigError(f"dataset.path: file not found: {path}")
    return ds.load(path, language, lenient=bool(_get(config, "dataset.lenient", False)))


def _test_split(config: Mapping, corpus: Sequence[QAInstance]) -> list[QAInstance]:
    test_size = _get(config, "dataset.test_size")
    if test_size is None:
        instances = list(corpus)
    else:
        spec = SplitSpec(
            test_size=int(test_size),
            validation_size=int(_get(config, "dataset.validation_size", 0) or 0),
            seed=int(_get(config, "run.seed", 0)),
        )
        instances, _ = ds.split(corpus, spec)
    limit = _get(config, "dataset.limit")
    if limit is not None:
        instances = instances[: int(limit)]
    return instances


def _validation_split(config: Mapping, corpus: Sequence[QAInstance]) -> list[QAInstance]:
    validation_size = _get(config, "dataset.validation_size")
    if not validation_size:
        raise ConfigError("dataset.validation_size must be set for tuning")
    spec = SplitSpec(
        test_size=int(_get(config, "dataset.test_size", 0) or 0),
        validation_size=int(validation_size),
        seed=int(_get(config, "run.seed", 0)),
    )
    _, validation = ds.split(corpus, spec)
    return validation


def _feedback_quality(section: Mapping | None) -> FeedbackQuality:
    section = section or {}
    return FeedbackQuality(
        true_given_correct=float(section.get("true_given_correct", 0.75)),
        true_given_wrong=float(section.get("true_given_wrong", 0.30)),
    )


def build_backend(config: Mapping, corpus: Sequence[QAInstance]) -> Backend:
    """Construct the configured backend, wrapped in the file cache when a
    cache directory is configured."""

    kind = _get(config, "backend.kind", required=True)
    if kind == "http":
        backend: Backend = HttpBackend(
            base_url=_get(config, "backend.base_url", required=True),
            model=_get(config, "backend.model", required=True),
            api_key_env=_get(config, "backend.api_key_env", "OPENAI_API_KEY"),
            max_retries=int(_get(config, "backend.max_retries", 3)),
            timeout_s=float(_get(config, "backend.timeout_s", 60.0)),
            concurrency_limit=int(_get(config, "backend.concurrency_limit", 4)),
            max_tokens_ceiling=int(_get(config, "backend.max_tokens_ceiling", 4096)),
            backoff_s=float(_get(config, "backend.backoff_s", 1.0)),
        )
    elif kind == "scripted":
        script_path = _get(config, "backend.script_path", required=True)
        if not Path(script_path).exists():
            raise ConfigError(f"backend.script_path: file not found: {script_path}")
        backend = ScriptedBackend.from_file(script_path)
    elif kind == "synthetic":
        quality = {
            code: _feedback_quality(spec)
            for code, spec in (_get(config, "backend.feedback_quality", {}) or {}).items()
        }
        backend = SyntheticBackend(
            corpus,
            answer_accuracy=float(_get(config, "backend.answer_accuracy", 0.6)),
            direct_true_given_correct=float(
                _get(config, "backend.direct_true_given_correct", 0.8)
            ),
            direct_true_given_wrong=float(
                _get(config, "backend.direct_true_given_wrong", 0.35)
            ),
            feedback_quality=quality,
            default_feedback_quality=_feedback_quality(
                _get(config, "backend.default_feedback_quality")
            ),
            salt=str(_get(config, "backend.salt", "synthetic")),
        )
    else:
        raise ConfigError(f"backend.kind: expected http, scripted, or synthetic, got {kind!r}")

    cache_dir = _cache_dir(config)
    if cache_dir is not None:
        backend = CachedBackend(backend, cache_dir)
    return backend


def _cache_dir(config: Mapping) -> Path | None:
    cache_dir = _get(config, "run.cache_dir")
    if cache_dir is not None:
        return Path(cache_dir)
    run_dir = _get(config, "run.run_dir")
    if run_dir is not None:
        return Path(run_dir) / "cache"
    return None


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    _apply_overrides(
        config,
        {
            "run.strategy": args.strategy,
            "run.n_iterations": args.n_iterations,
            "run.run_dir": args.run_dir,
            "run.cache_dir": args.cache_dir,
            "run.seed": args.seed,
            "run.concurrency_limit": args.concurrency,
            "dataset.path": args.dataset_path,
            "dataset.language": args.language,
            "dataset.test_size": args.test_size,
            "dataset.limit": args.limit,
        },
    )
    run_dir = _get(config, "run.run_dir", required=True)
    run_config = _run_config(config)
    templates = _load_templates(config)
    corpus = _load_instances(config)
    instances = _test_split(config, corpus)
    backend = build_backend(config, corpus)

    if not instances:
        print("no instances selected; nothing to do")
        return EXIT_OK

    outcome = run_dataset(
        instances,
        run_config,
        backend,
        run_dir,
        templates=templates,
        snapshot={"config": config, "run_config": run_config.to_dict()},
    )
    if not outcome.results and outcome.failures:
        print(f"run failed: all {len(outcome.failures)} instances errored", file=sys.stderr)
        for failure in outcome.failures[:5]:
            print(f"  {failure.instance_id} [{failure.stage}]: {failure.error}", file=sys.stderr)
        return EXIT_BACKEND

    gold = {instance.id: instance for instance in instances}
    scored = score(outcome.results, gold)
    report = build_report(outcome.results, scored, run_config.strategy.value)
    formats = _get(config, "report.formats", ["json", "csv", "txt"])
    emit_report(report, run_dir, formats)

    print(f"instances: {report.instance_count}  (resumed {outcome.resumed}, ran {outcome.executed})")
    print(f"abstain accuracy: {report.abstain_accuracy:.4f}")
    print(f"overall (per-language mean): {report.overall:.4f}")
    if outcome.failures:
        print(f"failures: {len(outcome.failures)} (see failures.json)", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_tune(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    run_config = _run_config(config)
    templates = _load_templates(config)
    corpus = _load_instances(config)
    validation = _validation_split(config, corpus)
    backend = build_backend(config, corpus)

    configured = _get(config, "tune.candidates")
    table = _related_table(config)
    candidates_by_native: dict[str, list[TuneCandidate]] = {}
    for native in sorted({instance.language for instance in validation}):
        if configured and native in configured:
            candidates_by_native[native] = [
                TuneCandidate(label=str(entry["label"]), languages=tuple(entry["languages"]))
                for entry in configured[native]
            ]
        else:
            candidates_by_native[native] = [
                TuneCandidate(label=f"group{index}", languages=group)
                for index, group in enumerate(ds.candidate_groups(native, table), start=1)
            ]

    choices = tune_related_languages(
        validation,
        candidates_by_native,
        run_config,
        backend,
        holdout_size=int(_get(config, "tune.holdout_size", 100)),
        seed=int(_get(config, "run.seed", 0)),
        templates=templates,
    )

    fragment = {
        "tuned_related_languages": {
            native: choice.to_dict() for native, choice in choices.items()
        }
    }
    output = args.output or _get(config, "tune.output", "tuned_languages.yaml")
    Path(output).write_text(
        yaml.safe_dump(fragment, allow_unicode=True, sort_keys=True), encoding="utf-8"
    )
    for native, choice in choices.items():
        shown = "picked without evaluation" if choice.abstain_accuracy is None else (
            f"abstain accuracy {choice.abstain_accuracy:.4f}"
        )
        print(f"{native}: {choice.label} {list(choice.languages)} ({shown})")
    print(f"wrote {output}")
    return EXIT_OK


def _render_inspect(result: InstanceResult) -> str:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    lines = [
        f"Instance: {result.instance_id}",
        f"Strategy: {result.strategy.value}",
        f"Question: {result.question}",
        "Options:",
        *(
            f"  {letters[index]}. {option}"
            for index, option in enumerate(result.options)
        ),
        f"Proposed Answer: {result.proposed_answer}",
        f"Proposed Option Index: "
        + ("unmatched" if result.proposed_index is None else str(result.proposed_index)),
        "",
        "No Feedback:",
        "  " + ", ".join(
            f"Iterate {s.iteration}: {s.verdict.value.capitalize()}"
            for s in result.no_feedback_set.samples
        ),
        f"  NDE = {result.effects.nde:.4f}",
    ]
    multi = len(result.feedback_sets) > 1
    for language, decisions in result.feedback_sets.items():
        lines.append("")
        lines.append(f"Feedback [{language}] ({ds.language_name(language)}):")
        texts = result.feedback_texts[language]
        for text, sample in zip(texts, decisions.samples):
            lines.append(f"  Feedback {sample.iteration}:")
            for row in text.splitlines() or [""]:
                lines.append(f"    {row}")
        lines.append(
            "  "
            + ", ".join(
                f"Iterate {s.iteration}: {s.verdict.value.capitalize()}"
                for s in decisions.samples
            )
        )
        label = f"TIE[{language}]" if multi else "TIE"
        lines.append(f"  {label} = {result.effects.tie[language]:.4f}")
    tally = result.verdict.vote_tally
    lines += [
        "",
        f"Branch: {result.verdict.branch.value}",
        f"Votes: {tally.true_count} True / {tally.false_count} False / "
        f"{tally.invalid_count} Invalid",
        f"Final decision: {result.verdict.decision.value}",
        f"Requests: {result.request_count} calls "
        f"({result.prompting_rounds} prompting rounds)",
    ]
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace) -> int:
    result = load_result(args.run_dir, args.instance_id)
    print(_render_inspect(result))
    return EXIT_OK


def _convert_mmlu(record: Mapping, line: int) -> dict:
    question = record.get("question")
    options = record.get("choices") or record.get("options")
    answer = record.get("answer", record.get("answer_index"))
    if not isinstance(question, str) or not isinstance(options, list):
        raise ParseError(f"line {line}: need question plus choices/options")
    if isinstance(answer, str):
        answer = answer.strip().upper()
        index = "ABCDEFGHIJKLMNOPQRSTUVWXYZ".find(answer[:1]) if answer else -1
    elif isinstance(answer, int) and not isinstance(answer, bool):
        index = answer
    else:
        index = -1
    if not (0 <= index < len(options)):
        raise ParseError(f"line {line}: answer {answer!r} does not select an option")
    return {"question": question, "options": options, "answer_index": index}


def _convert_hellaswag(record: Mapping, line: int) -> dict:
    context = record.get("ctx") or record.get("context") or record.get("question")
    endings = record.get("endings") or record.get("options")
    label = record.get("label", record.get("answer_index"))
    if not isinstance(context, str) or not isinstance(endings, list):
        raise ParseError(f"line {line}: need ctx plus endings")
    try:
        index = int(label)
    except (TypeError, ValueError):
        raise ParseError(f"line {line}: label {label!r} is not an option index")
    if not (0 <= index < len(endings)):
        raise ParseError(f"line {line}: label {label!r} out of range")
    return {"question": context, "options": endings, "answer_index": index}


_CONVERTERS = {"mmlu": _convert_mmlu, "hellaswag": _convert_hellaswag}


def cmd_convert(args: argparse.Namespace) -> int:
    converter = _CONVERTERS[args.source_format]
    input_path = Path(args.input)
    if not input_path.exists():
        raise ConfigError(f"input file not found: {input_path}")
    rows = 0
    skipped = 0
    output_path = Path(args.output)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with input_path.open("r", encoding="utf-8") as source, output_path.open(
        "w", encoding="utf-8"
    ) as sink:
        for line_number, line in enumerate(source, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ParseError(f"line {line_number}: expected an object")
                converted = converter(record, line_number)
            except (json.JSONDecodeError, ParseError) as exc:
                if args.lenient:
                    skipped += 1
                    print(f"skipping {exc}", file=sys.stderr)
                    continue
                raise ParseError(str(exc)) from exc
            converted["id"] = str(record.get("id", f"{input_path.stem}-{line_number:06d}"))
            sink.write(json.dumps(converted, ensure_ascii=False) + "\n")
            rows += 1
    print(f"wrote {rows} rows to {output_path}" + (f" (skipped {skipped})" if skipped else ""))
    if rows == 0:
        print("warning: no rows converted", file=sys.stderr)
    return EXIT_OK


def cmd_cache(args: argparse.Namespace) -> int:
    if args.cache_dir:
        cache_dir = Path(args.cache_dir)
    else:
        if not args.config:
            raise ConfigError("cache command needs --cache-dir or --config")
        cache_dir = _cache_dir(_load_config(args.config))
        if cache_dir is None:
            raise ConfigError("config defines no cache directory")
    if args.cache_action == "stats":
        stats = cache_stats(cache_dir)
        print(f"cache {stats['path']}: {stats['entries']} entries, {stats['bytes']} bytes")
    else:
        removed = cache_clear(cache_dir)
        print(f"cleared {removed} cache entries from {cache_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causal-abstain",
        description=(
            "Decide when a model should abstain from its answers by weighing "
            "direct self-review against multilingual feedback."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a strategy over a dataset and report")
    run.add_argument("--config", required=True)
    run.add_argument("--strategy", choices=[s.value for s in Strategy])
    run.add_argument("--n-iterations", type=int, dest="n_iterations")
    run.add_argument("--run-dir", dest="run_dir")
    run.add_argument("--cache-dir", dest="cache_dir")
    run.add_argument("--seed", type=int)
    run.add_argument("--concurrency", type=int)
    run.add_argument("--dataset-path", dest="dataset_path")
    run.add_argument("--language")
    run.add_argument("--test-size", type=int, dest="test_size")
    run.add_argument("--limit", type=int)
    run.set_defaults(handler=cmd_run)

    tune = sub.add_parser("tune", help="pick related languages on the validation split")
    tune.add_argument("--config", required=True)
    tune.add_argument("--output")
    tune.set_defaults(handler=cmd_tune)

    inspect = sub.add_parser("inspect", help="print one instance transcript")
    inspect.add_argument("run_dir")
    inspect.add_argument("instance_id")
    inspect.set_defaults(handler=cmd_inspect)

    convert = sub.add_parser("convert", help="convert a published dump to the JSONL schema")
    convert.add_argument("--from", dest="source_format", required=True, choices=sorted(_CONVERTERS))
    convert.add_argument("input")
    convert.add_argument("output")
    convert.add_argument("--lenient", action="store_true")
    convert.set_defaults(handler=cmd_convert)

    cache = sub.add_parser("cache", help="cache statistics or clearing")
    cache.add_argument("cache_action", choices=["stats", "clear"])
    cache.add_argument("--cache-dir")
    cache.add_argument("--config")
    cache.set_defaults(handler=cmd_cache)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendUnavailable, AuthFailure, ScriptExhausted) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ResultNotFound as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except AbstentionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
