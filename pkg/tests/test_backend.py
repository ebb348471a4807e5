"""Backends: scripted replay, synthetic simulation, HTTP client, and caching."""

from __future__ import annotations

import json
import threading

import httpx
import pytest

from causal_abstention import (
    CachedBackend,
    CompletionRequest,
    FeedbackQuality,
    HttpBackend,
    PromptKind,
    RenderedPrompt,
    ScriptEntry,
    ScriptedBackend,
    SyntheticBackend,
    cache_key,
)
from causal_abstention.backend import load_script
from causal_abstention.errors import (
    AuthFailure,
    BackendUnavailable,
    ScriptExhausted,
)
from conftest import make_corpus


def request_for(text="hello", ordinal=1, temperature=1.0, question_id="q1", kind=None):
    prompt = RenderedPrompt(
        text=text, kind=kind or PromptKind.direct_review(), question_id=question_id
    )
    return CompletionRequest(
        prompt=prompt, temperature=temperature, max_tokens=64, seed_hint=ordinal
    )


class TestCompletionRequest:
    def test_temperature_bounds(self):
        with pytest.raises(ValueError):
            request_for(temperature=2.5)
        with pytest.raises(ValueError):
            request_for(temperature=-0.1)

    def test_max_tokens_positive(self):
        prompt = RenderedPrompt(text="x", kind=PromptKind.direct_review())
        with pytest.raises(ValueError):
            CompletionRequest(prompt=prompt, max_tokens=0)


class TestCacheKey:
    def test_same_inputs_same_key(self):
        assert cache_key(request_for(), "b") == cache_key(request_for(), "b")

    def test_ordinal_distinguishes(self):
        assert cache_key(request_for(ordinal=1), "b") != cache_key(
            request_for(ordinal=2), "b"
        )

    def test_temperature_distinguishes(self):
        assert cache_key(request_for(temperature=0.7), "b") != cache_key(
            request_for(temperature=1.0), "b"
        )

    def test_backend_distinguishes(self):
        assert cache_key(request_for(), "b1") != cache_key(request_for(), "b2")

    def test_prompt_distinguishes(self):
        assert cache_key(request_for("alpha"), "b") != cache_key(request_for("beta"), "b")


class TestScriptedBackend:
    def test_ordered_consumption(self):
        backend = ScriptedBackend(
            [ScriptEntry(response="one"), ScriptEntry(response="two")]
        )
        assert backend.complete(request_for()).text == "one"
        assert backend.complete(request_for()).text == "two"

    def test_substring_matching(self):
        backend = ScriptedBackend(
            [
                ScriptEntry(response="feedback", match="Feedback should be in English"),
                ScriptEntry(response="review", match="True or False directly"),
            ]
        )
        assert (
            backend.complete(
                request_for("Please review ... True or False directly.")
            ).text
            == "review"
        )
        assert (
            backend.complete(request_for("... Feedback should be in English.")).text
            == "feedback"
        )

    def test_ordinal_matching(self):
        backend = ScriptedBackend(
            [ScriptEntry(response="second", match=1), ScriptEntry(response="first", match=0)]
        )
        assert backend.complete(request_for()).text == "first"
        assert backend.complete(request_for()).text == "second"

    def test_exhaustion_is_hard_error(self):
        backend = ScriptedBackend([ScriptEntry(response="only")])
        backend.complete(request_for())
        with pytest.raises(ScriptExhausted):
            backend.complete(request_for())

    def test_no_match_is_hard_error(self):
        backend = ScriptedBackend([ScriptEntry(response="x", match="never-present")])
        with pytest.raises(ScriptExhausted):
            backend.complete(request_for("something else"))

    def test_call_log_records_requests(self):
        backend = ScriptedBackend([ScriptEntry(response="a"), ScriptEntry(response="b")])
        backend.complete(request_for(ordinal=5))
        backend.complete(request_for(ordinal=6))
        assert backend.calls == 2
        assert [r.seed_hint for r in backend.call_log] == [5, 6]

    def test_load_script_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps(
                [
                    {"match": "alpha", "response": "one"},
                    {"match": 1, "response": "two"},
                    {"response": "three"},
                ]
            ),
            encoding="utf-8",
        )
        entries = load_script(path)
        assert entries[0].match == "alpha"
        assert entries[1].match == 1
        assert entries[2].match is None
        backend = ScriptedBackend(entries)
        assert backend.complete(request_for("contains alpha")).text == "one"

    def test_load_script_rejects_malformed(self, tmp_path):
        from causal_abstention.errors import ParseError

        bad_entry = tmp_path / "bad.json"
        bad_entry.write_text(json.dumps([{"match": "x"}]), encoding="utf-8")
        with pytest.raises(ParseError, match="entry 0"):
            load_script(bad_entry)

        not_array = tmp_path / "scalar.json"
        not_array.write_text(json.dumps({"response": "x"}), encoding="utf-8")
        with pytest.raises(ParseError, match="JSON array"):
            load_script(not_array)


class TestSyntheticBackend:
    def setup_method(self):
        self.corpus = make_corpus(20)
        self.backend = SyntheticBackend(
            self.corpus,
            answer_accuracy=0.5,
            feedback_quality={"en": FeedbackQuality(0.9, 0.1)},
            salt="test-salt",
        )

    def test_propose_is_deterministic_and_parseable(self):
        instance = self.corpus[0]
        request = request_for(
            "propose", ordinal=0, question_id=instance.id, kind=PromptKind.propose()
        )
        first = self.backend.complete(request).text
        second = self.backend.complete(request).text
        assert first == second
        assert first[0] in "ABCD" and first[1:3] == ". "

    def test_proposal_matches_declared_correctness(self):
        for instance in self.corpus:
            index = self.backend.proposed_index(instance)
            correct = self.backend.answers_correctly(instance.id)
            assert (index == instance.gold_index) == correct

    def test_direct_review_is_parseable(self):
        instance = self.corpus[1]
        request = request_for(
            "review", ordinal=2, question_id=instance.id, kind=PromptKind.direct_review()
        )
        assert self.backend.complete(request).text in ("True.", "False.")

    def test_feedback_embeds_stance_and_language(self):
        instance = self.corpus[2]
        request = request_for(
            "feedback",
            ordinal=1,
            question_id=instance.id,
            kind=PromptKind.generate_feedback("en"),
        )
        text = self.backend.complete(request).text
        assert "[stance:" in text
        assert "English" in text

    def test_decide_follows_stance(self):
        decide = PromptKind.decide_from_feedback()
        instance = self.corpus[3]
        yes = request_for(
            "Feedback: looks right [stance:true]", question_id=instance.id, kind=decide
        )
        no = request_for(
            "Feedback: looks wrong [stance:false]", question_id=instance.id, kind=decide
        )
        assert self.backend.complete(yes).text == "True"
        assert self.backend.complete(no).text == "False"

    def test_unknown_instance_rejected(self):
        request = request_for("x", question_id="missing", kind=PromptKind.propose())
        with pytest.raises(BackendUnavailable):
            self.backend.complete(request)

    def test_different_iterations_vary(self):
        instance = self.corpus[4]
        replies = {
            self.backend.complete(
                request_for(
                    "review",
                    ordinal=ordinal,
                    question_id=instance.id,
                    kind=PromptKind.direct_review(),
                )
            ).text
            for ordinal in range(1, 30)
        }
        assert replies == {"True.", "False."}


def http_backend(handler, **kwargs):
    transport = httpx.MockTransport(handler)
    defaults = dict(
        base_url="https://llm.test/v1",
        model="test-model",
        api_key="secret",
        backoff_s=0.0,
        transport=transport,
    )
    defaults.update(kwargs)
    return HttpBackend(**defaults)


def ok_response(text):
    return httpx.Response(
        200, json={"choices": [{"message": {"role": "assistant", "content": text}}]}
    )


class TestHttpBackend:
    def test_success_round_trip(self):
        seen = {}

        def handler(request):
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return ok_response("it works")

        backend = http_backend(handler)
        response = backend.complete(request_for("ping", temperature=0.5))
        assert response.text == "it works"
        assert response.from_cache is False
        assert seen["auth"] == "Bearer secret"
        assert seen["body"]["model"] == "test-model"
        assert seen["body"]["messages"] == [{"role": "user", "content": "ping"}]
        assert seen["body"]["temperature"] == 0.5

    def test_retries_transient_then_succeeds(self):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            if attempts["n"] < 3:
                return httpx.Response(429, json={"error": "slow down"})
            return ok_response("recovered")

        backend = http_backend(handler, max_retries=3)
        assert backend.complete(request_for()).text == "recovered"
        assert attempts["n"] == 3

    def test_exhausted_retries(self):
        def handler(request):
            return httpx.Response(503, json={"error": "down"})

        backend = http_backend(handler, max_retries=2)
        with pytest.raises(BackendUnavailable, match="3 attempts"):
            backend.complete(request_for())

    def test_transport_errors_retry_then_fail(self):
        def handler(request):
            raise httpx.ConnectError("unreachable")

        backend = http_backend(handler, max_retries=1)
        with pytest.raises(BackendUnavailable):
            backend.complete(request_for())

    def test_client_error_fails_without_retry(self):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            return httpx.Response(400, json={"error": "bad request"})

        backend = http_backend(handler, max_retries=5)
        with pytest.raises(BackendUnavailable, match="HTTP 400"):
            backend.complete(request_for())
        assert attempts["n"] == 1

    def test_auth_failure_no_retry(self):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            return httpx.Response(401, json={"error": "bad key"})

        backend = http_backend(handler, max_retries=5)
        with pytest.raises(AuthFailure):
            backend.complete(request_for())
        assert attempts["n"] == 1

    def test_missing_api_key(self, monkeypatch):
        monkeypatch.delenv("TEST_KEY_VAR", raising=False)
        with pytest.raises(AuthFailure):
            HttpBackend("https://llm.test/v1", "m", api_key_env="TEST_KEY_VAR")

    def test_max_tokens_ceiling(self):
        backend = http_backend(lambda request: ok_response("x"), max_tokens_ceiling=32)
        prompt = RenderedPrompt(text="x", kind=PromptKind.direct_review())
        request = CompletionRequest(prompt=prompt, max_tokens=64)
        with pytest.raises(ValueError, match="ceiling"):
            backend.complete(request)

    def test_in_flight_cap_respected(self):
        import time as time_module

        state = {"active": 0, "peak": 0}
        lock = threading.Lock()

        def handler(request):
            with lock:
                state["active"] += 1
                state["peak"] = max(state["peak"], state["active"])
            time_module.sleep(0.02)
            with lock:
                state["active"] -= 1
            return ok_response("ok")

        backend = http_backend(handler, concurrency_limit=2)
        threads = [
            threading.Thread(target=lambda: backend.complete(request_for()))
            for _ in range(8)
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert state["peak"] <= 2

    def test_empty_content_allowed(self):
        def handler(request):
            return httpx.Response(
                200, json={"choices": [{"message": {"role": "assistant", "content": None}}]}
            )

        backend = http_backend(handler)
        assert backend.complete(request_for()).text == ""


class TestCachedBackend:
    def test_round_trip_identical_bytes(self, tmp_path):
        inner = ScriptedBackend([ScriptEntry(response="深入浅出 ünïcode")])
        cached = CachedBackend(inner, tmp_path / "cache")
        first = cached.complete(request_for())
        second = cached.complete(request_for())
        assert first.from_cache is False
        assert second.from_cache is True
        assert second.text == first.text == "深入浅出 ünïcode"
        assert inner.calls == 1

    def test_cache_file_contents(self, tmp_path):
        inner = ScriptedBackend([ScriptEntry(response="cached text")])
        cached = CachedBackend(inner, tmp_path)
        request = request_for("prompt body", ordinal=3, temperature=0.7)
        cached.complete(request)
        key = cache_key(request, inner.backend_id)
        payload = json.loads((tmp_path / f"{key}.json").read_text(encoding="utf-8"))
        assert payload["response_text"] == "cached text"
        assert payload["prompt_text"] == "prompt body"
        assert payload["ordinal"] == 3
        assert payload["temperature"] == 0.7
        assert "timestamp" in payload

    def test_distinct_ordinals_distinct_entries(self, tmp_path):
        inner = ScriptedBackend(
            [ScriptEntry(response="a"), ScriptEntry(response="b")]
        )
        cached = CachedBackend(inner, tmp_path)
        assert cached.complete(request_for(ordinal=1)).text == "a"
        assert cached.complete(request_for(ordinal=2)).text == "b"
        assert cached.complete(request_for(ordinal=1)).text == "a"
        assert len(list(tmp_path.glob("*.json"))) == 2

    def test_failed_requests_not_cached(self, tmp_path):
        def handler(request):
            return httpx.Response(500, json={})

        backend = CachedBackend(http_backend(handler, max_retries=0), tmp_path)
        with pytest.raises(BackendUnavailable):
            backend.complete(request_for())
        assert list(tmp_path.glob("*.json")) == []

    def test_at_most_once_after_flaky_success(self, tmp_path):
        attempts = {"n": 0}

        def handler(request):
            attempts["n"] += 1
            if attempts["n"] == 1:
                return httpx.Response(429, json={})
            return ok_response("finally")

        backend = CachedBackend(http_backend(handler, max_retries=2), tmp_path)
        assert backend.complete(request_for()).text == "finally"
        assert backend.complete(request_for()).from_cache is True
        assert attempts["n"] == 2
        assert len(list(tmp_path.glob("*.json"))) == 1

    def test_concurrent_readers(self, tmp_path):
        inner = ScriptedBackend([ScriptEntry(response="shared")])
        cached = CachedBackend(inner, tmp_path)
        cached.complete(request_for())
        texts = []
        errors = []

        def reader():
            try:
                texts.append(cached.complete(request_for()).text)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=reader) for _ in range(8)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert not errors
        assert texts == ["shared"] * 8
