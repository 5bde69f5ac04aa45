from __future__ import annotations

import httpx
import pytest

from factdesk.backend import (
    TEMPLATE_SLOTS,
    DefaultPolicy,
    MissingSlot,
    PromptTemplate,
    RemoteBackend,
    RemoteConfig,
    ScriptMiss,
    ScriptedBackend,
    default_template_dir,
    fingerprint,
    load_templates,
)

TOY = PromptTemplate(
    name="toy",
    body="Ticker {company-ticker}, question: {question}",
    required_slots=frozenset({"company-ticker", "question"}),
)

SLOTS = {"company-ticker": "ACME", "question": "up or down?"}


class TestPromptTemplate:
    def test_fill(self):
        assert TOY.fill(SLOTS) == "Ticker ACME, question: up or down?"

    def test_missing_slot_named(self):
        with pytest.raises(MissingSlot, match="company-ticker"):
            TOY.fill({"question": "up?"})

    def test_required_slot_must_appear_in_body(self):
        with pytest.raises(ValueError, match="lacks slots"):
            PromptTemplate(name="bad", body="no slots here", required_slots=frozenset({"x"}))

    def test_extra_slots_allowed(self):
        assert TOY.fill(dict(SLOTS, attempt="1")) == "Ticker ACME, question: up or down?"

    def test_shipped_templates_declare_their_slots(self):
        templates = load_templates(default_template_dir())
        assert set(templates) == set(TEMPLATE_SLOTS)
        for name, template in templates.items():
            for slot in TEMPLATE_SLOTS[name]:
                assert "{" + slot + "}" in template.body

    def test_decision_template_carries_range(self):
        templates = load_templates(default_template_dir())
        filled = templates["decision"].fill(
            {"company-ticker": "ACME", "min-facts": "6", "max-facts": "10", "fact-table": "Fact 1: x"}
        )
        assert "6-10" in filled


class TestFingerprint:
    def test_stable_across_slot_ordering(self):
        a = fingerprint("toy", {"x": "1", "y": "2"})
        b = fingerprint("toy", {"y": "2", "x": "1"})
        assert a == b

    def test_line_endings_normalized(self):
        assert fingerprint("toy", {"x": "a\r\nb"}) == fingerprint("toy", {"x": "a\nb"})
        assert fingerprint("toy", {"x": "a\rb"}) == fingerprint("toy", {"x": "a\nb"})

    def test_distinct_inputs_distinct_fingerprints(self):
        assert fingerprint("toy", {"x": "1"}) != fingerprint("toy", {"x": "2"})
        assert fingerprint("toy", {"x": "1"}) != fingerprint("other", {"x": "1"})

    def test_frozen_value(self):
        # Pinned digest guards against platform or serialization drift.
        assert (
            fingerprint("toy", {"company-ticker": "ACME"})
            == "c1e0b8b7a042eed402ca7e39052d348fb79fc7d6bdfcbb2cf481c20d34c25b74"
        )


class TestScriptedBackend:
    def test_lookup_returns_exact_text(self):
        backend = ScriptedBackend()
        backend.add(TOY, SLOTS, "Decision: Hold\nJustification: calm.")
        assert backend.complete(TOY, SLOTS) == "Decision: Hold\nJustification: calm."

    def test_two_identical_calls_identical_bytes(self):
        backend = ScriptedBackend()
        backend.add(TOY, SLOTS, "same response")
        assert backend.complete(TOY, SLOTS) == backend.complete(TOY, SLOTS)

    def test_miss_raises_by_default(self):
        with pytest.raises(ScriptMiss):
            ScriptedBackend().complete(TOY, SLOTS)

    def test_echo_policy_returns_rendered_prompt(self):
        backend = ScriptedBackend(default_policy=DefaultPolicy.ECHO)
        assert backend.complete(TOY, SLOTS) == TOY.fill(SLOTS)

    def test_missing_slot_checked_before_lookup(self):
        with pytest.raises(MissingSlot):
            ScriptedBackend(default_policy=DefaultPolicy.ECHO).complete(TOY, {})

    def test_script_file_round_trip(self, tmp_path):
        backend = ScriptedBackend()
        backend.add(TOY, SLOTS, "line one\nline two")
        backend.add(TOY, dict(SLOTS, question="other?"), "unicode → ok")
        path = tmp_path / "script.jsonl"
        backend.save(path)
        loaded = ScriptedBackend.from_file(path)
        assert loaded.script == backend.script

    def test_calls_recorded(self):
        backend = ScriptedBackend()
        key = backend.add(TOY, SLOTS, "x")
        backend.complete(TOY, SLOTS)
        assert backend.calls == [key]


def _remote(transport, **overrides) -> RemoteBackend:
    config = RemoteConfig(
        endpoint="https://llm.example/v1/chat/completions",
        model="test-model",
        backoff_base_s=0.01,
        **overrides,
    )
    return RemoteBackend(config, transport=transport, sleep=lambda s: None)


def _ok_response(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


class TestRemoteBackend:
    def test_success(self):
        transport = httpx.MockTransport(lambda request: _ok_response("Decision: Hold"))
        backend = _remote(transport)
        assert backend.complete(TOY, SLOTS) == "Decision: Hold"

    def test_payload_carries_prompt_and_temperature(self):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            import json

            seen.update(json.loads(request.content))
            return _ok_response("ok")

        backend = _remote(httpx.MockTransport(handler), temperature=0.0)
        backend.complete(TOY, SLOTS)
        assert seen["model"] == "test-model"
        assert seen["temperature"] == 0.0
        assert seen["messages"][0]["content"] == TOY.fill(SLOTS)

    def test_retries_transient_then_succeeds(self):
        attempts = []

        def handler(request: httpx.Request) -> httpx.Response:
            attempts.append(1)
            if len(attempts) < 3:
                return httpx.Response(500, text="boom")
            return _ok_response("recovered")

        backend = _remote(httpx.MockTransport(handler), max_attempts=3)
        assert backend.complete(TOY, SLOTS) == "recovered"
        assert len(attempts) == 3

    def test_exhausted_retries_raise(self):
        from factdesk.backend import RemoteError

        transport = httpx.MockTransport(lambda request: httpx.Response(503, text="down"))
        backend = _remote(transport, max_attempts=2)
        with pytest.raises(RemoteError, match="2 attempts"):
            backend.complete(TOY, SLOTS)

    def test_non_transient_error_raises_immediately(self):
        from factdesk.backend import RemoteError

        attempts = []

        def handler(request: httpx.Request) -> httpx.Response:
            attempts.append(1)
            return httpx.Response(400, text="bad request")

        backend = _remote(httpx.MockTransport(handler), max_attempts=3)
        with pytest.raises(RemoteError, match="400"):
            backend.complete(TOY, SLOTS)
        assert len(attempts) == 1

    def test_audit_records_template_and_hash(self, tmp_path):
        backend = _remote(httpx.MockTransport(lambda request: _ok_response("fine")))
        backend.complete(TOY, SLOTS)
        (record,) = backend.audit
        assert record.template == "toy"
        assert record.slot_hash == fingerprint("toy", SLOTS)
        assert record.response_preview == "fine"
        assert record.latency_s >= 0.0
        audit_path = tmp_path / "audit.jsonl"
        backend.write_audit(audit_path)
        assert "slot_hash" in audit_path.read_text()

    def test_api_key_header_from_environment(self, monkeypatch):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["auth"] = request.headers.get("authorization")
            return _ok_response("ok")

        monkeypatch.setenv("LLM_API_KEY", "sekret")
        backend = _remote(httpx.MockTransport(handler))
        backend.complete(TOY, SLOTS)
        assert seen["auth"] == "Bearer sekret"
