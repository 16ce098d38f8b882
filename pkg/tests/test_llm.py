import json
import threading

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from kgrag.llm import (
    HttpLLM,
    LlmRequest,
    Matcher,
    ProviderMapping,
    ScriptEntry,
    ScriptError,
    ScriptedLLM,
    UnscriptedPromptError,
    complete,
)
from kgrag.models import TransportError

CANNED = "<entities>\nStan Kasten\n</entities>\n<paths>\n</paths>\n<opencypher>\n</opencypher>\n<answers>\n</answers>"


def test_request_rejects_empty_prompt():
    with pytest.raises(ValueError):
        LlmRequest("")
    assert LlmRequest("hi").temperature == 0.0


def test_substring_entry_returns_canned_response_verbatim():
    llm = ScriptedLLM([ScriptEntry(Matcher.SUBSTRING, "Stan Kasten", CANNED)])
    prompt = "Task: Entity Extraction\nQuestion: Which team does Stan Kasten lead?"
    assert complete(LlmRequest(prompt), llm) == CANNED


def test_unscripted_prompt_names_first_80_chars():
    llm = ScriptedLLM([ScriptEntry(Matcher.EXACT, "known", "x")])
    prompt = "A" * 100
    with pytest.raises(UnscriptedPromptError) as info:
        llm.complete(prompt)
    assert repr("A" * 80) in str(info.value)
    assert repr("A" * 81) not in str(info.value)


@pytest.mark.parametrize("a,b", [
    (("substring", "Stan"), ("substring", "Stan Kasten")),
    (("exact", "hello world"), ("substring", "world")),
    (("pattern", "wor.d"), ("exact", "hello world")),
    (("pattern", "x+"), ("pattern", "x+")),
])
def test_conflicting_entries_rejected_at_load(a, b):
    data = [{"match": a[0], "text": a[1], "response": "1"}, {"match": b[0], "text": b[1], "response": "2"}]
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data(data)


def test_ambiguous_patterns_surface_at_call_time():
    llm = ScriptedLLM.from_data([{"match": "pattern", "text": "^a", "response": "1"},
                                 {"match": "pattern", "text": "b$", "response": "2"}])
    with pytest.raises(ScriptError):
        llm.complete("ab")
    assert llm.complete("ax") == "1"


def test_max_uses_exhausts_entry():
    llm = ScriptedLLM.from_data({"entries": [{"text": "q", "response": "r", "max_uses": 1}]})
    assert llm.complete("q") == "r"
    with pytest.raises(UnscriptedPromptError):
        llm.complete("q")


def test_bad_script_shapes():
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data("nope")
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data([{"text": "x"}])
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data([{"text": "", "response": "y"}])
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data([{"match": "glob", "text": "x", "response": "y"}])
    with pytest.raises(ScriptError):
        ScriptedLLM.from_data([{"match": "pattern", "text": "(", "response": "y"}])


def test_fixture_scripts_load(fixtures_dir):
    for name in ("cwq_script.yaml", "jamaica_script.yaml", "northwind_script.yaml"):
        assert ScriptedLLM.from_file(fixtures_dir / name).entries


def test_call_log_records_every_call_once():
    llm = ScriptedLLM([ScriptEntry(Matcher.SUBSTRING, "ok", "fine")])
    llm.complete("ok 1")
    with pytest.raises(UnscriptedPromptError):
        llm.complete("nope")
    llm.complete(LlmRequest("ok é"))
    assert [r.index for r in llm.call_log] == [0, 1, 2]
    assert [r.ok for r in llm.call_log] == [True, False, True]
    assert llm.call_log[2].prompt_bytes == len("ok é".encode("utf-8"))
    assert llm.call_log[2].response_bytes == 4
    assert all(r.started <= r.finished for r in llm.call_log)


def test_call_log_is_complete_under_threads():
    llm = ScriptedLLM([ScriptEntry(Matcher.SUBSTRING, "q", "a")])
    threads = [threading.Thread(target=lambda: [llm.complete("q") for _ in range(50)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(r.index for r in llm.call_log) == list(range(400))


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=200))
def test_scripted_backend_is_pure(prompt):
    llm = ScriptedLLM([ScriptEntry(Matcher.PATTERN, r"[\s\S]*", "same")])
    assert llm.complete(prompt) == llm.complete(prompt) == "same"


def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_backend_returns_first_message_and_sends_auth(monkeypatch):
    monkeypatch.setenv("KGRAG_API_KEY", "secret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("Authorization")
        seen["body"] = json.loads(request.content)
        seen["url"] = str(request.url)
        return httpx.Response(200, json={"choices": [{"message": {"content": "hello"}}]})

    llm = HttpLLM("http://llm.test/v1/", "m1", client=_mock_client(handler), backoff=0)
    assert llm.complete(LlmRequest("hi", stop=("END",))) == "hello"
    assert seen["auth"] == "Bearer secret"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["body"]["messages"] == [{"role": "user", "content": "hi"}]
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["stop"] == ["END"]
    assert llm.call_log[0].ok


def test_http_backend_retries_then_raises_transport_error():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503, text="busy")

    llm = HttpLLM("http://llm.test", "m", client=_mock_client(handler), retries=2, backoff=0)
    with pytest.raises(TransportError):
        llm.complete("hi")
    assert len(calls) == 3
    assert llm.call_log[0].ok is False


def test_http_backend_recovers_after_one_failure():
    responses = iter([httpx.Response(500), httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})])
    llm = HttpLLM("http://llm.test", "m", client=_mock_client(lambda r: next(responses)), backoff=0)
    assert llm.complete("hi") == "ok"


def test_provider_mapping_for_completion_style_api():
    mapping = ProviderMapping(path="/generate", prompt_key="prompt", response_path=("output", "text"),
                              as_chat=False)

    def handler(request):
        body = json.loads(request.content)
        return httpx.Response(200, json={"output": {"text": body["prompt"].upper()}})

    llm = HttpLLM("http://llm.test", "m", client=_mock_client(handler), mapping=mapping, backoff=0)
    assert llm.complete("abc") == "ABC"


def test_malformed_provider_response_is_transport_error():
    llm = HttpLLM("http://llm.test", "m", client=_mock_client(lambda r: httpx.Response(200, json={"x": 1})),
                  backoff=0)
    with pytest.raises(TransportError):
        llm.complete("hi")
