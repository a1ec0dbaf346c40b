from __future__ import annotations

import json

import httpx
import pytest

from specmine.inference import (
    DEFAULT_DOC_BUDGET, BackendError, ConfigError, DocSource, Exchange, FixtureBackend, HttpBackend, Prompter,
    ScriptedBackend, build_prompt, check_completion, embedded_doc, extract_json, infer_syntax_spec, truncate_doc,
)

from conftest import LLM_FIXTURES

GOOD = json.dumps({"command": "rm", "usages": [{"positions": [
    {"args": [{"kind": "flag", "name": "-f"}]},
    {"args": [{"kind": "positional", "type": "path", "arity": "one_plus"}]}]}]})
BAD_JSON = "{not json"
BAD_RULE = json.dumps({"command": "rm", "usages": [{"positions": [
    {"args": [{"kind": "option", "name": "-n"}]}]}]})   # option without a type
DOC = DocSource("rm", "NAME\n  rm - remove files\nSYNOPSIS\n  rm [-f] FILE...\n")


@pytest.mark.parametrize("failures,attempts,ok", [(0, 1, True), (1, 2, True), (2, 3, True), (3, 3, False),
                                                   (5, 3, False)])
def test_attempt_bounds(failures, attempts, ok):
    items = [BAD_JSON if i % 2 else BAD_RULE for i in range(failures)] + [GOOD]
    backend = ScriptedBackend(items)
    rep = infer_syntax_spec(DOC, backend)
    assert len(rep.attempts) == attempts == len(backend.prompts)
    assert rep.succeeded is ok
    assert rep.transport_error is None
    if ok:
        assert rep.spec.command == "rm"
        assert rep.attempts[-1].violations == []


def test_retry_prompt_carries_prior_answer_and_errors():
    backend = ScriptedBackend([BAD_RULE, GOOD])
    infer_syntax_spec(DOC, backend)
    first, second = backend.prompts
    assert "previous answer" not in first.lower()
    assert "Your previous answer was rejected." in second
    assert BAD_RULE in second
    assert "Errors:\n- " in second
    assert embedded_doc(first) == embedded_doc(second) == DOC.text.rstrip()


def test_prompt_contains_exemplars_and_doc():
    p = build_prompt(DOC)
    for name in ("rm", "mv", "touch"):
        assert f"### Example: {name}" in p
    assert "### Command: rm" in p
    assert p.endswith("Answer:\n")


def test_transport_error_stops_the_loop():
    backend = ScriptedBackend([BackendError("connection refused"), GOOD])
    rep = infer_syntax_spec(DOC, backend)
    assert not rep.succeeded
    assert len(rep.attempts) == 1
    assert "connection refused" in rep.transport_error


def test_other_backend_exception_counts_as_attempt():
    backend = ScriptedBackend([RuntimeError("boom"), GOOD])
    rep = infer_syntax_spec(DOC, backend)
    assert rep.succeeded and len(rep.attempts) == 2
    assert "Errors:\n- backend raised RuntimeError: boom" in backend.prompts[1]


def test_retry_limit_validation():
    with pytest.raises(ValueError):
        infer_syntax_spec(DOC, ScriptedBackend([GOOD]), retry_limit=0)
    rep = infer_syntax_spec(DOC, ScriptedBackend([BAD_JSON]), retry_limit=5)
    assert len(rep.attempts) == 5 and not rep.succeeded


def test_command_mismatch_is_a_violation():
    spec, problems = check_completion(GOOD, "rmdir")
    assert spec is None
    assert any("'rm'" in p and "'rmdir'" in p for p in problems)


@pytest.mark.parametrize("wrap", ["{}", "```json\n{}\n```", "Sure! Here it is:\n{}\nHope that helps.",
                                  "```\n{}\n```"])
def test_extract_json(wrap):
    text = wrap.replace("{}", GOOD)
    assert json.loads(extract_json(text)) == json.loads(GOOD)
    spec, problems = check_completion(text, "rm")
    assert problems == [] and spec is not None


def test_doc_source_validation():
    with pytest.raises(ValueError):
        DocSource("rm", "   \n")
    with pytest.raises(ValueError):
        DocSource("rm", "x", origin="web")


def test_truncation_keeps_priority_sections():
    filler = "DESCRIPTION\n" + "".join(f"  line {i} of prose\n" for i in range(3000))
    text = "NAME\n  rm\n" + filler + "SYNOPSIS\n  rm [-f] FILE\nOPTIONS\n  -f  force\n"
    assert len(text) > DEFAULT_DOC_BUDGET
    cut = truncate_doc(text)
    assert len(cut) <= DEFAULT_DOC_BUDGET
    assert "SYNOPSIS\n  rm [-f] FILE\n" in cut and "OPTIONS\n  -f  force\n" in cut
    assert cut.index("SYNOPSIS") > cut.index("DESCRIPTION")    # original order preserved
    assert truncate_doc("short doc\n") == "short doc\n"


def test_prompt_truncates_long_docs():
    doc = DocSource("rm", "SYNOPSIS\n  rm FILE\n" + "DESCRIPTION\n" + "x" * 80 + "\n" * 2 + "y\n" * 40000)
    assert len(embedded_doc(build_prompt(doc))) <= DEFAULT_DOC_BUDGET


def test_empty_exemplars_rejected():
    with pytest.raises(ConfigError):
        Prompter(())


# -- fixture backend -----------------------------------------------------------

def _rm_doc() -> DocSource:
    return DocSource("rm", (LLM_FIXTURES / "rm" / "doc.txt").read_text())


def test_fixture_backend_replays_rm():
    rep = infer_syntax_spec(_rm_doc(), FixtureBackend(LLM_FIXTURES))
    assert rep.succeeded and len(rep.attempts) == 1
    assert rep.spec.command == "rm"


def test_fixture_backend_indexing(tmp_path):
    d = tmp_path / "rm"
    d.mkdir()
    (d / "doc.txt").write_text(DOC.text)
    (d / "completion.0.txt").write_text(BAD_JSON)
    (d / "completion.1.txt").write_text(BAD_RULE)
    fb = FixtureBackend(tmp_path)
    prompt = build_prompt(DOC)
    assert fb.complete(prompt) == BAD_JSON
    assert fb.complete(prompt, Exchange(0, BAD_JSON, ("x",))) == BAD_RULE
    assert fb.complete(prompt, Exchange(4, BAD_RULE, ("x",))) == BAD_RULE   # last one repeats
    rep = infer_syntax_spec(DOC, fb)
    assert not rep.succeeded and len(rep.attempts) == 3
    (d / "completion.2.txt").write_text(GOOD)
    rep = infer_syntax_spec(DOC, FixtureBackend(tmp_path))
    assert rep.succeeded and len(rep.attempts) == 3


def test_fixture_backend_gap_and_unknown_doc(tmp_path):
    d = tmp_path / "rm"
    d.mkdir()
    (d / "doc.txt").write_text(DOC.text)
    (d / "completion.0.txt").write_text(BAD_JSON)
    (d / "completion.2.txt").write_text(GOOD)
    fb = FixtureBackend(tmp_path)
    with pytest.raises(BackendError, match="no completion 1"):
        fb.complete(build_prompt(DOC), Exchange(0, "", ()))
    with pytest.raises(BackendError, match="no recorded fixture"):
        fb.complete(build_prompt(DocSource("ls", "ls lists\n")))
    with pytest.raises(ConfigError):
        FixtureBackend(tmp_path / "missing")


# -- HTTP backend --------------------------------------------------------------

def _http(handler, **kw) -> HttpBackend:
    return HttpBackend("http://llm.test/v1", "m-1", api_key="k", client=httpx.Client(transport=httpx.MockTransport(handler)),
                       **kw)


def test_http_backend_request_shape():
    seen = []

    def handler(req: httpx.Request) -> httpx.Response:
        seen.append(req)
        return httpx.Response(200, json={"choices": [{"message": {"content": GOOD}}]})

    rep = infer_syntax_spec(DOC, _http(handler))
    assert rep.succeeded and rep.model_id == "m-1"
    req = seen[0]
    assert str(req.url) == "http://llm.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer k"
    body = json.loads(req.content)
    assert body["model"] == "m-1" and body["temperature"] == 0
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert "<<<DOC" in body["messages"][1]["content"]


@pytest.mark.parametrize("status,payload,match", [
    (401, {}, "authentication"), (500, {"error": "x"}, "HTTP 500"), (200, {"choices": []}, "unexpected response"),
])
def test_http_backend_errors(status, payload, match):
    backend = _http(lambda req: httpx.Response(status, json=payload))
    with pytest.raises(BackendError, match=match):
        backend.complete("hi")
    rep = infer_syntax_spec(DOC, backend)
    assert not rep.succeeded and len(rep.attempts) == 1 and match in rep.transport_error


def test_http_backend_connection_error():
    def handler(req):
        raise httpx.ConnectError("refused", request=req)

    with pytest.raises(BackendError, match="request failed"):
        _http(handler).complete("hi")


def test_http_backend_config(monkeypatch):
    monkeypatch.delenv("SPECMINE_LLM_ENDPOINT", raising=False)
    monkeypatch.delenv("SPECMINE_LLM_MODEL", raising=False)
    with pytest.raises(ConfigError):
        HttpBackend()
    monkeypatch.setenv("SPECMINE_LLM_ENDPOINT", "http://x/chat/completions/")
    monkeypatch.setenv("SPECMINE_LLM_MODEL", "mm")
    b = HttpBackend(client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200))))
    assert b.endpoint == "http://x/chat/completions" and b.model_id == "mm"
