from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RecordingBackend
from hvqa.gateway import (
    ENUM,
    INT_PAIR,
    INTEGER,
    RECORD_LIST,
    TEXT,
    TEXT_LIST,
    UNIT_REAL,
    BackendUnavailable,
    CompletionRequest,
    CompositeScriptedBackend,
    FieldSpec,
    HttpBackend,
    KindMismatch,
    Message,
    MissingKey,
    NoMatchingRule,
    NoStructuredObject,
    OutOfRange,
    OutputSchema,
    ScriptRule,
    ScriptedBackend,
    SchemaViolation,
    Usage,
    UsageLedger,
    complete,
    complete_structured,
    estimate_units,
    extract_structured,
)
from hvqa.prompts import TemplateRegistry

ANSWER_SCHEMA = OutputSchema(
    "answer",
    fields={"final_answer": FieldSpec(INTEGER)},
    required=frozenset({"final_answer"}),
)

VERIFY_ENUM_SCHEMA = OutputSchema(
    "verify_small",
    fields={
        "verification_result": FieldSpec(
            ENUM, values=("verified", "partially_verified", "not_verified")
        )
    },
    required=frozenset({"verification_result"}),
)


def _request(text: str, template_id=None, tags=None) -> CompletionRequest:
    return CompletionRequest(
        messages=(Message("user", text),), template_id=template_id, tags=tags or {}
    )


def test_scripted_rule_match():
    backend = ScriptedBackend([ScriptRule(response="canned", must_contain=("sewing",))])
    assert backend.complete(_request("a person is sewing a shirt")).text == "canned"


def test_scripted_no_matching_rule():
    backend = ScriptedBackend([ScriptRule(response="canned", must_contain=("sewing",))])
    with pytest.raises(NoMatchingRule):
        backend.complete(_request("nothing relevant"))


def test_scripted_first_rule_wins():
    backend = ScriptedBackend(
        [
            ScriptRule(response="first", must_contain=("alpha",)),
            ScriptRule(response="second", must_contain=("alpha", "beta")),
        ]
    )
    assert backend.complete(_request("alpha beta")).text == "first"


def test_scripted_template_id_filter():
    backend = ScriptedBackend(
        [
            ScriptRule(response="for-verify", template_id="verify"),
            ScriptRule(response="generic"),
        ]
    )
    assert backend.complete(_request("x", template_id="verify")).text == "for-verify"
    assert backend.complete(_request("x", template_id="clue")).text == "generic"


def test_scripted_purity_identical_calls():
    backend = ScriptedBackend([ScriptRule(response="stable output")])
    request = _request("same prompt")
    first = backend.complete(request)
    second = backend.complete(request)
    assert first.text == second.text
    assert first == second


def test_scripted_file_round_trip(tmp_path):
    backend = ScriptedBackend(
        [ScriptRule(response="r", must_contain=("m",), template_id="clue")]
    )
    path = tmp_path / "script.json"
    backend.save(path)
    assert ScriptedBackend.from_file(path) == backend


def test_composite_routes_by_video_tag():
    backend = CompositeScriptedBackend(
        {
            "v1": ScriptedBackend([ScriptRule(response="one")]),
            "v2": ScriptedBackend([ScriptRule(response="two")]),
        }
    )
    assert backend.complete(_request("x", tags={"video_id": "v1"})).text == "one"
    assert backend.complete(_request("x", tags={"video_id": "v2"})).text == "two"
    with pytest.raises(NoMatchingRule):
        backend.complete(_request("x", tags={"video_id": "v3"}))


def test_request_needs_user_message():
    with pytest.raises(ValueError):
        CompletionRequest(messages=(Message("system", "only system"),))


def test_usage_ledger_totals_and_threading():
    ledger = UsageLedger()

    def add():
        for _ in range(100):
            ledger.record("x", __import__("hvqa.gateway", fromlist=["Usage"]).Usage(1, 2), 0.0)

    threads = [threading.Thread(target=add) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ledger) == 400
    assert ledger.totals().prompt_units == 400
    assert ledger.totals().completion_units == 800


def test_complete_records_to_ledger():
    ledger = UsageLedger()
    backend = ScriptedBackend([ScriptRule(response="ok")])
    complete(backend, _request("hello world", template_id="summarize"), ledger)
    assert len(ledger) == 1
    assert ledger.records[0].template_id == "summarize"
    assert ledger.records[0].usage.prompt_units == estimate_units("hello world")


# --- extract_structured ------------------------------------------------------


def test_extract_plain_object():
    assert extract_structured('{"final_answer": 2}', ANSWER_SCHEMA) == {"final_answer": 2}


def test_extract_fenced_object():
    text = 'Sure! ```{"verification_result":"partially_verified"}``` hope that helps'
    record = extract_structured(text, VERIFY_ENUM_SCHEMA)
    assert record["verification_result"] == "partially_verified"


def test_extract_prose_padding():
    text = 'Let me explain... the result follows.\n{"final_answer": 4}\nThat is all.'
    assert extract_structured(text, ANSWER_SCHEMA)["final_answer"] == 4


def test_extract_score_out_of_range_not_clamped():
    schema = OutputSchema(
        "score", fields={"distinction_score": FieldSpec(UNIT_REAL)}, required=frozenset({"distinction_score"})
    )
    with pytest.raises(OutOfRange) as err:
        extract_structured('{"distinction_score": 1.3}', schema)
    assert err.value.value == pytest.approx(1.3)


def test_extract_missing_key():
    with pytest.raises(MissingKey):
        extract_structured('{"other": 1}', ANSWER_SCHEMA)


def test_extract_no_object():
    with pytest.raises(NoStructuredObject):
        extract_structured("distinction score: high", ANSWER_SCHEMA)


def test_extract_skips_unbalanced_braces():
    text = 'notice { this is not json... {"final_answer": 1}'
    assert extract_structured(text, ANSWER_SCHEMA)["final_answer"] == 1


def test_integer_coercions():
    assert extract_structured('{"final_answer": "3"}', ANSWER_SCHEMA)["final_answer"] == 3
    assert extract_structured('{"final_answer": 2.0}', ANSWER_SCHEMA)["final_answer"] == 2
    with pytest.raises(KindMismatch):
        extract_structured('{"final_answer": true}', ANSWER_SCHEMA)
    with pytest.raises(KindMismatch):
        extract_structured('{"final_answer": "maybe 2"}', ANSWER_SCHEMA)


def test_enum_normalization():
    record = extract_structured('{"verification_result": " Verified "}', VERIFY_ENUM_SCHEMA)
    assert record["verification_result"] == "verified"
    with pytest.raises(KindMismatch):
        extract_structured('{"verification_result": "definitely"}', VERIFY_ENUM_SCHEMA)


def test_int_pair_and_text_list_kinds():
    schema = OutputSchema(
        "mixed",
        fields={
            "followup_range": FieldSpec(INT_PAIR),
            "reasoning_trace": FieldSpec(TEXT_LIST),
        },
        required=frozenset({"followup_range"}),
    )
    record = extract_structured(
        '{"followup_range": [31, 35], "reasoning_trace": "Step 1: look"}', schema
    )
    assert record["followup_range"] == (31, 35)
    assert record["reasoning_trace"] == ["Step 1: look"]
    with pytest.raises(KindMismatch):
        extract_structured('{"followup_range": [31]}', schema)


def test_record_list_kind():
    item = OutputSchema(
        "hyp",
        fields={"option_index": FieldSpec(INTEGER), "statement": FieldSpec(TEXT)},
        required=frozenset({"option_index", "statement"}),
    )
    schema = OutputSchema(
        "set",
        fields={"hypotheses": FieldSpec(RECORD_LIST, item=item)},
        required=frozenset({"hypotheses"}),
    )
    record = extract_structured(
        '{"hypotheses": [{"option_index": 0, "statement": "s", "noise": 1}]}', schema
    )
    assert record["hypotheses"] == [{"option_index": 0, "statement": "s"}]
    with pytest.raises(MissingKey):
        extract_structured('{"hypotheses": [{"option_index": 0}]}', schema)


# --- complete_structured -----------------------------------------------------


@pytest.fixture()
def tiny_registry(tmp_path):
    # override every template with a minimal body so rendering stays cheap
    for template_id in (
        "summarize",
        "hypothesis",
        "clue",
        "verify",
        "answer",
        "refine_specificity",
        "refine_discriminability",
    ):
        (tmp_path / f"{template_id}.txt").write_text(
            f"{template_id} prompt: {{question}}", encoding="utf-8"
        )
    return TemplateRegistry(overrides_dir=tmp_path)


def test_complete_structured_success(tiny_registry):
    backend = ScriptedBackend([ScriptRule(response='{"final_answer": 2}')])
    record = complete_structured(
        backend, tiny_registry, "answer", {"question": "q"}, ANSWER_SCHEMA
    )
    assert record == {"final_answer": 2}


def test_complete_structured_retry_then_success(tiny_registry):
    backend = RecordingBackend(
        ScriptedBackend(
            [
                # the corrective follow-up message flips the match to the good rule
                ScriptRule(response='{"final_answer": 1}', must_contain=("could not be used",)),
                ScriptRule(response="distinction score: high"),
            ]
        )
    )
    record = complete_structured(
        backend, tiny_registry, "answer", {"question": "q"}, ANSWER_SCHEMA
    )
    assert record == {"final_answer": 1}
    assert backend.calls == 2


def test_complete_structured_retry_exhaustion(tiny_registry):
    backend = RecordingBackend(ScriptedBackend([ScriptRule(response="score: high")]))
    ledger = UsageLedger()
    with pytest.raises(SchemaViolation) as err:
        complete_structured(
            backend,
            tiny_registry,
            "answer",
            {"question": "q"},
            ANSWER_SCHEMA,
            ledger=ledger,
            parse_retries=3,
        )
    assert backend.calls == 4  # 1 + parse_retries
    assert len(ledger) == 4
    assert err.value.attempts == 4
    assert err.value.last_text == "score: high"


@settings(max_examples=25, deadline=None)
@given(parse_retries=st.integers(min_value=0, max_value=4))
def test_retry_bound_property(parse_retries):
    registry = TemplateRegistry()
    backend = RecordingBackend(ScriptedBackend([ScriptRule(response="never json")]))
    bindings = {
        "question": "q",
        "options": "0. a",
        "verification_outputs": "none",
        "video summary": "s",
    }
    with pytest.raises(SchemaViolation):
        complete_structured(
            backend, registry, "answer", bindings, ANSWER_SCHEMA, parse_retries=parse_retries
        )
    assert backend.calls == 1 + parse_retries


# --- HTTP backend ------------------------------------------------------------


class _ChatHandler(BaseHTTPRequestHandler):
    fail_first = 0

    def do_POST(self):
        cls = type(self)
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if cls.fail_first > 0:
            cls.fail_first -= 1
            self.send_response(500)
            self.end_headers()
            return
        reply = {
            "choices": [
                {"message": {"role": "assistant", "content": f"echo:{body['messages'][-1]['content']}"}}
            ],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3},
        }
        payload = json.dumps(reply).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_backend_round_trip(chat_server):
    backend = HttpBackend(base_url=chat_server, api_key="k")
    response = backend.complete(_request("ping"))
    assert response.text == "echo:ping"
    assert response.usage.prompt_units == 7
    assert response.usage.completion_units == 3
    assert response.latency >= 0


def test_http_backend_transport_retry(chat_server):
    _ChatHandler.fail_first = 2
    backend = HttpBackend(base_url=chat_server, api_key="k", transport_retries=3)
    assert backend.complete(_request("again")).text == "echo:again"


def test_http_backend_gives_up(chat_server):
    _ChatHandler.fail_first = 99
    backend = HttpBackend(base_url=chat_server, api_key="k", transport_retries=2)
    with pytest.raises(BackendUnavailable):
        backend.complete(_request("nope"))
    _ChatHandler.fail_first = 0


def test_http_backend_requires_endpoint(monkeypatch):
    monkeypatch.delenv("HV_API_BASE", raising=False)
    with pytest.raises(BackendUnavailable):
        HttpBackend()
