"""Single choke point for language-model calls.

Every completion flows through `complete`, which appends to a usage
ledger. `complete_structured` renders a template, asks the backend, and
extracts a schema-checked record, re-asking with a corrective message up
to `parse_retries` times. Backends are either a generic chat-completion
HTTP client or a deterministic scripted mock, so any pipeline wired to
scripted backends is a pure function of its inputs.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import requests

from .errors import HvqaError
from .prompts import TemplateRegistry

logger = logging.getLogger(__name__)

DEFAULT_PARSE_RETRIES = 3
DEFAULT_TRANSPORT_RETRIES = 3
DEFAULT_MAX_OUTPUT_UNITS = 2048

API_BASE_ENV = "HV_API_BASE"
API_KEY_ENV = "HV_API_KEY"


class GatewayError(HvqaError):
    pass


class BackendUnavailable(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class NoMatchingRule(GatewayError):
    def __init__(self, prompt_digest: str):
        self.prompt_digest = prompt_digest
        super().__init__(f"no scripted rule matches prompt (digest {prompt_digest})")


class ExtractionError(GatewayError):
    """One failed parse/validation attempt; complete_structured retries these."""


class NoStructuredObject(ExtractionError):
    pass


class MissingKey(ExtractionError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing required key {name!r}")


class KindMismatch(ExtractionError):
    def __init__(self, name: str, detail: str):
        self.name = name
        super().__init__(f"field {name!r}: {detail}")


class OutOfRange(ExtractionError):
    def __init__(self, name: str, value: float):
        self.name = name
        self.value = value
        super().__init__(f"field {name!r}: value {value} outside [0, 1]")


class InvalidRecord(ExtractionError):
    """Semantic validation failure raised by caller-supplied validators."""


class SchemaViolation(GatewayError):
    """Raised once all parse retries are exhausted."""

    def __init__(self, schema_id: str, last_text: str, attempts: int, cause: ExtractionError):
        self.schema_id = schema_id
        self.last_text = last_text
        self.attempts = attempts
        self.cause = cause
        super().__init__(
            f"schema {schema_id!r} not satisfied after {attempts} attempt(s): {cause}"
        )


def estimate_units(text: str) -> int:
    """Whitespace-token fallback when a backend reports no usage."""
    return len(text.split())


@dataclass(frozen=True)
class Message:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad message role {self.role!r}")


@dataclass(frozen=True)
class Usage:
    prompt_units: int = 0
    completion_units: int = 0

    def __post_init__(self):
        if self.prompt_units < 0 or self.completion_units < 0:
            raise ValueError("usage counts must be nonnegative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_units + other.prompt_units,
            self.completion_units + other.completion_units,
        )


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_output_units: int = DEFAULT_MAX_OUTPUT_UNITS
    template_id: str | None = None
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("request needs at least one user message")
        if not (self.temperature >= 0 and self.temperature == self.temperature):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_output_units <= 0:
            raise ValueError("max_output_units must be positive")

    def prompt_text(self) -> str:
        return "\n\n".join(m.text for m in self.messages)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    usage: Usage = Usage()
    latency: float = 0.0


@dataclass(frozen=True)
class CallRecord:
    template_id: str | None
    usage: Usage
    latency: float


class UsageLedger:
    """Thread-safe append-only record of every backend call."""

    def __init__(self):
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def record(self, template_id: str | None, usage: Usage, latency: float) -> None:
        with self._lock:
            self._records.append(CallRecord(template_id, usage, latency))

    @property
    def records(self) -> tuple[CallRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def totals(self) -> Usage:
        total = Usage()
        for rec in self.records:
            total = total + rec.usage
        return total

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


class Backend(Protocol):
    def complete(self, request: CompletionRequest) -> CompletionResponse:
        ...


@dataclass(frozen=True)
class ScriptRule:
    response: str
    must_contain: tuple[str, ...] = ()
    template_id: str | None = None

    def matches(self, request: CompletionRequest, prompt: str) -> bool:
        if self.template_id is not None and self.template_id != request.template_id:
            return False
        return all(needle in prompt for needle in self.must_contain)


class ScriptedBackend:
    """Deterministic mock: first rule whose substrings all occur in the prompt wins."""

    def __init__(self, rules: Sequence[ScriptRule]):
        self.rules = tuple(rules)

    def __eq__(self, other) -> bool:
        return isinstance(other, ScriptedBackend) and self.rules == other.rules

    def __hash__(self) -> int:
        return hash(self.rules)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        prompt = request.prompt_text()
        for rule in self.rules:
            if rule.matches(request, prompt):
                return CompletionResponse(
                    text=rule.response,
                    usage=Usage(estimate_units(prompt), estimate_units(rule.response)),
                    latency=0.0,
                )
        raise NoMatchingRule(_digest(prompt))

    def to_dict(self) -> dict:
        rules = []
        for rule in self.rules:
            entry: dict = {"response": rule.response}
            if rule.must_contain:
                entry["must_contain"] = list(rule.must_contain)
            if rule.template_id is not None:
                entry["template_id"] = rule.template_id
            rules.append(entry)
        return {"rules": rules}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_dict(cls, raw: dict) -> "ScriptedBackend":
        rules = [
            ScriptRule(
                response=str(entry["response"]),
                must_contain=tuple(str(s) for s in entry.get("must_contain", ())),
                template_id=entry.get("template_id"),
            )
            for entry in raw["rules"]
        ]
        return cls(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class CompositeScriptedBackend:
    """Routes requests to per-video scripted backends via the request's video_id tag."""

    def __init__(self, by_video: Mapping[str, ScriptedBackend], default: ScriptedBackend | None = None):
        self._by_video = dict(by_video)
        self._default = default

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        video_id = request.tags.get("video_id")
        backend = self._by_video.get(video_id, self._default)
        if backend is None:
            raise NoMatchingRule(_digest(request.prompt_text()))
        return backend.complete(request)

    @classmethod
    def from_dir(cls, path: str | Path) -> "CompositeScriptedBackend":
        by_video = {}
        for f in sorted(Path(path).glob("*.json")):
            by_video[f.stem] = ScriptedBackend.from_file(f)
        if not by_video:
            raise BackendUnavailable(f"no script files under {path}")
        return cls(by_video)


class HttpBackend:
    """Generic chat-completion client; endpoint and key come from HV_API_BASE / HV_API_KEY."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-4o",
        timeout: float = 120.0,
        transport_retries: int = DEFAULT_TRANSPORT_RETRIES,
    ):
        self.base_url = (base_url or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.model = model
        self.timeout = timeout
        self.transport_retries = transport_retries
        if not self.base_url:
            raise BackendUnavailable(f"no endpoint configured; set {API_BASE_ENV}")

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_units,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_error: Exception | None = None
        for attempt in range(self.transport_retries):
            start = time.perf_counter()
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
                usage = payload.get("usage", {})
                return CompletionResponse(
                    text=text,
                    usage=Usage(
                        int(usage.get("prompt_tokens", estimate_units(request.prompt_text()))),
                        int(usage.get("completion_tokens", estimate_units(text))),
                    ),
                    latency=time.perf_counter() - start,
                )
            except requests.Timeout as exc:
                raise BackendTimeout(str(exc)) from exc
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                time.sleep(min(2**attempt * 0.25, 2.0))
        raise BackendUnavailable(
            f"backend failed after {self.transport_retries} attempts: {last_error}"
        )


def complete(backend: Backend, request: CompletionRequest, ledger: UsageLedger | None = None) -> CompletionResponse:
    """The single dispatch point; records usage when a ledger is supplied."""
    response = backend.complete(request)
    if ledger is not None:
        ledger.record(request.template_id, response.usage, response.latency)
    return response


# --- structured output -----------------------------------------------------

TEXT = "text"
TEXT_LIST = "text-list"
TEXT_OR_TEXT_LIST = "text-or-text-list"
INTEGER = "integer"
UNIT_REAL = "real-in-[0,1]"
ENUM = "enum"
INT_PAIR = "int-pair"
RECORD_LIST = "record-list"


@dataclass(frozen=True)
class FieldSpec:
    kind: str
    values: tuple[str, ...] = ()
    item: "OutputSchema | None" = None


@dataclass(frozen=True)
class OutputSchema:
    schema_id: str
    fields: Mapping[str, FieldSpec]
    required: frozenset[str]

    def __post_init__(self):
        if not self.required:
            raise ValueError(f"schema {self.schema_id!r} must require at least one key")
        unknown = self.required - set(self.fields)
        if unknown:
            raise ValueError(f"schema {self.schema_id!r}: required keys {unknown} not declared")


def _coerce(name: str, spec: FieldSpec, value):
    kind = spec.kind
    if kind == TEXT:
        if not isinstance(value, str):
            raise KindMismatch(name, f"expected text, got {type(value).__name__}")
        return value
    if kind == TEXT_LIST:
        if isinstance(value, str):
            return [value]
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
        raise KindMismatch(name, "expected a list of texts")
    if kind == TEXT_OR_TEXT_LIST:
        if isinstance(value, str):
            return value
        if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
            return list(value)
        raise KindMismatch(name, "expected text or a non-empty list of texts")
    if kind == INTEGER:
        if isinstance(value, bool):
            raise KindMismatch(name, "expected an integer, got a boolean")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            return int(value.strip())
        raise KindMismatch(name, f"expected an integer, got {value!r}")
    if kind == UNIT_REAL:
        if isinstance(value, bool):
            raise KindMismatch(name, "expected a real number, got a boolean")
        if isinstance(value, (int, float)):
            number = float(value)
        elif isinstance(value, str):
            try:
                number = float(value.strip())
            except ValueError:
                raise KindMismatch(name, f"expected a real number, got {value!r}") from None
        else:
            raise KindMismatch(name, f"expected a real number, got {type(value).__name__}")
        if not 0.0 <= number <= 1.0:
            raise OutOfRange(name, number)
        return number
    if kind == ENUM:
        if not isinstance(value, str):
            raise KindMismatch(name, f"expected one of {spec.values}, got {type(value).__name__}")
        normalized = value.strip().lower()
        if normalized not in spec.values:
            raise KindMismatch(name, f"expected one of {spec.values}, got {value!r}")
        return normalized
    if kind == INT_PAIR:
        if (
            isinstance(value, (list, tuple))
            and len(value) == 2
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        ):
            return (value[0], value[1])
        raise KindMismatch(name, f"expected a pair of integers, got {value!r}")
    if kind == RECORD_LIST:
        if not isinstance(value, list):
            raise KindMismatch(name, "expected a list of records")
        out = []
        for entry in value:
            if not isinstance(entry, dict):
                raise KindMismatch(name, "expected a list of records")
            out.append(validate_record(entry, spec.item))
        return out
    raise ValueError(f"unknown field kind {kind!r}")


def validate_record(record: dict, schema: OutputSchema) -> dict:
    """Check required keys and coerce declared fields; unknown keys are dropped."""
    for key in schema.required:
        if key not in record or record[key] is None:
            raise MissingKey(key)
    out = {}
    for name, spec in schema.fields.items():
        if name in record and record[name] is not None:
            out[name] = _coerce(name, spec, record[name])
    return out


def extract_structured(text: str, schema: OutputSchema) -> dict:
    """Parse the first balanced JSON object found anywhere in `text`.

    Markdown fences and surrounding prose are skipped naturally because
    the scan starts at each '{' and accepts the first balanced object.
    Values are range-checked, never clamped.
    """
    decoder = json.JSONDecoder()
    position = text.find("{")
    candidate = None
    while position != -1:
        try:
            obj, _ = decoder.raw_decode(text, position)
        except json.JSONDecodeError:
            position = text.find("{", position + 1)
            continue
        if isinstance(obj, dict):
            candidate = obj
            break
        position = text.find("{", position + 1)
    if candidate is None:
        raise NoStructuredObject(f"no balanced object in response (digest {_digest(text)})")
    return validate_record(candidate, schema)


def _corrective_message(schema: OutputSchema, error: ExtractionError) -> str:
    keys = ", ".join(sorted(schema.required))
    return (
        f"Your previous reply could not be used: {error}. "
        f"Reply again with a single JSON object containing at least the keys: {keys}. "
        "Do not add any text outside the JSON object."
    )


def complete_structured(
    backend: Backend,
    registry: TemplateRegistry,
    template_id: str,
    bindings: Mapping[str, object],
    schema: OutputSchema,
    *,
    ledger: UsageLedger | None = None,
    parse_retries: int = DEFAULT_PARSE_RETRIES,
    validator: Callable[[dict], None] | None = None,
    extra_messages: Sequence[Message] = (),
    temperature: float = 0.0,
    max_output_units: int = DEFAULT_MAX_OUTPUT_UNITS,
    tags: Mapping[str, str] | None = None,
) -> dict:
    """Render, complete, and extract; at most 1 + parse_retries backend calls."""
    rendered = registry.render(template_id, bindings)
    messages: list[Message] = [Message("user", rendered), *extra_messages]
    last_error: ExtractionError | None = None
    last_text = ""
    attempts = 0
    for attempt in range(1 + parse_retries):
        request = CompletionRequest(
            messages=tuple(messages),
            temperature=temperature,
            max_output_units=max_output_units,
            template_id=template_id,
            tags=tags or {},
        )
        response = complete(backend, request, ledger)
        last_text = response.text
        attempts = attempt + 1
        try:
            record = extract_structured(response.text, schema)
            if validator is not None:
                validator(record)
            return record
        except ExtractionError as exc:
            last_error = exc
            logger.debug("structured extraction attempt %d failed: %s", attempts, exc)
            messages.append(Message("assistant", response.text))
            messages.append(Message("user", _corrective_message(schema, exc)))
    assert last_error is not None
    raise SchemaViolation(schema.schema_id, last_text, attempts, last_error)


class LlmSession:
    """Per-question bundle of backend, templates, ledger, and request tags."""

    def __init__(
        self,
        backend: Backend,
        registry: TemplateRegistry,
        *,
        ledger: UsageLedger | None = None,
        parse_retries: int = DEFAULT_PARSE_RETRIES,
        temperature: float = 0.0,
        max_output_units: int = DEFAULT_MAX_OUTPUT_UNITS,
        tags: Mapping[str, str] | None = None,
    ):
        self.backend = backend
        self.registry = registry
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.parse_retries = parse_retries
        self.temperature = temperature
        self.max_output_units = max_output_units
        self.tags = dict(tags or {})

    def complete_text(self, template_id: str, bindings: Mapping[str, object]) -> str:
        rendered = self.registry.render(template_id, bindings)
        return self.complete_prompt(rendered, template_id)

    def complete_prompt(self, prompt: str, pseudo_template_id: str) -> str:
        """Free-text completion for prompts that live outside the registry."""
        request = CompletionRequest(
            messages=(Message("user", prompt),),
            temperature=self.temperature,
            max_output_units=self.max_output_units,
            template_id=pseudo_template_id,
            tags=self.tags,
        )
        return complete(self.backend, request, self.ledger).text

    def complete_structured(
        self,
        template_id: str,
        bindings: Mapping[str, object],
        schema: OutputSchema,
        *,
        validator: Callable[[dict], None] | None = None,
        extra_messages: Sequence[Message] = (),
    ) -> dict:
        return complete_structured(
            self.backend,
            self.registry,
            template_id,
            bindings,
            schema,
            ledger=self.ledger,
            parse_retries=self.parse_retries,
            validator=validator,
            extra_messages=extra_messages,
            temperature=self.temperature,
            max_output_units=self.max_output_units,
            tags=self.tags,
        )


def _digest(text: str) -> str:
    import hashlib

    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
