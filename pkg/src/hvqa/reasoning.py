"""First reasoning step: summarize, rewrite options into hypotheses, distill a clue.

All functions are stateless over immutable inputs; per-question state
lives in the orchestrator. Structured outputs are parsed and validated
through the gateway, so malformed model replies are re-asked there.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .corpus import CaptionTrack, Question, full_range, slice_captions
from .errors import HvqaError
from .gateway import (
    ENUM,
    INTEGER,
    RECORD_LIST,
    TEXT,
    TEXT_LIST,
    TEXT_OR_TEXT_LIST,
    UNIT_REAL,
    FieldSpec,
    InvalidRecord,
    LlmSession,
    Message,
    OutputSchema,
)

logger = logging.getLogger(__name__)

DEFAULT_WORD_BUDGET = 300
SUMMARY_SLACK = 1.5

MODE_SPECIFICITY = "specificity"
MODE_DISCRIMINABILITY = "discriminability"
_REFINE_TEMPLATES = {
    MODE_SPECIFICITY: "refine_specificity",
    MODE_DISCRIMINABILITY: "refine_discriminability",
}


class ReasoningError(HvqaError):
    pass


class EmptyTrack(ReasoningError):
    pass


class AllOptionsFiltered(ReasoningError):
    pass


@dataclass(frozen=True)
class Summary:
    """Query-conditioned summary of all frame captions."""

    question_id: str
    text: str
    word_budget: int

    @property
    def word_count(self) -> int:
        return len(self.text.split())

    @property
    def over_budget(self) -> bool:
        return self.word_count > SUMMARY_SLACK * self.word_budget


@dataclass(frozen=True)
class Hypothesis:
    """Testable proposition for one answer option."""

    option_index: int
    statement: str
    entities: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()
    constraints: tuple[str, ...] = ()
    option_text: str = ""

    def __post_init__(self):
        if not self.statement.strip():
            raise ValueError(f"hypothesis for option {self.option_index} has empty statement")


@dataclass(frozen=True)
class HypothesisSet:
    """Per-option hypotheses plus the options filtered out, with reasons."""

    hypotheses: tuple[Hypothesis, ...]
    filtered_out: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if not self.hypotheses:
            raise ValueError("hypothesis set must not be empty")
        indices = [h.option_index for h in self.hypotheses] + [i for i, _ in self.filtered_out]
        if len(indices) != len(set(indices)):
            raise ValueError("duplicate option index across hypotheses and filtered options")

    def option_indices(self) -> tuple[int, ...]:
        return tuple(h.option_index for h in self.hypotheses)


@dataclass(frozen=True)
class Clue:
    """The one observation whose presence or absence separates the hypotheses."""

    text: str
    distinction_score: float
    score_rationale: str = ""
    core_difference: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("clue text must be non-empty")
        if not 0.0 <= self.distinction_score <= 1.0:
            raise ValueError(f"distinction score {self.distinction_score} outside [0, 1]")


_HYPOTHESIS_ITEM = OutputSchema(
    "hypothesis_item",
    fields={
        "option": FieldSpec(TEXT),
        "option_index": FieldSpec(INTEGER),
        "statement": FieldSpec(TEXT),
        "entities": FieldSpec(TEXT_LIST),
        "actions": FieldSpec(TEXT_LIST),
        "constraints": FieldSpec(TEXT_LIST),
    },
    required=frozenset({"option_index", "statement"}),
)

_FILTERED_ITEM = OutputSchema(
    "filtered_item",
    fields={"option_index": FieldSpec(INTEGER), "reason": FieldSpec(TEXT)},
    required=frozenset({"option_index", "reason"}),
)

HYPOTHESIS_SCHEMA = OutputSchema(
    "hypothesis_set",
    fields={
        "hypotheses": FieldSpec(RECORD_LIST, item=_HYPOTHESIS_ITEM),
        "filtered": FieldSpec(RECORD_LIST, item=_FILTERED_ITEM),
    },
    required=frozenset({"hypotheses"}),
)

CLUE_SCHEMA = OutputSchema(
    "clue",
    fields={
        "clue": FieldSpec(TEXT_OR_TEXT_LIST),
        "core_difference": FieldSpec(TEXT),
        "distinction_score": FieldSpec(UNIT_REAL),
        "rationale": FieldSpec(TEXT),
    },
    required=frozenset({"clue", "distinction_score"}),
)

# Appended once when a reply filtered out every option.
_NO_FILTER_NUDGE = (
    "Do not filter out any option this time: produce one testable hypothesis "
    "for every option, even options that look unlikely."
)


def format_options(question: Question) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(question.options))


def question_with_options(question: Question) -> str:
    return f"{question.text}\n{format_options(question)}"


def format_hypotheses(hset: HypothesisSet) -> str:
    lines = []
    for h in hset.hypotheses:
        lines.append(f"Option {h.option_index}: {h.option_text}".rstrip().rstrip(":"))
        lines.append(f"  Hypothesis: {h.statement}")
        if h.entities:
            lines.append(f"  Entities: {', '.join(h.entities)}")
        if h.actions:
            lines.append(f"  Actions: {', '.join(h.actions)}")
        if h.constraints:
            lines.append(f"  Constraints: {', '.join(h.constraints)}")
    return "\n".join(lines)


def _format_duration(seconds: float) -> str:
    return f"{seconds:g}"


def summarize(
    session: LlmSession,
    track: CaptionTrack,
    question: Question,
    word_budget: int = DEFAULT_WORD_BUDGET,
) -> Summary:
    """Ask for a question-conditioned summary of the whole caption track."""
    if track is None or track.length == 0:
        raise EmptyTrack("cannot summarize an empty caption track")
    bindings = {
        "length": _format_duration(track.duration_seconds),
        "interval text": slice_captions(track, full_range(track)),
        "words": word_budget,
        "question": question_with_options(question),
    }
    text = session.complete_text("summarize", bindings).strip()
    summary = Summary(question_id=question.id, text=text, word_budget=word_budget)
    if summary.over_budget:
        logger.warning(
            "summary for %s is %d words against a budget of %d",
            question.id,
            summary.word_count,
            word_budget,
        )
    return summary


def _build_hypothesis_set(record: dict, question: Question) -> HypothesisSet | None:
    """Returns None when every option was filtered out (recovery handled above)."""
    hypotheses = tuple(
        Hypothesis(
            option_index=item["option_index"],
            statement=item["statement"],
            entities=tuple(item.get("entities", ())),
            actions=tuple(item.get("actions", ())),
            constraints=tuple(item.get("constraints", ())),
            option_text=item.get("option", ""),
        )
        for item in record["hypotheses"]
    )
    filtered = tuple((item["option_index"], item["reason"]) for item in record.get("filtered", ()))
    if not hypotheses:
        return None
    return HypothesisSet(hypotheses=hypotheses, filtered_out=filtered)


def _set_validator(question: Question, allowed: tuple[int, ...] | None = None):
    """Schema-level checks for index validity and uniqueness; retried by the gateway."""

    def validate(record: dict) -> None:
        seen = set()
        for key in ("hypotheses", "filtered"):
            for item in record.get(key, ()):
                index = item["option_index"]
                if not 0 <= index < len(question.options):
                    raise InvalidRecord(f"option index {index} outside question options")
                if allowed is not None and index not in allowed:
                    raise InvalidRecord(f"option index {index} was not in the previous set")
                if index in seen:
                    raise InvalidRecord(f"option index {index} appears twice")
                seen.add(index)
        for item in record.get("hypotheses", ()):
            if not str(item["statement"]).strip():
                raise InvalidRecord("empty hypothesis statement")

    return validate


def generate_hypotheses(session: LlmSession, question: Question, summary: Summary) -> HypothesisSet:
    """Filter implausible options and rewrite the rest into testable hypotheses."""
    bindings = {
        "question": question.text,
        "options": format_options(question),
        "video summary": summary.text,
    }
    record = session.complete_structured(
        "hypothesis", bindings, HYPOTHESIS_SCHEMA, validator=_set_validator(question)
    )
    hset = _build_hypothesis_set(record, question)
    if hset is not None:
        return hset
    logger.info("all options filtered for %s; re-asking without filtering", question.id)
    record = session.complete_structured(
        "hypothesis",
        bindings,
        HYPOTHESIS_SCHEMA,
        validator=_set_validator(question),
        extra_messages=(Message("user", _NO_FILTER_NUDGE),),
    )
    hset = _build_hypothesis_set(record, question)
    if hset is None:
        raise AllOptionsFiltered(f"question {question.id!r}: no hypothesis survived")
    return hset


def generate_clue(
    session: LlmSession,
    question: Question,
    hypotheses: HypothesisSet,
    summary: Summary,
) -> Clue:
    """Distill the single observation that separates the hypotheses, with a score.

    Emits exactly one clue; if the backend returns several, the first is
    kept. The caller decides what to do with a low distinction score.
    """
    bindings = {
        "question": question.text,
        "hypotheses": format_hypotheses(hypotheses),
        "video summary": summary.text,
    }
    record = session.complete_structured("clue", bindings, CLUE_SCHEMA)
    clue_text = record["clue"]
    if isinstance(clue_text, list):
        logger.debug("backend returned %d clues; keeping the first", len(clue_text))
        clue_text = clue_text[0]
    return Clue(
        text=clue_text,
        distinction_score=record["distinction_score"],
        score_rationale=record.get("rationale", ""),
        core_difference=record.get("core_difference", ""),
    )


def refine_hypotheses(
    session: LlmSession,
    question: Question,
    previous: HypothesisSet,
    feedback: str,
    mode: str,
    summary: Summary,
) -> HypothesisSet:
    """Regenerate hypotheses after a failed round; filtered options never return."""
    if previous is None or not previous.hypotheses:
        raise ValueError("refinement requires a non-empty previous hypothesis set")
    if not feedback.strip():
        raise ValueError("refinement requires non-empty feedback")
    if mode not in _REFINE_TEMPLATES:
        raise ValueError(f"unknown refinement mode {mode!r}")
    surviving = previous.option_indices()
    option_lines = "\n".join(f"{i}. {question.options[i]}" for i in surviving)
    bindings = {
        "question": question.text,
        "option": option_lines,
        "previous_hypotheses": format_hypotheses(previous),
        "verification_feedback": feedback,
        "video summary": summary.text,
    }
    record = session.complete_structured(
        _REFINE_TEMPLATES[mode],
        bindings,
        HYPOTHESIS_SCHEMA,
        validator=_set_validator(question, allowed=surviving),
    )
    hset = _build_hypothesis_set(record, question)
    if hset is not None:
        return hset
    record = session.complete_structured(
        _REFINE_TEMPLATES[mode],
        bindings,
        HYPOTHESIS_SCHEMA,
        validator=_set_validator(question, allowed=surviving),
        extra_messages=(Message("user", _NO_FILTER_NUDGE),),
    )
    hset = _build_hypothesis_set(record, question)
    if hset is None:
        raise AllOptionsFiltered(f"question {question.id!r}: refinement removed every option")
    return hset
