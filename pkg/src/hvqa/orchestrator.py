"""Per-question pipeline: summarize, hypothesize, verify, refine, answer.

The outer loop regenerates hypotheses and clue while verdicts come back
not-verified (or the clue scores below the distinction threshold), up to
`max_outer_loops` rounds. A discriminability regeneration consumes an
outer-loop slot in place of that round's verification. Any non-fatal
stage failure degrades into trace flags; an answer record is produced
whenever summarization succeeds.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

from .corpus import CaptionTrack, DetailCaptionCache, FrameRange, Question
from .errors import HvqaError
from .gateway import (
    INTEGER,
    TEXT,
    Backend,
    FieldSpec,
    LlmSession,
    Message,
    OutputSchema,
    SchemaViolation,
    Usage,
)
from .prompts import TemplateRegistry
from .reasoning import (
    MODE_DISCRIMINABILITY,
    MODE_SPECIFICITY,
    AllOptionsFiltered,
    Clue,
    HypothesisSet,
    Summary,
    format_options,
    generate_clue,
    generate_hypotheses,
    refine_hypotheses,
    summarize,
)
from .verification import (
    EvidenceBundle,
    LocalizationFailed,
    Status,
    VerificationOutcome,
    VerificationReport,
    run_verification,
)

logger = logging.getLogger(__name__)

MODE_NONE = "none"

ABLATION_NONE = "none"
ABLATION_NO_HYPOTHESIS = "no_hypothesis"
ABLATION_NO_CLUE = "no_clue"
ABLATION_NO_VERIFICATION_STATUS = "no_verification_status"
ABLATIONS = (
    ABLATION_NONE,
    ABLATION_NO_HYPOTHESIS,
    ABLATION_NO_CLUE,
    ABLATION_NO_VERIFICATION_STATUS,
)

LOCALIZERS = ("model", "lexical")

_DEGRADABLE = (SchemaViolation, AllOptionsFiltered, LocalizationFailed)


class OrchestratorError(HvqaError):
    pass


class ConfigInvalid(OrchestratorError):
    pass


class AnswerOutOfRange(OrchestratorError):
    def __init__(self, value: int):
        self.value = value
        super().__init__(f"final answer {value} is not a valid option index")


@dataclass
class PipelineConfig:
    max_outer_loops: int = 3
    inner_max: int = 2
    word_budget: int = 300
    distinction_threshold: float = 0.5
    detail_frame_cap: int = 5
    parse_retries: int = 3
    localizer: str = "model"
    ablation: str = ABLATION_NONE
    temperature: float = 0.0

    def validate(self) -> None:
        problems = []
        if self.max_outer_loops < 1:
            problems.append("max_outer_loops must be >= 1")
        if self.inner_max < 1:
            problems.append("inner_max must be >= 1")
        if not 0.0 <= self.distinction_threshold <= 1.0:
            problems.append("distinction_threshold must lie in [0, 1]")
        if self.detail_frame_cap < 1:
            problems.append("detail_frame_cap must be >= 1")
        if self.word_budget < 1:
            problems.append("word_budget must be >= 1")
        if self.parse_retries < 0:
            problems.append("parse_retries must be >= 0")
        if self.localizer not in LOCALIZERS:
            problems.append(f"localizer must be one of {LOCALIZERS}")
        if self.ablation not in ABLATIONS:
            problems.append(f"ablation must be one of {ABLATIONS}")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "max_outer_loops": self.max_outer_loops,
            "inner_max": self.inner_max,
            "word_budget": self.word_budget,
            "distinction_threshold": self.distinction_threshold,
            "detail_frame_cap": self.detail_frame_cap,
            "parse_retries": self.parse_retries,
            "localizer": self.localizer,
            "ablation": self.ablation,
            "temperature": self.temperature,
        }


@dataclass
class RoundRecord:
    round_index: int
    hypotheses: HypothesisSet | None
    clue: Clue | None
    reports: tuple[VerificationReport, ...] = ()
    regeneration_mode: str = MODE_NONE
    evidence: EvidenceBundle = EvidenceBundle()
    window: FrameRange | None = None
    used_fallback: bool = False
    partial_exhausted: bool = False
    per_option_status: dict[int, str] | None = None
    detail_requests: int = 0


@dataclass
class AnswerRecord:
    final_answer: int
    reasoning_summary: str = ""
    conflict_resolution: str = ""
    explanation: str = ""


@dataclass(frozen=True)
class RunCounts:
    outer_loops: int
    inner_loops_total: int
    llm_calls: int
    detail_calls: int


@dataclass
class RunTrace:
    question_id: str
    video_id: str
    summary: Summary | None
    rounds: tuple[RoundRecord, ...]
    answer: AnswerRecord | None
    counts: RunCounts
    timings: dict[str, float] = field(default_factory=dict)
    usage: Usage = Usage()
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "video_id": self.video_id,
            "summary": None
            if self.summary is None
            else {
                "text": self.summary.text,
                "word_budget": self.summary.word_budget,
                "over_budget": self.summary.over_budget,
            },
            "rounds": [_round_to_dict(r) for r in self.rounds],
            "answer": None
            if self.answer is None
            else {
                "final_answer": self.answer.final_answer,
                "reasoning_summary": self.answer.reasoning_summary,
                "conflict_resolution": self.answer.conflict_resolution,
                "explanation": self.answer.explanation,
            },
            "counts": {
                "outer_loops": self.counts.outer_loops,
                "inner_loops_total": self.counts.inner_loops_total,
                "llm_calls": self.counts.llm_calls,
                "detail_calls": self.counts.detail_calls,
            },
            "timings": dict(self.timings),
            "usage": {
                "prompt_units": self.usage.prompt_units,
                "completion_units": self.usage.completion_units,
            },
            "flags": list(self.flags),
        }


def _round_to_dict(record: RoundRecord) -> dict:
    return {
        "round": record.round_index,
        "hypotheses": None
        if record.hypotheses is None
        else {
            "hypotheses": [
                {
                    "option_index": h.option_index,
                    "option": h.option_text,
                    "statement": h.statement,
                    "entities": list(h.entities),
                    "actions": list(h.actions),
                    "constraints": list(h.constraints),
                }
                for h in record.hypotheses.hypotheses
            ],
            "filtered_out": [[i, reason] for i, reason in record.hypotheses.filtered_out],
        },
        "clue": None
        if record.clue is None
        else {
            "text": record.clue.text,
            "distinction_score": record.clue.distinction_score,
            "score_rationale": record.clue.score_rationale,
            "core_difference": record.clue.core_difference,
        },
        "reports": [
            {
                "status": r.status.value,
                "clue_understanding": r.clue_understanding,
                "evidence_found": r.evidence_found,
                "reasoning_steps": list(r.reasoning_steps),
                "followup": None
                if r.followup is None
                else {
                    "needed_evidence": r.followup.needed_evidence,
                    "range": list(r.followup.window.as_pair()),
                },
            }
            for r in record.reports
        ],
        "evidence": [
            {"range": list(item.window.as_pair()), "source": item.source, "text": item.text}
            for item in record.evidence.items
        ],
        "regeneration_mode": record.regeneration_mode,
        "window": None if record.window is None else list(record.window.as_pair()),
        "localization_fallback": record.used_fallback,
        "partial_exhausted": record.partial_exhausted,
        "per_option_status": None
        if record.per_option_status is None
        else {str(k): v for k, v in record.per_option_status.items()},
    }


ANSWER_SCHEMA = OutputSchema(
    "answer",
    fields={
        "reasoning_summary": FieldSpec(TEXT),
        "conflict_resolution": FieldSpec(TEXT),
        "final_answer": FieldSpec(INTEGER),
        "explanation": FieldSpec(TEXT),
    },
    required=frozenset({"final_answer"}),
)


def select_regeneration_mode(clue: Clue | None, last_status: Status | None, threshold: float) -> str:
    """Pick the refinement prompt for the next round.

    A low distinction score wins over a not-verified verdict because it
    is known before any verification is attempted.
    """
    if clue is not None and clue.distinction_score < threshold:
        return MODE_DISCRIMINABILITY
    if last_status is Status.NOT_VERIFIED:
        return MODE_SPECIFICITY
    return MODE_NONE


def format_verification_outputs(
    clue: Clue | None,
    reports: tuple[VerificationReport, ...],
    evidence: EvidenceBundle,
) -> str:
    blocks = []
    if clue is not None:
        blocks.append(f"Clue: {clue.text} (distinction score {clue.distinction_score:g})")
    for i, report in enumerate(reports, start=1):
        lines = [
            f"Verification {i}: {report.status.value}",
            f"  Understanding: {report.clue_understanding}",
            f"  Evidence found: {report.evidence_found}",
        ]
        for step in report.reasoning_steps:
            lines.append(f"  {step}")
        blocks.append("\n".join(lines))
    for item in evidence.items:
        blocks.append(f"Evidence ({item.source}, t={item.window.start}-{item.window.end}s):\n{item.text}")
    if not blocks:
        return "No verification results are available; rely on the context summary."
    return "\n\n".join(blocks)


def integrate_answer(
    session: LlmSession,
    question: Question,
    summary: Summary,
    clue: Clue | None,
    reports: tuple[VerificationReport, ...],
    evidence: EvidenceBundle,
    *,
    verification_text: str | None = None,
) -> AnswerRecord:
    """Re-evaluate the options against summary plus verification results."""
    bindings = {
        "question": question.text,
        "options": format_options(question),
        "verification_outputs": verification_text
        if verification_text is not None
        else format_verification_outputs(clue, reports, evidence),
        "video summary": summary.text,
    }
    record = session.complete_structured("answer", bindings, ANSWER_SCHEMA)
    value = record["final_answer"]
    if not 0 <= value < len(question.options):
        corrective = Message(
            "user",
            f"The final_answer value {value} is not a valid option number for this "
            f"question. Reply again with final_answer as an integer between 0 and "
            f"{len(question.options) - 1}.",
        )
        record = session.complete_structured(
            "answer", bindings, ANSWER_SCHEMA, extra_messages=(corrective,)
        )
        value = record["final_answer"]
        if not 0 <= value < len(question.options):
            raise AnswerOutOfRange(value)
    return AnswerRecord(
        final_answer=value,
        reasoning_summary=record.get("reasoning_summary", ""),
        conflict_resolution=record.get("conflict_resolution", ""),
        explanation=record.get("explanation", ""),
    )


@contextmanager
def _timed(timings: dict, stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + (time.perf_counter() - start)


def _score_feedback(clue: Clue) -> str:
    parts = [
        f"The previous clue scored {clue.distinction_score:g} for distinction, "
        "below the regeneration threshold; the hypotheses were too similar to "
        "separate with video evidence."
    ]
    if clue.core_difference:
        parts.append(f"Claimed core difference: {clue.core_difference}")
    if clue.score_rationale:
        parts.append(f"Score rationale: {clue.score_rationale}")
    return " ".join(parts)


def _status_feedback(outcome: VerificationOutcome) -> str:
    report = outcome.reports[-1]
    parts = [f"Verification returned {report.status.value}."]
    if report.evidence_found:
        parts.append(f"Evidence found: {report.evidence_found}")
    if report.reasoning_steps:
        parts.append("Reasoning: " + " ".join(report.reasoning_steps))
    return " ".join(parts)


def _raw_options_block(question: Question) -> str:
    return "Raw answer options (no hypotheses were generated):\n" + format_options(question)


def run_pipeline(
    question: Question,
    track: CaptionTrack,
    *,
    backend: Backend,
    registry: TemplateRegistry,
    details: DetailCaptionCache,
    config: PipelineConfig | None = None,
) -> tuple[AnswerRecord, RunTrace]:
    """Execute the full loop for one question and return answer plus audit trace."""
    config = config or PipelineConfig()
    config.validate()
    session = LlmSession(
        backend,
        registry,
        parse_retries=config.parse_retries,
        temperature=config.temperature,
        tags={"question_id": question.id, "video_id": question.video_id},
    )
    timings: dict[str, float] = {}
    flags: list[str] = []
    start = time.perf_counter()

    with _timed(timings, "summarize"):
        summary = summarize(session, track, question, config.word_budget)
    if summary.over_budget:
        flags.append("summary_over_budget")

    if config.ablation == ABLATION_NO_VERIFICATION_STATUS:
        rounds = _single_pass_rounds(session, question, track, details, config, summary, timings, flags)
    elif config.ablation == ABLATION_NO_CLUE:
        rounds = _per_hypothesis_rounds(session, question, track, details, config, summary, timings, flags)
    else:
        rounds = _main_loop_rounds(session, question, track, details, config, summary, timings, flags)

    last = rounds[-1] if rounds else None
    verification_text = None
    if config.ablation == ABLATION_NO_CLUE and last is not None:
        verification_text = _per_option_text(last)
    answer = None
    with _timed(timings, "answer"):
        try:
            answer = integrate_answer(
                session,
                question,
                summary,
                last.clue if last else None,
                last.reports if last else (),
                last.evidence if last else EvidenceBundle(),
                verification_text=verification_text,
            )
        except (SchemaViolation, AnswerOutOfRange) as exc:
            flags.append("answer_failed")
            logger.warning("answer stage failed for %s: %s", question.id, exc)
            answer = AnswerRecord(
                final_answer=0,
                explanation=f"answer stage failed ({exc}); defaulting to option 0",
            )

    timings["total"] = time.perf_counter() - start
    counts = RunCounts(
        outer_loops=len(rounds),
        inner_loops_total=sum(len(r.reports) for r in rounds),
        llm_calls=len(session.ledger),
        detail_calls=sum(r.detail_requests for r in rounds),
    )
    trace = RunTrace(
        question_id=question.id,
        video_id=question.video_id,
        summary=summary,
        rounds=tuple(rounds),
        answer=answer,
        counts=counts,
        timings=timings,
        usage=session.ledger.totals(),
        flags=tuple(dict.fromkeys(flags)),
    )
    return answer, trace


def _attach_outcome(record: RoundRecord, outcome: VerificationOutcome) -> RoundRecord:
    record.reports = outcome.reports
    record.evidence = outcome.evidence
    record.window = outcome.window
    record.used_fallback = outcome.used_fallback
    record.partial_exhausted = outcome.partial_exhausted
    record.detail_requests = outcome.detail_requests
    return record


def _main_loop_rounds(session, question, track, details, config, summary, timings, flags):
    rounds: list[RoundRecord] = []
    previous: HypothesisSet | None = None
    next_mode: str | None = None
    feedback = ""
    skip_hypotheses = config.ablation == ABLATION_NO_HYPOTHESIS
    for round_index in range(1, config.max_outer_loops + 1):
        final_round = round_index == config.max_outer_loops
        record = RoundRecord(round_index, None, None)
        try:
            with _timed(timings, "reasoning"):
                hset = None
                if not skip_hypotheses:
                    if previous is None or next_mode is None:
                        hset = generate_hypotheses(session, question, summary)
                    else:
                        hset = refine_hypotheses(
                            session, question, previous, feedback, next_mode, summary
                        )
                record.hypotheses = hset
                if skip_hypotheses:
                    clue = generate_clue_from_options(session, question, summary)
                else:
                    clue = generate_clue(session, question, hset, summary)
                record.clue = clue
        except _DEGRADABLE as exc:
            flags.append("stage_error:reasoning")
            logger.warning("reasoning stage failed for %s: %s", question.id, exc)
            rounds.append(record)
            break

        pre_mode = select_regeneration_mode(clue, None, config.distinction_threshold)
        if pre_mode == MODE_DISCRIMINABILITY and not final_round:
            record.regeneration_mode = MODE_DISCRIMINABILITY
            rounds.append(record)
            previous, next_mode, feedback = hset, MODE_DISCRIMINABILITY, _score_feedback(clue)
            if skip_hypotheses:
                previous, next_mode = None, None
            continue
        if pre_mode == MODE_DISCRIMINABILITY:
            flags.append("low_score_final_round")

        try:
            with _timed(timings, "verification"):
                outcome = run_verification(
                    session,
                    question,
                    clue.text,
                    track,
                    details,
                    inner_max=config.inner_max,
                    localizer=config.localizer,
                    window_width=min(config.detail_frame_cap, 5),
                )
        except _DEGRADABLE as exc:
            flags.append("stage_error:verification")
            logger.warning("verification stage failed for %s: %s", question.id, exc)
            rounds.append(record)
            break
        _attach_outcome(record, outcome)
        if outcome.used_fallback:
            flags.append("localization_fallback")

        post_mode = select_regeneration_mode(None, outcome.status, config.distinction_threshold)
        if post_mode == MODE_SPECIFICITY and not final_round:
            record.regeneration_mode = MODE_SPECIFICITY
            rounds.append(record)
            previous, next_mode, feedback = hset, MODE_SPECIFICITY, _status_feedback(outcome)
            if skip_hypotheses:
                previous, next_mode = None, None
            continue
        rounds.append(record)
        if outcome.status is Status.NOT_VERIFIED:
            flags.append("loop_exhausted")
        if outcome.partial_exhausted:
            flags.append("partial_exhausted")
        break
    return rounds


def generate_clue_from_options(session, question: Question, summary: Summary) -> Clue:
    """Hypothesis-free variant: distill the clue from the raw option texts."""
    from .reasoning import CLUE_SCHEMA

    bindings = {
        "question": question.text,
        "hypotheses": _raw_options_block(question),
        "video summary": summary.text,
    }
    record = session.complete_structured("clue", bindings, CLUE_SCHEMA)
    clue_text = record["clue"]
    if isinstance(clue_text, list):
        clue_text = clue_text[0]
    return Clue(
        text=clue_text,
        distinction_score=record["distinction_score"],
        score_rationale=record.get("rationale", ""),
        core_difference=record.get("core_difference", ""),
    )


def _per_hypothesis_rounds(session, question, track, details, config, summary, timings, flags):
    """Clue-free ablation: verify every hypothesis statement directly."""
    record = RoundRecord(1, None, None)
    try:
        with _timed(timings, "reasoning"):
            hset = generate_hypotheses(session, question, summary)
        record.hypotheses = hset
    except _DEGRADABLE as exc:
        flags.append("stage_error:reasoning")
        logger.warning("reasoning stage failed for %s: %s", question.id, exc)
        return [record]

    reports: list[VerificationReport] = []
    evidence = EvidenceBundle()
    per_option: dict[int, str] = {}
    detail_requests = 0
    for hypothesis in hset.hypotheses:
        try:
            with _timed(timings, "verification"):
                outcome = run_verification(
                    session,
                    question,
                    hypothesis.statement,
                    track,
                    details,
                    inner_max=config.inner_max,
                    localizer=config.localizer,
                    window_width=min(config.detail_frame_cap, 5),
                )
        except _DEGRADABLE as exc:
            flags.append("stage_error:verification")
            logger.warning(
                "verification failed for %s option %d: %s",
                question.id,
                hypothesis.option_index,
                exc,
            )
            per_option[hypothesis.option_index] = "ERROR"
            continue
        per_option[hypothesis.option_index] = outcome.status.value
        reports.extend(outcome.reports)
        for item in outcome.evidence.items:
            evidence = evidence.extended(item)
        detail_requests += outcome.detail_requests
        if outcome.used_fallback:
            flags.append("localization_fallback")
    record.reports = tuple(reports)
    record.evidence = evidence
    record.per_option_status = per_option
    record.detail_requests = detail_requests
    return [record]


def _per_option_text(record: RoundRecord) -> str:
    """Answer-prompt context for the clue-free ablation: one block per option."""
    if record.hypotheses is None or record.per_option_status is None:
        return "No verification results are available; rely on the context summary."
    blocks = []
    verified = [i for i, s in record.per_option_status.items() if s == Status.VERIFIED.value]
    for h in record.hypotheses.hypotheses:
        status = record.per_option_status.get(h.option_index, "ERROR")
        blocks.append(f"Option {h.option_index} hypothesis: {h.statement}\n  Status: {status}")
    blocks.append(
        "Tally: "
        + (
            f"options {sorted(verified)} were verified by direct inspection."
            if verified
            else "no option was verified by direct inspection."
        )
    )
    return "\n\n".join(blocks)


def _single_pass_rounds(session, question, track, details, config, summary, timings, flags):
    """Status-free ablation: one round, one verdict, no loops of either kind."""
    record = RoundRecord(1, None, None)
    try:
        with _timed(timings, "reasoning"):
            hset = generate_hypotheses(session, question, summary)
            record.hypotheses = hset
            clue = generate_clue(session, question, hset, summary)
            record.clue = clue
    except _DEGRADABLE as exc:
        flags.append("stage_error:reasoning")
        logger.warning("reasoning stage failed for %s: %s", question.id, exc)
        return [record]
    try:
        with _timed(timings, "verification"):
            outcome = run_verification(
                session,
                question,
                clue.text,
                track,
                details,
                inner_max=1,
                localizer=config.localizer,
                window_width=min(config.detail_frame_cap, 5),
            )
    except _DEGRADABLE as exc:
        flags.append("stage_error:verification")
        logger.warning("verification stage failed for %s: %s", question.id, exc)
        return [record]
    _attach_outcome(record, outcome)
    record.partial_exhausted = False  # status is ignored in this mode
    if outcome.used_fallback:
        flags.append("localization_fallback")
    return [record]
