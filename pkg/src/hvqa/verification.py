"""Second reasoning step: ground the clue, fetch capped evidence, verify.

A verification round localizes a small frame window, pulls fine-grained
captions for it (never more than the frame cap in one request), and asks
for a verdict. A partially-verified verdict names a follow-up window and
drives a bounded evidence-only loop; a not-verified verdict returns to
the orchestrator immediately so hypotheses and clue can be regenerated.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass

from .corpus import (
    CaptionTrack,
    CorpusError,
    DetailCaptionCache,
    FrameRange,
    Question,
    full_range,
    slice_captions,
)
from .errors import HvqaError
from .gateway import (
    ENUM,
    INT_PAIR,
    TEXT,
    TEXT_LIST,
    FieldSpec,
    InvalidRecord,
    LlmSession,
    OutputSchema,
)

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_WIDTH = 5
FOLLOWUP_WIDTH_CAP = 5


class VerificationError(HvqaError):
    pass


class EmptyClue(VerificationError):
    pass


class LocalizationFailed(VerificationError):
    pass


class UnknownStatus(InvalidRecord):
    def __init__(self, text: str):
        super().__init__(f"unknown verification status {text!r}")


class Status(str, enum.Enum):
    VERIFIED = "VERIFIED"
    PARTIAL = "PARTIAL"
    NOT_VERIFIED = "NOT_VERIFIED"


_STATUS_BY_WIRE = {
    "verified": Status.VERIFIED,
    "partially_verified": Status.PARTIAL,
    "not_verified": Status.NOT_VERIFIED,
}

SOURCE_FRAME_CAPTION = "frame-caption"
SOURCE_DETAIL_CAPTION = "detail-caption"

# Fixed function-word list used by the lexical localizer (30 words).
STOPWORDS = frozenset(
    {
        "a", "an", "and", "are", "as", "at", "be", "been", "but", "by",
        "for", "from", "if", "in", "is", "it", "its", "of", "on", "or",
        "that", "the", "this", "those", "to", "was", "were", "which",
        "while", "with",
    }
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def content_tokens(text: str) -> set[str]:
    return set(tokenize(text)) - STOPWORDS


@dataclass(frozen=True)
class EvidenceItem:
    window: FrameRange
    text: str
    source: str  # SOURCE_FRAME_CAPTION or SOURCE_DETAIL_CAPTION

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("evidence item must carry text")
        if self.source not in (SOURCE_FRAME_CAPTION, SOURCE_DETAIL_CAPTION):
            raise ValueError(f"unknown evidence source {self.source!r}")


@dataclass(frozen=True)
class EvidenceBundle:
    """Evidence in acquisition order; grows append-only across iterations."""

    items: tuple[EvidenceItem, ...] = ()

    def extended(self, item: EvidenceItem) -> "EvidenceBundle":
        return EvidenceBundle(self.items + (item,))

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Followup:
    needed_evidence: str
    window: FrameRange


@dataclass(frozen=True)
class VerificationReport:
    clue_understanding: str
    evidence_found: str
    reasoning_steps: tuple[str, ...]
    status: Status
    followup: Followup | None = None

    def __post_init__(self):
        if self.status is Status.PARTIAL and self.followup is None:
            raise InvalidRecord("partially-verified verdict must name follow-up evidence")
        if self.status is Status.VERIFIED and not self.reasoning_steps:
            raise InvalidRecord("verified verdict must carry reasoning steps")
        if self.followup is not None and self.followup.window.width > FOLLOWUP_WIDTH_CAP:
            raise InvalidRecord(
                f"follow-up window of {self.followup.window.width} frames exceeds "
                f"the cap of {FOLLOWUP_WIDTH_CAP}"
            )


VERIFY_SCHEMA = OutputSchema(
    "verification",
    fields={
        "clue_understanding": FieldSpec(TEXT),
        "evidence_found": FieldSpec(TEXT),
        "reasoning_trace": FieldSpec(TEXT_LIST),
        "verification_result": FieldSpec(
            ENUM, values=("verified", "partially_verified", "not_verified")
        ),
        "followup_needed": FieldSpec(TEXT),
        "followup_range": FieldSpec(INT_PAIR),
    },
    required=frozenset({"clue_understanding", "evidence_found", "reasoning_trace", "verification_result"}),
)


def _report_from_record(record: dict) -> VerificationReport:
    wire_status = record["verification_result"]
    status = _STATUS_BY_WIRE.get(wire_status)
    if status is None:
        raise UnknownStatus(wire_status)
    followup = None
    if "followup_range" in record:
        start, end = record["followup_range"]
        try:
            window = FrameRange(start, end)
        except CorpusError as exc:
            raise InvalidRecord(f"bad follow-up range [{start}, {end}]: {exc}") from exc
        followup = Followup(
            needed_evidence=record.get("followup_needed", ""),
            window=window,
        )
    return VerificationReport(
        clue_understanding=record["clue_understanding"],
        evidence_found=record["evidence_found"],
        reasoning_steps=tuple(record["reasoning_trace"]),
        status=status,
        followup=followup,
    )


def _validate_report(record: dict) -> None:
    _report_from_record(record)


# Grounding prompt; this one is artifact plumbing, not part of the
# seven-template registry, so it lives here as a constant.
LOCALIZE_PROMPT = """You ground observations in a frame-captioned video.
Given the clue below and the per-second frame captions, pick the single
most probable window of consecutive frames where the clue could be
checked. Reply with exactly one line of the form "frames A-B" using
1-based frame numbers, nothing else.

Clue: {clue}

Frame captions:
{frame captions}
"""

_SPAN_RE = re.compile(r"(\d+)\s*(?:-|–|—|to|through|,)\s*(\d+)")
_SINGLE_RE = re.compile(r"\bframes?\s+(\d+)\b")


def parse_frame_span(text: str) -> tuple[int, int] | None:
    match = _SPAN_RE.search(text)
    if match:
        a, b = int(match.group(1)), int(match.group(2))
        return (a, b) if a <= b else (b, a)
    match = _SINGLE_RE.search(text)
    if match:
        n = int(match.group(1))
        return (n, n)
    return None


def localize_lexical(clue_text: str, track: CaptionTrack, width: int = DEFAULT_WINDOW_WIDTH) -> FrameRange:
    """Deterministic grounding: the window maximizing clue-token coverage.

    Score of a window is |tokens(clue) ∩ tokens(window captions)| divided
    by |tokens(clue)|; ties break toward the earliest start; the width is
    clamped to the track length.
    """
    clue_tokens = content_tokens(clue_text)
    if not clue_tokens:
        raise EmptyClue("clue has no content tokens after stopword removal")
    w = min(width, track.length)
    frame_tokens = [content_tokens(f.text) & clue_tokens for f in track.frames]
    best_start, best_hits = 1, -1
    for start in range(1, track.length - w + 2):
        window_hits = set()
        for offset in range(w):
            window_hits |= frame_tokens[start - 1 + offset]
        if len(window_hits) > best_hits:
            best_start, best_hits = start, len(window_hits)
    return FrameRange(best_start, best_start + w - 1)


@dataclass(frozen=True)
class LocalizeResult:
    window: FrameRange
    used_fallback: bool = False


def localize(
    session: LlmSession,
    clue_text: str,
    track: CaptionTrack,
    method: str = "model",
    width: int = DEFAULT_WINDOW_WIDTH,
) -> LocalizeResult:
    """Pick the frame window to inspect; falls back to the lexical method
    whenever the model output cannot be read as a window."""
    if not clue_text.strip():
        raise EmptyClue("cannot localize an empty clue")
    if method == "lexical":
        return LocalizeResult(localize_lexical(clue_text, track, width))
    if method != "model":
        raise ValueError(f"unknown localization method {method!r}")
    prompt = LOCALIZE_PROMPT.format(**{
        "clue": clue_text,
        "frame captions": slice_captions(track, full_range(track)),
    })
    reply = session.complete_prompt(prompt, "localize")
    span = parse_frame_span(reply)
    if span is not None:
        window = FrameRange(min(span), max(span)) if span[0] >= 1 else None
        window = window.clamped(track.length) if window is not None else None
        if window is not None:
            if window.width > width:
                window = FrameRange(window.start, window.start + width - 1)
            return LocalizeResult(window)
    logger.debug("model localization unusable (%r); falling back to lexical", reply)
    try:
        return LocalizeResult(localize_lexical(clue_text, track, width), used_fallback=True)
    except EmptyClue as exc:
        raise LocalizationFailed(f"model and lexical grounding both failed: {exc}") from exc


def render_evidence(caption_slice: str, evidence: EvidenceBundle) -> str:
    """Build the frame-caption context block for the verification prompt."""
    parts = []
    if caption_slice:
        parts.append(caption_slice)
    for item in evidence.items:
        label = "Detail captions" if item.source == SOURCE_DETAIL_CAPTION else "Frame captions"
        parts.append(f"{label} (t={item.window.start}-{item.window.end}s):\n{item.text}")
    return "\n\n".join(parts)


def verify_once(
    session: LlmSession,
    question: Question,
    clue_text: str,
    evidence: EvidenceBundle,
    caption_slice: str = "",
) -> VerificationReport:
    """One verdict over the current evidence context."""
    if not evidence.items and not caption_slice:
        raise ValueError("verification needs evidence or a caption slice")
    bindings = {
        "question": question.text,
        "clue": clue_text,
        "frame caption": render_evidence(caption_slice, evidence),
    }
    record = session.complete_structured(
        "verify", bindings, VERIFY_SCHEMA, validator=_validate_report
    )
    return _report_from_record(record)


def _format_details(pairs: list[tuple[int, str]]) -> str:
    return "\n".join(f"t={i}s: {text}" for i, text in pairs)


@dataclass
class VerificationOutcome:
    status: Status
    evidence: EvidenceBundle
    reports: tuple[VerificationReport, ...]
    window: FrameRange
    used_fallback: bool = False
    partial_exhausted: bool = False
    fetch_errors: tuple[str, ...] = ()
    detail_requests: int = 0


def run_verification(
    session: LlmSession,
    question: Question,
    clue_text: str,
    track: CaptionTrack,
    details: DetailCaptionCache,
    *,
    inner_max: int = 2,
    localizer: str = "model",
    window_width: int = DEFAULT_WINDOW_WIDTH,
) -> VerificationOutcome:
    """Localize, fetch capped detail evidence, and iterate while partial.

    Detail-fetch failures degrade to coarse captions of the same window
    rather than aborting. When `inner_max` verdicts are all partial the
    accumulated evidence is treated as best effort and the exhaustion is
    flagged for the trace.
    """
    if inner_max < 1:
        raise ValueError("inner_max must be >= 1")
    located = localize(session, clue_text, track, method=localizer, width=window_width)
    window = located.window
    caption_slice = (
        f"Frame captions (t={window.start}-{window.end}s):\n{slice_captions(track, window)}"
    )
    evidence = EvidenceBundle()
    fetch_errors: list[str] = []
    detail_requests = 0

    try:
        detail_requests += 1
        pairs = details.get(track.video_id, window)
        evidence = evidence.extended(
            EvidenceItem(window, _format_details(pairs), SOURCE_DETAIL_CAPTION)
        )
    except CorpusError as exc:
        fetch_errors.append(str(exc))
        logger.debug("initial detail fetch failed: %s", exc)

    reports: list[VerificationReport] = []
    partial_exhausted = False
    while True:
        report = verify_once(session, question, clue_text, evidence, caption_slice)
        reports.append(report)
        if report.status is not Status.PARTIAL:
            break
        if len(reports) >= inner_max:
            partial_exhausted = True
            break
        followup_window = report.followup.window.clamped(track.length)
        if followup_window is None:
            fetch_errors.append(
                f"follow-up window {report.followup.window.as_pair()} outside track"
            )
            continue
        try:
            detail_requests += 1
            pairs = details.get(track.video_id, followup_window)
            evidence = evidence.extended(
                EvidenceItem(followup_window, _format_details(pairs), SOURCE_DETAIL_CAPTION)
            )
        except CorpusError as exc:
            fetch_errors.append(str(exc))
            evidence = evidence.extended(
                EvidenceItem(
                    followup_window,
                    slice_captions(track, followup_window),
                    SOURCE_FRAME_CAPTION,
                )
            )
    return VerificationOutcome(
        status=reports[-1].status,
        evidence=evidence,
        reports=tuple(reports),
        window=window,
        used_fallback=located.used_fallback,
        partial_exhausted=partial_exhausted,
        fetch_errors=tuple(fetch_errors),
        detail_requests=detail_requests,
    )
