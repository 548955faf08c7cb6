"""Hypothesis-verification question answering over frame-captioned long videos.

The pipeline summarizes per-frame captions, rewrites answer options into
testable hypotheses, distills a discriminative clue, grounds and checks
the clue against localized fine-grained evidence with bounded
self-refinement, and integrates the verified evidence into an answer.
"""

from .corpus import (
    CaptionTrack,
    DetailCaptionCache,
    FrameCaption,
    FrameRange,
    Question,
    load_caption_track,
    load_questions,
    slice_captions,
)
from .gateway import (
    CompletionRequest,
    CompletionResponse,
    HttpBackend,
    LlmSession,
    OutputSchema,
    ScriptedBackend,
    extract_structured,
)
from .harness import EvalReport, EvalResult, accuracy, evaluate, loop_histogram
from .orchestrator import AnswerRecord, PipelineConfig, RunTrace, run_pipeline
from .prompts import TemplateRegistry
from .reasoning import Clue, Hypothesis, HypothesisSet, Summary
from .synthworld import World, WorldSpec, generate_world, oracle_answer
from .verification import Status, VerificationReport, localize_lexical, run_verification

__version__ = "0.1.0"

__all__ = [
    "AnswerRecord",
    "CaptionTrack",
    "Clue",
    "CompletionRequest",
    "CompletionResponse",
    "DetailCaptionCache",
    "EvalReport",
    "EvalResult",
    "FrameCaption",
    "FrameRange",
    "HttpBackend",
    "Hypothesis",
    "HypothesisSet",
    "LlmSession",
    "OutputSchema",
    "PipelineConfig",
    "Question",
    "RunTrace",
    "ScriptedBackend",
    "Status",
    "Summary",
    "TemplateRegistry",
    "VerificationReport",
    "World",
    "WorldSpec",
    "accuracy",
    "evaluate",
    "extract_structured",
    "generate_world",
    "load_caption_track",
    "load_questions",
    "localize_lexical",
    "loop_histogram",
    "oracle_answer",
    "run_pipeline",
    "run_verification",
    "slice_captions",
]
