"""Batch evaluation, metrics, and trace persistence.

Questions run through the pipeline under a bounded worker pool; each
per-question failure becomes an error record instead of aborting the
batch. Traces are newline-delimited JSON. The determinism digest is
computed over timing-zeroed traces sorted by question id, so it is
independent of parallelism and wall-clock noise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import CaptionTrack, DetailCaptionCache, DetailProvider, Question
from .errors import HvqaError
from .gateway import Backend, Usage
from .orchestrator import PipelineConfig, run_pipeline
from .prompts import TemplateRegistry

logger = logging.getLogger(__name__)

# Keys stripped (recursively) before hashing a trace.
TIMING_KEYS = frozenset({"timings", "wall_seconds", "latency", "mean_wall_seconds"})


class HarnessError(HvqaError):
    pass


class UnresolvedVideo(HarnessError):
    def __init__(self, video_id: str):
        self.video_id = video_id
        super().__init__(f"no caption track loaded for video {video_id!r}")


class NoGoldLabels(HarnessError):
    pass


class EmptyInput(HarnessError):
    pass


@dataclass
class EvalResult:
    question_id: str
    predicted: int | None
    gold: int | None
    correct: bool | None
    wall_seconds: float
    outer_loops: int
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "predicted": self.predicted,
            "gold": self.gold,
            "correct": self.correct,
            "wall_seconds": self.wall_seconds,
            "outer_loops": self.outer_loops,
            "error": self.error,
        }


@dataclass
class EvalReport:
    results: list[EvalResult]
    accuracy: float | None
    mean_wall_seconds: float
    loop_histogram: dict[int, float]
    usage: Usage
    config: dict
    traces: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "num_questions": len(self.results),
            "accuracy": self.accuracy,
            "mean_wall_seconds": self.mean_wall_seconds,
            "loop_histogram": {str(k): round(v, 4) for k, v in sorted(self.loop_histogram.items())},
            "usage": {
                "prompt_units": self.usage.prompt_units,
                "completion_units": self.usage.completion_units,
            },
            "config": self.config,
            "results": [r.to_dict() for r in self.results],
        }


def accuracy(results: Sequence[EvalResult]) -> float:
    """Fraction correct among gold-labeled results, reported to 4 decimals."""
    labeled = [r for r in results if r.gold is not None]
    if not labeled:
        raise NoGoldLabels("no result carries a gold label")
    correct = sum(1 for r in labeled if r.correct)
    return round(correct / len(labeled), 4)


def loop_histogram(traces: Iterable[Mapping]) -> dict[int, float]:
    """Fraction of traces per outer-loop count (exact fractions, unrounded)."""
    counts: dict[int, int] = {}
    total = 0
    for trace in traces:
        loops = int(trace["counts"]["outer_loops"])
        counts[loops] = counts.get(loops, 0) + 1
        total += 1
    if total == 0:
        raise EmptyInput("no traces given")
    return {loops: n / total for loops, n in sorted(counts.items())}


def strip_timing_fields(obj):
    if isinstance(obj, dict):
        return {k: strip_timing_fields(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing_fields(v) for v in obj]
    return obj


def trace_digest(trace: Mapping) -> str:
    canonical = json.dumps(strip_timing_fields(dict(trace)), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def batch_digest(traces: Iterable[Mapping]) -> str:
    """Order-independent digest of a trace batch (sorted by question id)."""
    ordered = sorted(traces, key=lambda t: str(t.get("question_id", "")))
    joined = "\n".join(trace_digest(t) for t in ordered)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def write_traces(traces: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace, ensure_ascii=False) + "\n")


def load_traces(path: str | Path) -> list[dict]:
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                traces.append(json.loads(line))
    return traces


def results_from_traces(traces: Iterable[Mapping]) -> list[EvalResult]:
    """Rebuild result rows from persisted traces (for metric recomputation)."""
    results = []
    for trace in traces:
        ev = trace.get("eval", {})
        results.append(
            EvalResult(
                question_id=str(trace.get("question_id", "")),
                predicted=ev.get("predicted"),
                gold=ev.get("gold"),
                correct=ev.get("correct"),
                wall_seconds=float(ev.get("wall_seconds", 0.0)),
                outer_loops=int(trace.get("counts", {}).get("outer_loops", 0)),
                error=trace.get("error"),
            )
        )
    return results


def report_from_traces(traces: Sequence[Mapping], config: Mapping | None = None) -> EvalReport:
    """Recompute the full report from persisted traces."""
    results = results_from_traces(traces)
    usable = [t for t in traces if "counts" in t]
    usage = Usage()
    for t in usable:
        u = t.get("usage", {})
        usage = usage + Usage(int(u.get("prompt_units", 0)), int(u.get("completion_units", 0)))
    try:
        acc = accuracy(results)
    except NoGoldLabels:
        acc = None
    return EvalReport(
        results=results,
        accuracy=acc,
        mean_wall_seconds=(
            sum(r.wall_seconds for r in results) / len(results) if results else 0.0
        ),
        loop_histogram=loop_histogram(usable) if usable else {},
        usage=usage,
        config=dict(config or {}),
        traces=list(traces),
    )


def evaluate(
    questions: Sequence[Question],
    tracks: Mapping[str, CaptionTrack],
    *,
    backend: Backend,
    details: DetailCaptionCache | DetailProvider,
    registry: TemplateRegistry | None = None,
    config: PipelineConfig | None = None,
    parallelism: int = 1,
    trace_path: str | Path | None = None,
) -> EvalReport:
    """Run the pipeline over a question set with bounded parallelism."""
    registry = registry or TemplateRegistry()
    config = config or PipelineConfig()
    config.validate()
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if not isinstance(details, DetailCaptionCache):
        details = DetailCaptionCache(provider=details, frame_cap=config.detail_frame_cap)

    write_lock = threading.Lock()
    trace_file = open(trace_path, "w", encoding="utf-8") if trace_path else None
    results: list[EvalResult | None] = [None] * len(questions)
    traces: list[dict | None] = [None] * len(questions)

    def _emit(position: int, result: EvalResult, trace: dict) -> None:
        results[position] = result
        traces[position] = trace
        if trace_file is not None:
            with write_lock:
                trace_file.write(json.dumps(trace, ensure_ascii=False) + "\n")
                trace_file.flush()

    def _run_one(position: int, question: Question) -> None:
        start = time.perf_counter()
        track = tracks.get(question.video_id)
        if track is None:
            error = UnresolvedVideo(question.video_id)
            logger.warning("question %s: %s", question.id, error)
            _emit(
                position,
                EvalResult(
                    question_id=question.id,
                    predicted=None,
                    gold=question.gold,
                    correct=False if question.gold is not None else None,
                    wall_seconds=time.perf_counter() - start,
                    outer_loops=0,
                    error=str(error),
                ),
                {"question_id": question.id, "error": str(error)},
            )
            return
        try:
            answer, trace = run_pipeline(
                question,
                track,
                backend=backend,
                registry=registry,
                details=details,
                config=config,
            )
        except HvqaError as exc:
            logger.warning("question %s failed: %s", question.id, exc)
            _emit(
                position,
                EvalResult(
                    question_id=question.id,
                    predicted=None,
                    gold=question.gold,
                    correct=False if question.gold is not None else None,
                    wall_seconds=time.perf_counter() - start,
                    outer_loops=0,
                    error=str(exc),
                ),
                {"question_id": question.id, "error": str(exc)},
            )
            return
        wall = time.perf_counter() - start
        predicted = answer.final_answer
        correct = (predicted == question.gold) if question.gold is not None else None
        trace_dict = trace.to_dict()
        trace_dict["eval"] = {
            "predicted": predicted,
            "gold": question.gold,
            "correct": correct,
            "wall_seconds": wall,
        }
        _emit(
            position,
            EvalResult(
                question_id=question.id,
                predicted=predicted,
                gold=question.gold,
                correct=correct,
                wall_seconds=wall,
                outer_loops=trace.counts.outer_loops,
            ),
            trace_dict,
        )

    try:
        if parallelism == 1:
            for position, question in enumerate(questions):
                _run_one(position, question)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = [
                    pool.submit(_run_one, position, question)
                    for position, question in enumerate(questions)
                ]
                for future in futures:
                    future.result()
    finally:
        if trace_file is not None:
            trace_file.close()

    final_results = [r for r in results if r is not None]
    final_traces = [t for t in traces if t is not None]
    try:
        acc = accuracy(final_results)
    except NoGoldLabels:
        acc = None
    pipeline_traces = [t for t in final_traces if "counts" in t]
    usage = Usage()
    for t in pipeline_traces:
        u = t.get("usage", {})
        usage = usage + Usage(int(u.get("prompt_units", 0)), int(u.get("completion_units", 0)))
    return EvalReport(
        results=final_results,
        accuracy=acc,
        mean_wall_seconds=(
            sum(r.wall_seconds for r in final_results) / len(final_results)
            if final_results
            else 0.0
        ),
        loop_histogram=loop_histogram(pipeline_traces) if pipeline_traces else {},
        usage=usage,
        config=config.to_dict(),
        traces=final_traces,
    )
