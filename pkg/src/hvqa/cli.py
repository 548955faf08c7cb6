"""Command-line entry points: `hv run`, `hv report`, `hv synth`."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .corpus import (
    DetailCaptionCache,
    MissingFile,
    NullDetails,
    PrecomputedDetails,
    load_caption_dir,
    load_questions,
)
from .errors import HvqaError
from .gateway import CompositeScriptedBackend, HttpBackend, ScriptedBackend
from .harness import batch_digest, evaluate, load_traces, report_from_traces, write_traces
from .orchestrator import ABLATIONS, LOCALIZERS, ConfigInvalid, PipelineConfig
from .prompts import TemplateRegistry
from .synthworld import WorldSpec, generate_world, write_worlds


@click.group()
def main():
    """Hypothesis-verification question answering over frame-captioned videos."""


def _build_backend(spec: str):
    if spec == "http":
        return HttpBackend()
    if spec.startswith("script:"):
        path = Path(spec[len("script:"):])
        if path.is_dir():
            return CompositeScriptedBackend.from_dir(path)
        if path.is_file():
            return ScriptedBackend.from_file(path)
        raise ConfigInvalid(f"script path {path} does not exist")
    raise ConfigInvalid(f"backend must be 'http' or 'script:PATH', got {spec!r}")


def _build_details(path: str | None):
    if path is None:
        return NullDetails()
    p = Path(path)
    if p.is_dir():
        return PrecomputedDetails.from_dir(p)
    if p.is_file():
        return PrecomputedDetails.from_file(p)
    raise ConfigInvalid(f"details path {p} does not exist")


@main.command()
@click.option("--captions", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--questions", "questions_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--details", default=None, type=click.Path(exists=True))
@click.option("--backend", "backend_spec", required=True, help="'http' or 'script:PATH'")
@click.option("--templates", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--max-loops", default=3, show_default=True)
@click.option("--inner-max", default=2, show_default=True)
@click.option("--word-budget", default=300, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--localizer", default="model", type=click.Choice(LOCALIZERS), show_default=True)
@click.option("--ablation", default="none", type=click.Choice(ABLATIONS), show_default=True)
@click.option("--parallelism", default=1, show_default=True)
@click.option("--trace-out", default=None, type=click.Path(dir_okay=False))
@click.option("--report-out", default=None, type=click.Path(dir_okay=False))
def run(
    captions,
    questions_path,
    details,
    backend_spec,
    templates,
    max_loops,
    inner_max,
    word_budget,
    threshold,
    localizer,
    ablation,
    parallelism,
    trace_out,
    report_out,
):
    """Evaluate a question set against loaded caption tracks."""
    try:
        config = PipelineConfig(
            max_outer_loops=max_loops,
            inner_max=inner_max,
            word_budget=word_budget,
            distinction_threshold=threshold,
            localizer=localizer,
            ablation=ablation,
        )
        config.validate()
        if parallelism < 1:
            raise ConfigInvalid("parallelism must be >= 1")
        backend = _build_backend(backend_spec)
        provider = _build_details(details)
        tracks = load_caption_dir(captions)
        question_set = load_questions(questions_path)
        registry = TemplateRegistry(overrides_dir=templates)
    except (ConfigInvalid, MissingFile) as exc:
        raise click.UsageError(str(exc))

    report = evaluate(
        question_set,
        tracks,
        backend=backend,
        details=DetailCaptionCache(provider=provider, frame_cap=config.detail_frame_cap),
        registry=registry,
        config=config,
        parallelism=parallelism,
        trace_path=trace_out,
    )
    payload = report.to_dict()
    payload["trace_digest"] = batch_digest(report.traces)
    text = json.dumps(payload, indent=2)
    if report_out:
        Path(report_out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)
    if report.accuracy is not None:
        click.echo(f"accuracy: {report.accuracy:.4f}", err=True)
    sys.exit(0)


@main.command()
@click.option("--traces", "traces_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--report-out", default=None, type=click.Path(dir_okay=False))
def report(traces_path, report_out):
    """Recompute metrics from a persisted trace file."""
    try:
        traces = load_traces(traces_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read traces: {exc}")
    recomputed = report_from_traces(traces)
    payload = recomputed.to_dict()
    payload["trace_digest"] = batch_digest(traces)
    text = json.dumps(payload, indent=2)
    if report_out:
        Path(report_out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@main.command()
@click.option("--seed", default=1, show_default=True, help="First seed of the batch.")
@click.option("--count", default=10, show_default=True, help="Number of worlds (consecutive seeds).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--frames", default=60, show_default=True)
@click.option("--options", "num_options", default=5, show_default=True)
@click.option("--distractor-rate", default=0.15, show_default=True)
def synth(seed, count, out_dir, frames, num_options, distractor_rate):
    """Generate deterministic synthetic worlds with scripts and gold answers."""
    try:
        if count < 1:
            raise ConfigInvalid("count must be >= 1")
        worlds = [
            generate_world(
                WorldSpec(
                    seed=s,
                    num_frames=frames,
                    num_options=num_options,
                    distractor_rate=distractor_rate,
                )
            )
            for s in range(seed, seed + count)
        ]
    except HvqaError as exc:
        raise click.UsageError(str(exc))
    manifest_path = write_worlds(worlds, out_dir)
    click.echo(f"wrote {len(worlds)} worlds; manifest at {manifest_path}")


if __name__ == "__main__":
    main()
