from __future__ import annotations

import threading

import pytest

from hvqa.corpus import CaptionTrack, FrameCaption, FrameRange, Question
from hvqa.gateway import CompletionRequest, CompletionResponse
from hvqa.prompts import TemplateRegistry


def make_track(texts, video_id="vid", fps=1.0) -> CaptionTrack:
    frames = tuple(FrameCaption(index=i, text=t) for i, t in enumerate(texts, start=1))
    return CaptionTrack(video_id=video_id, frames=frames, fps=fps)


def make_question(options=None, qid="q1", video_id="vid", gold=None, text="What happens?"):
    return Question(
        id=qid,
        video_id=video_id,
        text=text,
        options=tuple(options or ("alpha", "beta", "gamma", "delta", "epsilon")),
        gold=gold,
    )


class RecordingBackend:
    """Wraps a backend and keeps every request for prompt inspection."""

    def __init__(self, inner):
        self.inner = inner
        self.requests: list[CompletionRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.requests.append(request)
        return self.inner.complete(request)

    @property
    def calls(self) -> int:
        return len(self.requests)


class CountingProvider:
    """Wraps a detail provider and records every dispatched window width."""

    def __init__(self, inner):
        self.inner = inner
        self.widths: list[int] = []
        self._lock = threading.Lock()

    def fetch(self, video_id: str, window: FrameRange):
        with self._lock:
            self.widths.append(window.width)
        return self.inner.fetch(video_id, window)

    @property
    def calls(self) -> int:
        return len(self.widths)

    @property
    def max_width(self) -> int:
        return max(self.widths, default=0)


@pytest.fixture(scope="session")
def registry() -> TemplateRegistry:
    return TemplateRegistry()
