"""Caption tracks, question sets, and detail-caption providers.

This is the only module that reads dataset files. Loaded corpora are
immutable and safe to share across concurrently running pipelines; the
detail-caption cache is the single shared mutable structure and is
lock-protected.

File formats (UTF-8 JSON):
  caption track:   {"video_id": str, "fps": number, "frames": [{"index": int, "text": str}, ...]}
  question set:    [{"id": str, "video_id": str, "question": str, "options": [str, ...], "answer": int?}, ...]
  detail captions: {"video_id": str, "details": {"<index>": str, ...}}
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import requests

from .errors import HvqaError

DEFAULT_DETAIL_FRAME_CAP = 5


class CorpusError(HvqaError):
    pass


class MissingFile(CorpusError):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"{message} (record {line})")


class NonContiguousIndices(CorpusError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"expected frame index {expected}, found {found}")


class TooFewOptions(CorpusError):
    def __init__(self, question_id: str, count: int):
        self.question_id = question_id
        super().__init__(f"question {question_id!r} has {count} option(s); at least 2 required")


class RangeOutOfBounds(CorpusError):
    pass


class FrameCapExceeded(CorpusError):
    def __init__(self, width: int, cap: int):
        self.width = width
        self.cap = cap
        super().__init__(f"requested {width} frames, cap is {cap}")


class ProviderUnavailable(CorpusError):
    pass


class MissingDetail(CorpusError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"no detail caption for frame {index}")


@dataclass(frozen=True)
class FrameCaption:
    """One caption sentence for one 1-second frame, 1-based index."""

    index: int
    text: str

    def __post_init__(self):
        if self.index < 1:
            raise MalformedRecord(f"frame index must be >= 1, got {self.index}")
        if not self.text.strip():
            raise MalformedRecord(f"frame {self.index} has empty caption text")


@dataclass(frozen=True)
class CaptionTrack:
    """Ordered per-frame captions for one video, sampled at `fps` frames/second."""

    video_id: str
    frames: tuple[FrameCaption, ...]
    fps: float = 1.0

    def __post_init__(self):
        if not self.frames:
            raise MalformedRecord(f"track {self.video_id!r} has no frames")
        if self.fps <= 0:
            raise MalformedRecord(f"track {self.video_id!r} has non-positive fps {self.fps}")
        for position, frame in enumerate(self.frames, start=1):
            if frame.index != position:
                raise NonContiguousIndices(position, frame.index)

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def duration_seconds(self) -> float:
        return self.length / self.fps

    def text_at(self, index: int) -> str:
        if not 1 <= index <= self.length:
            raise RangeOutOfBounds(f"frame {index} outside [1, {self.length}]")
        return self.frames[index - 1].text


@dataclass(frozen=True)
class Question:
    """Multiple-choice question over one video; `gold` is the optional answer index."""

    id: str
    video_id: str
    text: str
    options: tuple[str, ...]
    gold: int | None = None

    def __post_init__(self):
        if len(self.options) < 2:
            raise TooFewOptions(self.id, len(self.options))
        if self.gold is not None and not 0 <= self.gold < len(self.options):
            raise MalformedRecord(
                f"question {self.id!r}: answer index {self.gold} outside options"
            )


@dataclass(frozen=True)
class FrameRange:
    """Inclusive 1-based frame window."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise RangeOutOfBounds(f"invalid frame range [{self.start}, {self.end}]")

    @property
    def width(self) -> int:
        return self.end - self.start + 1

    def indices(self) -> range:
        return range(self.start, self.end + 1)

    def clamped(self, length: int) -> "FrameRange | None":
        """Intersection with [1, length], or None when disjoint."""
        start = max(self.start, 1)
        end = min(self.end, length)
        if start > end:
            return None
        return FrameRange(start, end)

    def as_pair(self) -> tuple[int, int]:
        return (self.start, self.end)


def full_range(track: CaptionTrack) -> FrameRange:
    return FrameRange(1, track.length)


def load_caption_track(path: str | Path) -> CaptionTrack:
    """Parse a caption-track file, checking contiguity and non-empty texts."""
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise MalformedRecord(f"{path}: top level must be an object")
    try:
        video_id = str(raw["video_id"])
        fps = float(raw.get("fps", 1.0))
        entries = raw["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{path}: {exc}") from exc
    if not isinstance(entries, list):
        raise MalformedRecord(f"{path}: 'frames' must be a list")
    frames = []
    for pos, entry in enumerate(entries, start=1):
        try:
            frames.append(FrameCaption(index=int(entry["index"]), text=str(entry["text"])))
        except MalformedRecord:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad frame entry: {exc}", line=pos) from exc
    return CaptionTrack(video_id=video_id, frames=tuple(frames), fps=fps)


def track_to_dict(track: CaptionTrack) -> dict:
    return {
        "video_id": track.video_id,
        "fps": track.fps,
        "frames": [{"index": f.index, "text": f.text} for f in track.frames],
    }


def save_caption_track(track: CaptionTrack, path: str | Path) -> None:
    Path(path).write_text(json.dumps(track_to_dict(track), indent=2), encoding="utf-8")


def load_questions(path: str | Path) -> list[Question]:
    """Parse a question-set file; video_id references are not resolved here."""
    raw = _read_json(path)
    if not isinstance(raw, list):
        raise MalformedRecord(f"{path}: top level must be a list")
    questions = []
    for pos, entry in enumerate(raw, start=1):
        try:
            options = tuple(str(o) for o in entry["options"])
            gold = entry.get("answer")
            questions.append(
                Question(
                    id=str(entry["id"]),
                    video_id=str(entry["video_id"]),
                    text=str(entry["question"]),
                    options=options,
                    gold=None if gold is None else int(gold),
                )
            )
        except (TooFewOptions, MalformedRecord):
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad question entry: {exc}", line=pos) from exc
    return questions


def questions_to_list(questions: Iterable[Question]) -> list[dict]:
    out = []
    for q in questions:
        entry = {
            "id": q.id,
            "video_id": q.video_id,
            "question": q.text,
            "options": list(q.options),
        }
        if q.gold is not None:
            entry["answer"] = q.gold
        out.append(entry)
    return out


def save_questions(questions: Iterable[Question], path: str | Path) -> None:
    Path(path).write_text(json.dumps(questions_to_list(questions), indent=2), encoding="utf-8")


def slice_captions(track: CaptionTrack, window: FrameRange) -> str:
    """Render a caption window as one 't=<index>s: <text>' line per frame."""
    if window.end > track.length:
        raise RangeOutOfBounds(
            f"range [{window.start}, {window.end}] outside track of length {track.length}"
        )
    return "\n".join(f"t={i}s: {track.text_at(i)}" for i in window.indices())


class DetailProvider(Protocol):
    """Source of fine-grained per-frame captions."""

    def fetch(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        """Return (index, text) for every frame in the window, in order."""
        ...


class PrecomputedDetails:
    """Detail captions loaded from files; raises MissingDetail for absent frames."""

    def __init__(self, details: dict[str, dict[int, str]]):
        self._details = details

    @classmethod
    def from_file(cls, path: str | Path) -> "PrecomputedDetails":
        raw = _read_json(path)
        return cls({str(raw["video_id"]): {int(k): str(v) for k, v in raw["details"].items()}})

    @classmethod
    def from_dir(cls, path: str | Path) -> "PrecomputedDetails":
        merged: dict[str, dict[int, str]] = {}
        files = sorted(Path(path).glob("*.json"))
        if not files:
            raise MissingFile(f"no detail files under {path}")
        for f in files:
            raw = _read_json(f)
            merged[str(raw["video_id"])] = {int(k): str(v) for k, v in raw["details"].items()}
        return cls(merged)

    def fetch(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        per_video = self._details.get(video_id)
        if per_video is None:
            raise MissingDetail(window.start)
        out = []
        for index in window.indices():
            if index not in per_video:
                raise MissingDetail(index)
            out.append((index, per_video[index]))
        return out


class ScriptedDetails:
    """Deterministic synthetic details; text is a pure function of (video_id, index)."""

    def __init__(self, render=None):
        self._render = render or (lambda video_id, index: f"detail view of frame {index} in {video_id}")

    def fetch(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        return [(i, self._render(video_id, i)) for i in window.indices()]


class NullDetails:
    """Provider with no detail captions at all; every fetch fails."""

    def fetch(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        raise MissingDetail(window.start)


class HttpDetails:
    """Fine-grained captioning over HTTP: POST {video_id, start, end} -> {"details": {...}}."""

    def __init__(self, base_url: str, api_key: str = "", timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def fetch(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = requests.post(
                f"{self.base_url}/details",
                json={"video_id": video_id, "start": window.start, "end": window.end},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderUnavailable(str(exc)) from exc
        details = {int(k): str(v) for k, v in payload.get("details", {}).items()}
        out = []
        for index in window.indices():
            if index not in details:
                raise MissingDetail(index)
            out.append((index, details[index]))
        return out


@dataclass
class DetailCaptionCache:
    """Caps and memoizes detail-caption requests.

    The width cap is enforced before any provider dispatch, so no request
    wider than `frame_cap` ever reaches the provider boundary. Results are
    memoized per (video_id, index); a fully cached window issues no fetch.
    """

    provider: DetailProvider
    frame_cap: int = DEFAULT_DETAIL_FRAME_CAP
    _cache: dict[tuple[str, int], str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    provider_calls: int = 0

    def get(self, video_id: str, window: FrameRange) -> list[tuple[int, str]]:
        if window.width > self.frame_cap:
            raise FrameCapExceeded(window.width, self.frame_cap)
        with self._lock:
            cached = all((video_id, i) in self._cache for i in window.indices())
        if not cached:
            fetched = self.provider.fetch(video_id, window)
            got = {i: t for i, t in fetched}
            for index in window.indices():
                if index not in got:
                    raise MissingDetail(index)
            with self._lock:
                self.provider_calls += 1
                for i, t in fetched:
                    self._cache[(video_id, i)] = t
        with self._lock:
            return [(i, self._cache[(video_id, i)]) for i in window.indices()]


def load_caption_dir(path: str | Path) -> dict[str, CaptionTrack]:
    """Load every *.json caption track in a directory, keyed by video_id."""
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise MissingFile(f"no caption tracks under {path}")
    tracks = {}
    for f in files:
        track = load_caption_track(f)
        tracks[track.video_id] = track
    return tracks


def _read_json(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise MissingFile(str(p))
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{p}: invalid JSON: {exc}") from exc
