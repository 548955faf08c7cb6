from __future__ import annotations

import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CountingProvider, make_track
from hvqa.corpus import (
    CaptionTrack,
    DetailCaptionCache,
    FrameCaption,
    FrameCapExceeded,
    FrameRange,
    MalformedRecord,
    MissingDetail,
    MissingFile,
    NonContiguousIndices,
    NullDetails,
    PrecomputedDetails,
    Question,
    RangeOutOfBounds,
    ScriptedDetails,
    TooFewOptions,
    load_caption_track,
    load_questions,
    save_caption_track,
    slice_captions,
)


def _write_track(tmp_path, frames, video_id="v1", fps=1.0):
    path = tmp_path / "track.json"
    path.write_text(
        json.dumps({"video_id": video_id, "fps": fps, "frames": frames}), encoding="utf-8"
    )
    return path


def test_load_minimal_track(tmp_path):
    path = _write_track(
        tmp_path, [{"index": i, "text": t} for i, t in ((1, "a"), (2, "b"), (3, "c"))]
    )
    track = load_caption_track(path)
    assert track.length == 3
    assert track.text_at(2) == "b"


def test_load_detects_index_gap(tmp_path):
    path = _write_track(
        tmp_path, [{"index": i, "text": "x"} for i in (1, 2, 4)]
    )
    with pytest.raises(NonContiguousIndices) as err:
        load_caption_track(path)
    assert err.value.expected == 3
    assert err.value.found == 4


def test_duration_of_180_frame_track_at_1fps(tmp_path):
    path = _write_track(tmp_path, [{"index": i, "text": f"t{i}"} for i in range(1, 181)])
    track = load_caption_track(path)
    assert track.duration_seconds == 180


def test_missing_file():
    with pytest.raises(MissingFile):
        load_caption_track("/nonexistent/track.json")


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(MalformedRecord):
        load_caption_track(path)


def test_blank_caption_rejected(tmp_path):
    path = _write_track(tmp_path, [{"index": 1, "text": "   "}])
    with pytest.raises(MalformedRecord):
        load_caption_track(path)


def test_frame_caption_invariants():
    with pytest.raises(MalformedRecord):
        FrameCaption(index=0, text="ok")
    with pytest.raises(MalformedRecord):
        FrameCaption(index=1, text=" ")


@settings(max_examples=50)
@given(
    st.lists(
        st.text(
            alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1
        ).filter(lambda s: s.strip()),
        min_size=1,
        max_size=30,
    ),
    st.floats(min_value=0.25, max_value=30, allow_nan=False),
)
def test_track_round_trip(tmp_path_factory, texts, fps):
    track = make_track(texts, video_id="rt", fps=fps)
    path = tmp_path_factory.mktemp("rt") / "track.json"
    save_caption_track(track, path)
    assert load_caption_track(path) == track


def test_load_questions_minimal(tmp_path):
    path = tmp_path / "q.json"
    path.write_text(
        json.dumps(
            [
                {
                    "id": "q1",
                    "video_id": "v1",
                    "question": "what?",
                    "options": ["a", "b", "c", "d", "e"],
                    "answer": 2,
                }
            ]
        ),
        encoding="utf-8",
    )
    questions = load_questions(path)
    assert len(questions) == 1
    assert questions[0].gold == 2
    assert len(questions[0].options) == 5


def test_load_questions_too_few_options(tmp_path):
    path = tmp_path / "q.json"
    path.write_text(
        json.dumps([{"id": "q1", "video_id": "v1", "question": "?", "options": ["only"]}]),
        encoding="utf-8",
    )
    with pytest.raises(TooFewOptions):
        load_questions(path)


def test_load_questions_benchmark_sized(tmp_path):
    records = [
        {"id": f"q{i}", "video_id": f"v{i}", "question": "?", "options": ["a", "b", "c"], "answer": i % 3}
        for i in range(500)
    ]
    path = tmp_path / "q.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    assert len(load_questions(path)) == 500


def test_question_gold_must_index_options():
    with pytest.raises(MalformedRecord):
        Question(id="q", video_id="v", text="?", options=("a", "b"), gold=5)


def test_frame_range_invariants():
    assert FrameRange(2, 6).width == 5
    with pytest.raises(RangeOutOfBounds):
        FrameRange(0, 3)
    with pytest.raises(RangeOutOfBounds):
        FrameRange(5, 4)
    assert FrameRange(3, 9).clamped(6) == FrameRange(3, 6)
    assert FrameRange(8, 9).clamped(6) is None


def test_slice_captions_basic():
    track = make_track(["a", "b"])
    assert slice_captions(track, FrameRange(1, 2)) == "t=1s: a\nt=2s: b"
    assert slice_captions(track, FrameRange(2, 2)) == "t=2s: b"


def test_slice_captions_out_of_bounds():
    track = make_track(["a", "b"])
    with pytest.raises(RangeOutOfBounds):
        slice_captions(track, FrameRange(1, 3))


def test_detail_fetch_window_of_five():
    cache = DetailCaptionCache(provider=ScriptedDetails())
    got = cache.get("v1", FrameRange(31, 35))
    assert [i for i, _ in got] == [31, 32, 33, 34, 35]
    assert all(text for _, text in got)


def test_detail_cap_enforced_before_dispatch():
    counting = CountingProvider(ScriptedDetails())
    cache = DetailCaptionCache(provider=counting)
    with pytest.raises(FrameCapExceeded) as err:
        cache.get("v1", FrameRange(1, 6))
    assert (err.value.width, err.value.cap) == (6, 5)
    assert counting.calls == 0


def test_precomputed_single_frame(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"video_id": "v1", "details": {"2": "closeup"}}), encoding="utf-8")
    cache = DetailCaptionCache(provider=PrecomputedDetails.from_file(path))
    assert cache.get("v1", FrameRange(2, 2)) == [(2, "closeup")]


def test_precomputed_missing_frame(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"video_id": "v1", "details": {"2": "closeup"}}), encoding="utf-8")
    cache = DetailCaptionCache(provider=PrecomputedDetails.from_file(path))
    with pytest.raises(MissingDetail):
        cache.get("v1", FrameRange(1, 2))


def test_null_details_always_missing():
    with pytest.raises(MissingDetail):
        DetailCaptionCache(provider=NullDetails()).get("v", FrameRange(1, 1))


def test_cache_memoizes_identical_requests():
    counting = CountingProvider(ScriptedDetails())
    cache = DetailCaptionCache(provider=counting)
    first = cache.get("v1", FrameRange(10, 14))
    second = cache.get("v1", FrameRange(10, 14))
    assert first == second
    assert counting.calls == 1
    cache.get("v2", FrameRange(10, 14))
    assert counting.calls == 2


def test_cache_concurrent_insertion():
    counting = CountingProvider(ScriptedDetails())
    cache = DetailCaptionCache(provider=counting)
    errors = []

    def worker(start):
        try:
            for _ in range(20):
                got = cache.get("v1", FrameRange(start, start + 4))
                assert len(got) == 5
        except Exception as exc:  # pragma: no cover - failure path
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(1 + (i % 4) * 5,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


@settings(max_examples=200)
@given(st.integers(min_value=1, max_value=200), st.integers(min_value=1, max_value=40))
def test_provider_boundary_never_sees_wide_windows(start, width):
    counting = CountingProvider(ScriptedDetails())
    cache = DetailCaptionCache(provider=counting)
    window = FrameRange(start, start + width - 1)
    if width > 5:
        with pytest.raises(FrameCapExceeded):
            cache.get("v", window)
    else:
        cache.get("v", window)
    assert counting.max_width <= 5
