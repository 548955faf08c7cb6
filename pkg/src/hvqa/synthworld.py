"""Deterministic synthetic worlds for fully offline pipeline testing.

Each world is a caption track, a question with a known answer, a detail
caption file, and a scripted backend that drives every pipeline stage
consistently with the planted evidence. Construction guarantees:

  * exactly one option's two-token activity phrase appears in the detail
    captions of the decisive window, and that phrase appears nowhere else;
  * coarse captions inside the decisive window are deliberately vague, so
    the answer cannot be confirmed without the detail-caption step;
  * everything is a pure function of the seed.

Randomness comes from splitmix64, chosen because the algorithm is short,
well known, and easy to reproduce bit-for-bit in any language.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import (
    CaptionTrack,
    FrameCaption,
    FrameRange,
    Question,
    save_caption_track,
    save_questions,
)
from .errors import HvqaError
from .gateway import ScriptedBackend, ScriptRule

_MASK64 = (1 << 64) - 1


class SynthError(HvqaError):
    pass


class SpecInvalid(SynthError):
    pass


class NoUniqueMatch(SynthError):
    pass


class SplitMix64:
    """splitmix64 PRNG: state += 0x9E3779B97F4A7C15 per step, then the
    output is mixed with two xor-shift-multiply rounds (0xBF58476D1CE4E5B9,
    0x94D049BB133111EB) and a final 31-bit xor-shift."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) / float(1 << 53)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return self.next_u64() % n

    def choice(self, seq: Sequence):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, seq: Sequence, k: int) -> list:
        pool = list(seq)
        self.shuffle(pool)
        return pool[:k]


# Two-token activity phrases; disjoint from the lexical-localizer stopword
# list, and no phrase is a substring of another.
ACTIVITY_PHRASES = (
    "operates sewing-machine",
    "kneads bread-dough",
    "waters potted-plants",
    "repairs bicycle-chain",
    "paints wooden-fence",
    "solders circuit-board",
    "sharpens kitchen-knife",
    "whisks egg-mixture",
    "irons linen-shirt",
    "polishes leather-boots",
    "assembles bookshelf-frame",
    "trims rose-bushes",
    "grinds coffee-beans",
    "carves pumpkin-lantern",
    "stitches torn-jacket",
    "brews herbal-tea",
    "tunes acoustic-guitar",
    "sculpts clay-bowl",
    "wraps gift-boxes",
    "peels ripe-mangoes",
    "stacks firewood-logs",
    "organizes postage-stamps",
    "measures copper-wire",
    "shapes candle-wax",
)

# Filler captions avoid every activity verb and object above.
_FILLER_CAPTIONS = (
    "the person walks across the room",
    "the person looks around the space",
    "the person stands near the table",
    "the person reaches toward a shelf",
    "the person moves slowly through the area",
    "the person pauses and glances around",
    "the person shifts position by the window",
    "the person picks up a small item and puts it down",
)

# Vague in-window captions: activity visible but unidentifiable.
_WINDOW_CAPTIONS = (
    "the person is busy with something at the table",
    "the person handles an object with both hands",
    "the person continues working with the item",
    "the person leans over the table, occupied",
    "the person keeps adjusting the thing in front of them",
)

_VAGUE_DETAIL = "close-up: the person's hands hover over everyday objects on the table"

QUESTION_TEXT = "Which activity does the person carry out at the table during the video?"
_OPTION_PREFIX = "The person "


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    num_frames: int = 60
    num_options: int = 5
    decisive_window: FrameRange | None = None  # sampled from the seed when omitted
    distractor_rate: float = 0.15

    def validated(self) -> "WorldSpec":
        if self.num_frames < 1:
            raise SpecInvalid("num_frames must be >= 1")
        if not 2 <= self.num_options <= len(ACTIVITY_PHRASES):
            raise SpecInvalid(
                f"num_options must be in [2, {len(ACTIVITY_PHRASES)}], got {self.num_options}"
            )
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise SpecInvalid("distractor_rate must lie in [0, 1]")
        if self.decisive_window is not None:
            window = self.decisive_window
            if window.width > 5:
                raise SpecInvalid("decisive_window must span at most 5 frames")
            if window.end > self.num_frames:
                raise SpecInvalid("decisive_window must lie within the track")
        elif self.num_frames < 3:
            raise SpecInvalid("num_frames too small to place a decisive window")
        return self


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    track: CaptionTrack
    question: Question
    details: dict[int, str]
    script: ScriptedBackend

    @property
    def video_id(self) -> str:
        return self.track.video_id

    @property
    def decisive_window(self) -> FrameRange:
        window = self.spec.decisive_window
        assert window is not None
        return window


def _object_token(phrase: str) -> str:
    return phrase.split()[1]


def generate_world(spec: WorldSpec) -> World:
    """Build a world deterministically from the seed."""
    spec = spec.validated()
    rng = SplitMix64(spec.seed)

    if spec.decisive_window is None:
        width = min(3 + rng.randrange(3), spec.num_frames)
        start = 1 + rng.randrange(spec.num_frames - width + 1)
        spec = WorldSpec(
            seed=spec.seed,
            num_frames=spec.num_frames,
            num_options=spec.num_options,
            decisive_window=FrameRange(start, start + width - 1),
            distractor_rate=spec.distractor_rate,
        )
    window = spec.decisive_window
    assert window is not None

    phrases = rng.sample(ACTIVITY_PHRASES, spec.num_options)
    gold = rng.randrange(spec.num_options)
    gold_phrase = phrases[gold]
    video_id = f"synth-{spec.seed:05d}"

    frames = []
    for index in range(1, spec.num_frames + 1):
        if window.start <= index <= window.end:
            text = _WINDOW_CAPTIONS[rng.randrange(len(_WINDOW_CAPTIONS))]
        else:
            text = _FILLER_CAPTIONS[rng.randrange(len(_FILLER_CAPTIONS))]
            if rng.random() < spec.distractor_rate:
                near_miss = _object_token(phrases[rng.randrange(len(phrases))])
                text = f"{text}; a {near_miss} rests on a shelf nearby"
        frames.append(FrameCaption(index=index, text=text))
    track = CaptionTrack(video_id=video_id, frames=tuple(frames), fps=1.0)

    question = Question(
        id=f"{video_id}-q0",
        video_id=video_id,
        text=QUESTION_TEXT,
        options=tuple(f"{_OPTION_PREFIX}{p}." for p in phrases),
        gold=gold,
    )

    details = {}
    for index in range(1, spec.num_frames + 1):
        if window.start <= index <= window.end:
            details[index] = (
                f"close-up: the person carefully {gold_phrase}, with deliberate hand movements"
            )
        else:
            details[index] = _VAGUE_DETAIL

    script = _build_script(question, phrases, gold, window)
    return World(spec=spec, track=track, question=question, details=details, script=script)


def _build_script(
    question: Question, phrases: Sequence[str], gold: int, window: FrameRange
) -> ScriptedBackend:
    gold_phrase = phrases[gold]
    span = f"{window.start}-{window.end}"
    hypothesis_items = [
        {
            "option": question.options[i],
            "option_index": i,
            "statement": f"At some point the person {phrase} at the table.",
            "entities": ["person", _object_token(phrase)],
            "actions": [phrase.split()[0]],
            "constraints": ["the decisive action happens while the person is at the table"],
        }
        for i, phrase in enumerate(phrases)
    ]
    verified_steps = [
        f"Step 1: The clue asks whether the person {gold_phrase}.",
        f"Step 2: The detail captions for t={span}s explicitly describe that action.",
        "Step 3: The observation matches the clue, so the clue is verified.",
    ]
    rules = [
        ScriptRule(
            template_id="summarize",
            response=(
                "A person spends the video on household activity around a table; "
                "they appear focused on one specific task at some point, but the "
                "frame descriptions alone do not reveal which activity it is."
            ),
        ),
        ScriptRule(
            template_id="hypothesis",
            response=json.dumps({"hypotheses": hypothesis_items, "filtered": []}),
        ),
        ScriptRule(
            template_id="clue",
            response=json.dumps(
                {
                    "clue": f"Check whether the person {gold_phrase} during the focused segment.",
                    "core_difference": "each option names a different manual activity with its own object",
                    "distinction_score": 0.85,
                    "rationale": "the candidate activities involve visibly different objects and motions",
                }
            ),
        ),
        ScriptRule(template_id="localize", response=f"frames {span}"),
        ScriptRule(
            template_id="verify",
            must_contain=(f"carefully {gold_phrase}",),
            response=json.dumps(
                {
                    "clue_understanding": f"Confirm whether the person {gold_phrase}.",
                    "evidence_found": f"Close-up details at t={span}s show the person carefully {gold_phrase}.",
                    "reasoning_trace": verified_steps,
                    "verification_result": "verified",
                }
            ),
        ),
        ScriptRule(
            template_id="verify",
            response=json.dumps(
                {
                    "clue_understanding": f"Confirm whether the person {gold_phrase}.",
                    "evidence_found": (
                        "The frame-level captions only describe generic movement "
                        "and do not name the decisive activity."
                    ),
                    "reasoning_trace": [
                        "Step 1: The coarse captions lack the decisive action."
                    ],
                    "verification_result": "partially_verified",
                    "followup_needed": f"Close-up inspection of frames {span} is required.",
                    "followup_range": [window.start, window.end],
                }
            ),
        ),
        ScriptRule(
            template_id="answer",
            response=json.dumps(
                {
                    "reasoning_summary": f"The decisive activity was verified at t={span}s.",
                    "conflict_resolution": "No conflicting evidence; the other activities were never observed.",
                    "final_answer": gold,
                    "explanation": f"Detail captions show the person carefully {gold_phrase}.",
                }
            ),
        ),
    ]
    return ScriptedBackend(rules)


def oracle_answer(world: World) -> int:
    """Independent check: exhaustively scan the world's own text corpus.

    Each option text embeds that option's activity phrase ("The person
    <verb object>."); the oracle searches the union of all frame captions
    and all detail captions for each phrase by plain substring and demands
    a unique hit. It never consults the generator's bookkeeping.
    """
    corpus_text = "\n".join(
        [f.text for f in world.track.frames] + [world.details[k] for k in sorted(world.details)]
    )
    matches = []
    for index, option in enumerate(world.question.options):
        phrase = option[len(_OPTION_PREFIX):].rstrip(".")
        if phrase in corpus_text:
            matches.append(index)
    if len(matches) != 1:
        raise NoUniqueMatch(
            f"expected exactly one option phrase in the corpus, found {matches}"
        )
    return matches[0]


def write_world(world: World, out_dir: str | Path) -> dict:
    """Emit the world in the standard corpus formats plus its script file."""
    out = Path(out_dir)
    (out / "captions").mkdir(parents=True, exist_ok=True)
    (out / "details").mkdir(parents=True, exist_ok=True)
    (out / "scripts").mkdir(parents=True, exist_ok=True)
    captions_path = out / "captions" / f"{world.video_id}.json"
    details_path = out / "details" / f"{world.video_id}.json"
    script_path = out / "scripts" / f"{world.video_id}.json"
    save_caption_track(world.track, captions_path)
    details_path.write_text(
        json.dumps(
            {"video_id": world.video_id, "details": {str(k): v for k, v in world.details.items()}},
            indent=2,
        ),
        encoding="utf-8",
    )
    world.script.save(script_path)
    return {
        "seed": world.spec.seed,
        "video_id": world.video_id,
        "question_id": world.question.id,
        "gold": world.question.gold,
        "captions": str(captions_path.relative_to(out)),
        "details": str(details_path.relative_to(out)),
        "script": str(script_path.relative_to(out)),
    }


def write_worlds(worlds: Sequence[World], out_dir: str | Path) -> Path:
    """Write all worlds plus questions.json and a manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [write_world(world, out) for world in worlds]
    save_questions([w.question for w in worlds], out / "questions.json")
    manifest = {
        "questions_file": "questions.json",
        "worlds": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def generate_worlds(seeds: Sequence[int], **spec_kwargs) -> list[World]:
    return [generate_world(WorldSpec(seed=s, **spec_kwargs)) for s in seeds]
