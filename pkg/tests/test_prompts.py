from __future__ import annotations

import logging
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvqa.prompts import (
    TEMPLATE_IDS,
    MissingBinding,
    PromptTemplate,
    TemplateRegistry,
    TemplateSyntaxError,
    UnknownTemplate,
)

GOLDEN_TEMPLATES = Path(__file__).parent / "golden" / "templates"

EXPECTED_PLACEHOLDERS = {
    "summarize": {"length", "interval text", "words", "question"},
    "hypothesis": {"question", "options", "video summary"},
    "clue": {"question", "hypotheses", "video summary"},
    "verify": {"question", "clue", "frame caption"},
    "answer": {"question", "options", "verification_outputs", "video summary"},
    "refine_specificity": {
        "question",
        "option",
        "previous_hypotheses",
        "verification_feedback",
        "video summary",
    },
    "refine_discriminability": {
        "question",
        "option",
        "previous_hypotheses",
        "verification_feedback",
        "video summary",
    },
}


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_placeholders_match_contract(registry, template_id):
    assert registry.list_placeholders(template_id) == EXPECTED_PLACEHOLDERS[template_id]


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_default_bodies_match_golden_files(registry, template_id):
    golden = (GOLDEN_TEMPLATES / f"{template_id}.txt").read_text(encoding="utf-8")
    assert registry.get(template_id).body == golden


def test_render_summarize_mentions_word_budget(registry):
    text = registry.render(
        "summarize",
        {"length": "180", "interval text": "t=1s: a", "words": "300", "question": "what?"},
    )
    assert "give me a 300 words summary" in text
    assert "{" not in text


def test_render_missing_binding(registry):
    bindings = {"question": "q", "video summary": "s"}
    with pytest.raises(MissingBinding) as err:
        registry.render("hypothesis", bindings)
    assert err.value.name == "options"


def test_render_zero_placeholder_identity():
    template = PromptTemplate("summarize", "no slots here at all")
    assert template.placeholders == frozenset()
    assert template.render({}) == "no slots here at all"


def test_extra_binding_warns_not_raises(registry, caplog):
    bindings = {
        "length": "10",
        "interval text": "x",
        "words": "50",
        "question": "q",
        "bogus": "ignored",
    }
    with caplog.at_level(logging.WARNING, logger="hvqa.prompts"):
        text = registry.render("summarize", bindings)
    assert "bogus" in caplog.text
    assert "ignored" not in text


def test_unknown_template(registry):
    with pytest.raises(UnknownTemplate):
        registry.render("nonexistent", {})
    with pytest.raises(UnknownTemplate):
        registry.list_placeholders("nonexistent")


def test_override_directory(tmp_path):
    (tmp_path / "summarize.txt").write_text("custom {question}", encoding="utf-8")
    registry = TemplateRegistry(overrides_dir=tmp_path)
    assert registry.render("summarize", {"question": "Q"}) == "custom Q"
    # untouched templates keep their defaults
    assert "reasoning planner" in registry.get("hypothesis").body


@pytest.mark.parametrize(
    "body",
    ["a {b {c}} d", "unclosed {slot", "stray } brace", "empty {} slot"],
)
def test_bad_brace_syntax_rejected(body):
    with pytest.raises(TemplateSyntaxError):
        PromptTemplate("summarize", body)


@given(
    template_id=st.sampled_from(TEMPLATE_IDS),
    filler=st.text(max_size=40),
)
def test_full_bindings_always_render(registry, template_id, filler):
    bindings = {name: filler for name in registry.list_placeholders(template_id)}
    registry.render(template_id, bindings)  # must not raise
