import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmgie.errors import (
    EmptyBatchError,
    MalformedOutputError,
    MissingPlaceholderError,
    SchemaViolationError,
    UnknownPlaceholderError,
)
from hmgie.prompts import (
    TEMPLATE_PLACEHOLDERS,
    PromptTemplate,
    TemplateName,
    load_templates,
    parse_consistency_reply,
    parse_coverage_reply,
    parse_eval_reply,
    parse_question_batch,
    parse_vqa_reply,
    render,
)

GOLDEN_DIR = Path(__file__).parent / "goldens"

GOLDEN_SUBSTITUTIONS = {
    TemplateName.DIRECT_PROMPT: {"caption": "a red car parked by the road"},
    TemplateName.COT_PROMPT: {"caption": "a red car parked by the road"},
    TemplateName.SEMANTIC_GRAPH_GEN: {
        "example": "(worked example omitted for the golden)",
        "caption": "a red car parked by the road",
    },
    TemplateName.QUESTION_GEN: {
        "semantic-graph": '{"nodes": [], "edges": []}',
        "previous-HIEG": "[]",
        "suggestion": "None",
        "current-level": "1",
    },
    TemplateName.VQA: {"question": "What color is the car?"},
    TemplateName.ANSWER_EVAL: {
        "question": "What color is the car?",
        "expected-answer": "red",
        "actual-answer": "a red car",
    },
    TemplateName.COVERAGE_CHECK: {
        "semantic-graph": '{"nodes": [], "edges": []}',
        "hieg": "[]",
    },
    TemplateName.EXPLAIN: {
        "hieg": "[]",
        "caption": "a red car parked by the road",
        "consistency-decision": "Consistent",
    },
}


class TestTemplates:
    @pytest.mark.parametrize("name", list(TemplateName))
    def test_golden_render(self, name):
        templates = load_templates()
        rendered = render(templates[name], GOLDEN_SUBSTITUTIONS[name])
        golden = (GOLDEN_DIR / f"{name.value}.golden.txt").read_text(encoding="utf-8")
        assert rendered == golden

    def test_spot_anchors(self):
        direct = (GOLDEN_DIR / "DirectPrompt.golden.txt").read_text(encoding="utf-8")
        assert "Does the image match the given caption?" in direct
        evaluator = (GOLDEN_DIR / "AnswerEval.golden.txt").read_text(encoding="utf-8")
        assert "You are a question answer evaluator." in evaluator

    def test_direct_prompt_embeds_caption(self):
        templates = load_templates()
        rendered = render(templates[TemplateName.DIRECT_PROMPT], {"caption": "a red car"})
        assert "Caption:\n\n[a red car]" in rendered
        assert "{caption}" not in rendered

    def test_missing_placeholder(self):
        templates = load_templates()
        with pytest.raises(MissingPlaceholderError):
            render(
                templates[TemplateName.QUESTION_GEN],
                {
                    "semantic-graph": "{}",
                    "previous-HIEG": "[]",
                    "suggestion": "None",
                    # current-level missing
                },
            )

    def test_unknown_placeholder(self):
        templates = load_templates()
        with pytest.raises(UnknownPlaceholderError):
            render(templates[TemplateName.VQA], {"question": "x", "foo": "bar"})

    def test_no_placeholder_left_after_render(self):
        templates = load_templates()
        for name, subs in GOLDEN_SUBSTITUTIONS.items():
            rendered = render(templates[name], subs)
            for placeholder in TEMPLATE_PLACEHOLDERS[name]:
                assert "{" + placeholder + "}" not in rendered

    def test_undeclared_placeholder_rejected_at_load(self):
        with pytest.raises(SchemaViolationError):
            PromptTemplate(
                name=TemplateName.VQA,
                body="Question: {question} Extra: {surprise}",
                placeholders=frozenset({"question"}),
            )

    def test_templates_dir_override(self, tmp_path):
        (tmp_path / "vqa.txt").write_text("Custom: {question}", encoding="utf-8")
        templates = load_templates(tmp_path)
        assert templates[TemplateName.VQA].body == "Custom: {question}"
        # untouched templates still come from the package
        assert "question answer evaluator" in templates[TemplateName.ANSWER_EVAL].body

    def test_substitution_value_containing_placeholder_text(self):
        # single-pass substitution: braces inside values are never re-expanded
        templates = load_templates()
        rendered = render(templates[TemplateName.VQA], {"question": "literal {question}"})
        assert rendered.count("literal {question}") == 1


class TestVqaReply:
    def test_answer_and_confidence(self):
        reply = parse_vqa_reply('{"Answer": "yes, a dog", "Confidence": 0.9}')
        assert reply.answer == "yes, a dog"
        assert reply.confidence == pytest.approx(0.9)

    def test_missing_confidence_defaults_to_one(self):
        assert parse_vqa_reply('{"Answer": "blue"}').confidence == 1.0

    def test_confidence_clamped(self):
        with pytest.warns(UserWarning, match="clamped"):
            reply = parse_vqa_reply('{"Confidence": 1.2, "Answer": "x"}')
        assert reply.answer == "x"
        assert reply.confidence == 1.0

    def test_fenced_reply(self):
        raw = 'Sure:\n```json\n{"Answer": "two", "Confidence": 0.5}\n```'
        assert parse_vqa_reply(raw).answer == "two"

    def test_numeric_answer_coerced(self):
        assert parse_vqa_reply('{"Answer": 3, "Confidence": 0.7}').answer == "3"

    def test_malformed(self):
        with pytest.raises(MalformedOutputError):
            parse_vqa_reply("I see a dog.")


class TestEvalReply:
    def test_true(self):
        assert parse_eval_reply('{"Correct": true}').correct is True

    def test_false(self):
        assert parse_eval_reply('{"Correct": false}').correct is False

    def test_prose_is_malformed(self):
        with pytest.raises(MalformedOutputError):
            parse_eval_reply("The answer looks right to me.")

    def test_string_bool_tolerated(self):
        assert parse_eval_reply('{"Correct": "True"}').correct is True


class TestConsistencyReply:
    def test_yes(self):
        reply = parse_consistency_reply('{"Answer": "Yes", "Explanation": "match"}')
        assert reply.consistent is True
        assert reply.explanation == "match"

    def test_no_with_elaboration(self):
        assert parse_consistency_reply('{"Answer": "No, the color differs"}').consistent is False

    def test_unparseable_answer(self):
        with pytest.raises(MalformedOutputError):
            parse_consistency_reply('{"Answer": "maybe"}')


class TestQuestionBatch:
    def test_three_items(self):
        items = [
            {"Question": f"q{i}", "Expected-Answer": "a", "Verify-Fact": "f"}
            for i in range(3)
        ]
        batch = parse_question_batch(json.dumps({"Questions": items}), level=2)
        assert batch.level == 2
        assert len(batch.items) == 3

    def test_duplicates_collapse_with_warning(self):
        items = [
            {"Question": "same", "Expected-Answer": "a"},
            {"Question": "same", "Expected-Answer": "b"},
        ]
        with pytest.warns(UserWarning, match="duplicate"):
            batch = parse_question_batch(json.dumps({"Questions": items}), level=1)
        assert len(batch.items) == 1
        assert batch.items[0].expected_answer == "a"  # first wins

    def test_empty_list(self):
        with pytest.raises(EmptyBatchError):
            parse_question_batch('{"Questions": []}', level=1)

    def test_parent_and_coverage_fields(self):
        items = [
            {
                "Question": "q",
                "Expected-Answer": "a",
                "Parent-IDS": ["Q1.1", "Q1.2"],
                "Covered-Nodes": ["N1"],
                "Covered-Edges": [0, "2"],
            }
        ]
        batch = parse_question_batch(json.dumps({"Questions": items}), level=2)
        item = batch.items[0]
        assert item.parent_ids == {"Q1.1", "Q1.2"}
        assert item.covered_nodes == {"N1"}
        assert item.covered_edges == {0, 2}

    def test_top_level_array_tolerated(self):
        batch = parse_question_batch(
            json.dumps([{"Question": "q", "Expected-Answer": "a"}]), level=1
        )
        assert len(batch.items) == 1

    def test_items_without_expected_answer_dropped(self):
        items = [
            {"Question": "incomplete"},
            {"Question": "ok", "Expected-Answer": "a"},
        ]
        with pytest.warns(UserWarning):
            batch = parse_question_batch(json.dumps({"Questions": items}), level=1)
        assert [i.question for i in batch.items] == ["ok"]


class TestCoverageReply:
    def test_complete(self):
        reply = parse_coverage_reply(
            '{"Verified-Complete": true, "Examined-Nodes": [], '
            '"Examined-Edges": [], "Next-Level-Suggestion": null}'
        )
        assert reply.verified_complete is True
        assert reply.examined_nodes == frozenset()
        assert reply.next_level_suggestion is None

    def test_incomplete_with_suggestion(self):
        reply = parse_coverage_reply(
            json.dumps(
                {
                    "Verified-Complete": False,
                    "Examined-Nodes": ["N1", "N2"],
                    "Examined-Edges": [],
                    "Next-Level-Suggestion": "verify attributes of the sofa",
                }
            )
        )
        assert reply.verified_complete is False
        assert reply.examined_nodes == {"N1", "N2"}
        assert reply.examined_edges == frozenset()
        assert reply.next_level_suggestion == "verify attributes of the sofa"

    def test_complete_with_suggestion_is_schema_violation(self):
        with pytest.raises(SchemaViolationError):
            parse_coverage_reply(
                json.dumps(
                    {
                        "Verified-Complete": True,
                        "Next-Level-Suggestion": "keep going anyway",
                    }
                )
            )

    def test_none_string_suggestion_normalized(self):
        reply = parse_coverage_reply(
            '{"Verified-Complete": true, "Next-Level-Suggestion": "None"}'
        )
        assert reply.next_level_suggestion is None


@pytest.mark.filterwarnings("ignore::UserWarning")
@settings(max_examples=300)
@given(st.text(max_size=300))
def test_parsers_total_under_fuzz(raw):
    for parser in (
        parse_vqa_reply,
        parse_eval_reply,
        parse_coverage_reply,
        parse_consistency_reply,
    ):
        try:
            parser(raw)
        except (MalformedOutputError, SchemaViolationError):
            pass
    try:
        parse_question_batch(raw, level=1)
    except (MalformedOutputError, EmptyBatchError, SchemaViolationError):
        pass


@pytest.mark.filterwarnings("ignore::UserWarning")
@settings(max_examples=200)
@given(
    st.dictionaries(
        st.sampled_from(["Answer", "Confidence", "Correct", "Questions", "junk"]),
        st.one_of(
            st.text(max_size=10),
            st.integers(),
            st.floats(allow_nan=True),
            st.booleans(),
            st.none(),
            st.lists(st.integers(), max_size=3),
        ),
        max_size=4,
    )
)
def test_parsers_total_on_near_miss_payloads(payload):
    raw = json.dumps(payload)
    for parser in (parse_vqa_reply, parse_eval_reply, parse_coverage_reply):
        try:
            parser(raw)
        except (MalformedOutputError, SchemaViolationError):
            pass
