import pytest
from hypothesis import given, strategies as st

from panelcap.structured_io import (DET_TOKEN, LabeledCaption, StructuredOutput, captioning_prompt,
                                    detection_prompt, fewshot_prompt, normalize_label, parse_structured,
                                    serialize_structured)


def test_parse_basic_output():
    s = parse_structured("A: bar chart of counts\nB: scatter of points\n[DET]")
    assert s.labels == ["A", "B"]
    assert s.lines[1].text == "scatter of points"
    assert s.det_terminated


def test_lowercase_labels_and_loose_spacing():
    s = parse_structured("  a :  first panel  \nb:second\n")
    assert s.labels == ["A", "B"]
    assert [ln.text for ln in s.lines] == ["first panel", "second"]
    assert not s.det_terminated


def test_stops_at_first_trigger_and_skips_noise():
    s = parse_structured("Here you go\nA: one\nAB: nope\n: nothing\nC:\n[DET]\nD: after")
    assert s.labels == ["A"]
    assert s.det_terminated


def test_trigger_must_be_its_own_line():
    s = parse_structured("A: one [DET]")
    assert s.labels == ["A"] and s.lines[0].text == "one [DET]"
    assert not s.det_terminated


def test_empty_and_garbage_inputs():
    assert parse_structured("") == StructuredOutput((), False)
    assert parse_structured("\n\n???\n") == StructuredOutput((), False)
    assert parse_structured(DET_TOKEN) == StructuredOutput((), True)


def test_duplicates_kept_in_emission_order():
    s = parse_structured("B: x\nA: y\nB: z\n[DET]")
    assert s.labels == ["B", "A", "B"]
    assert s.first_by_label() == {"B": "x", "A": "y"}


def test_serialize_format():
    s = StructuredOutput.from_pairs([("A", "one two"), ("b", "three")])
    assert serialize_structured(s) == "A: one two\nB: three\n[DET]"


def test_labeled_caption_validation():
    with pytest.raises(ValueError):
        LabeledCaption("AB", "x")
    with pytest.raises(ValueError):
        LabeledCaption("1", "x")
    with pytest.raises(ValueError):
        LabeledCaption("A", "   ")
    with pytest.raises(ValueError):
        LabeledCaption("A", "two\nlines")
    assert normalize_label("q") == "Q"


def test_prompts_carry_the_grammar():
    assert "[DET]" in captioning_prompt()
    assert '"A: <caption>"' in captioning_prompt()
    assert "bbox_2d" in detection_prompt() and "[0, 1000]" in detection_prompt()
    shots = fewshot_prompt([LabeledCaption("A", "known caption")])
    assert shots.startswith(captioning_prompt()) and shots.endswith("A: known caption")
    assert fewshot_prompt() == captioning_prompt()


caption_text = st.text(alphabet=st.characters(whitelist_categories=("L", "N"), whitelist_characters=" -.,"),
                       min_size=1, max_size=30).filter(lambda t: t.strip())
pairs = st.lists(st.tuples(st.sampled_from("ABCDEFGHIJKLMNOPQRSTUVWXYZ"), caption_text), max_size=8)


@given(pairs, st.booleans())
def test_roundtrip(ps, det):
    s = StructuredOutput.from_pairs(ps, det)
    assert parse_structured(serialize_structured(s)) == s


@given(st.text(max_size=200))
def test_parser_never_raises(raw):
    s = parse_structured(raw)
    assert all(len(ln.label) == 1 and ln.text for ln in s.lines)
