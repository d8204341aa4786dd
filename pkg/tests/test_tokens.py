from __future__ import annotations

import random

import pytest

from unitask.tokens import (
    EMBEDDED_MARKUP,
    MISSING_REGION,
    NONCANONICAL_TEXT,
    GroundingSegment,
    InvalidRegion,
    InvalidSegment,
    MalformedToken,
    ParsedMessage,
    Region,
    StreamParser,
    TaskKind,
    TaskSegment,
    TextSegment,
    effective_regions,
    format_region,
    parse,
    parse_region,
    serialize,
    validate,
)

from genmsg import rand_chunking, rand_message


class TestParse:
    def test_edit_with_trailing_box(self):
        msg = parse('Sure. <Edit>remove the dog</Edit><box>[0.320,0.410,0.780,0.950]</box>')
        assert msg.segments == (
            TextSegment("Sure. "),
            TaskSegment(TaskKind.IMAGE_EDIT_REGION, "remove the dog", ()),
            GroundingSegment(Region(0.32, 0.41, 0.78, 0.95)),
        )

    def test_empty_input(self):
        assert parse("").segments == ()

    def test_mismatched_close_tag(self):
        with pytest.raises(MalformedToken) as exc:
            parse("<Edit>a</Seg>")
        assert exc.value.offset == 7

    def test_box_inside_task_span(self):
        msg = parse("<Seg>the cat<box>[0.1,0.1,0.4,0.4]</box></Seg>")
        (seg,) = msg.segments
        assert seg == TaskSegment(TaskKind.IMAGE_SEG, "the cat", (Region(0.1, 0.1, 0.4, 0.4),))

    def test_unknown_tag_is_error(self):
        with pytest.raises(MalformedToken) as exc:
            parse("hello <Foo>bar</Foo>")
        assert exc.value.offset == 6
        assert "unknown tag" in exc.value.reason

    def test_nested_task_tags(self):
        with pytest.raises(MalformedToken) as exc:
            parse("<Edit>a<Seg>b</Seg></Edit>")
        assert "nested" in exc.value.reason

    def test_unmatched_close(self):
        with pytest.raises(MalformedToken):
            parse("a</Edit>")

    def test_unclosed_task(self):
        with pytest.raises(MalformedToken) as exc:
            parse("<Edit>x")
        assert exc.value.offset == 0

    def test_unclosed_box(self):
        with pytest.raises(MalformedToken):
            parse("<box>[0,0,1,1]")

    def test_bad_region_inside_box_is_invalid_region(self):
        with pytest.raises(InvalidRegion):
            parse("<box>[1.2,0,0,0]</box>")

    def test_literal_angle_brackets_survive(self):
        msg = parse("a < b and x<3 but not a tag >")
        assert msg.segments == (TextSegment("a < b and x<3 but not a tag >"),)

    def test_tag_with_space_is_malformed(self):
        with pytest.raises(MalformedToken) as exc:
            parse("a<b c>")
        assert exc.value.reason == "malformed tag"

    def test_all_tags_round_trip_kind(self):
        for kind in TaskKind:
            msg = parse(serialize([TaskSegment(kind, "p", ())]))
            assert msg.segments[0].kind is kind

    def test_offsets_partition_input(self):
        text = 'Sure. <Edit>remove<box>[0.1,0.2,0.3,0.4]</box></Edit> then <box>[0,0,1,1]</box>!'
        msg = parse(text)
        pos = 0
        for seg in msg.segments:
            assert seg.start == pos
            pos = seg.end
        assert pos == len(text)


class TestStream:
    def test_tag_split_across_chunks(self):
        p = StreamParser()
        assert p.feed("<Ed") == []
        emitted = p.feed("it>x</Edit>")
        assert emitted == [TaskSegment(TaskKind.IMAGE_EDIT_REGION, "x", ())]
        assert p.finish() == []

    def test_text_emitted_on_flush(self):
        p = StreamParser()
        assert p.feed("hello") == []
        assert p.finish() == [TextSegment("hello")]

    def test_dangling_open_tag_on_flush(self):
        p = StreamParser()
        p.feed("<Edit>x")
        with pytest.raises(MalformedToken) as exc:
            p.finish()
        assert "unclosed task span" in exc.value.reason

    def test_lone_angle_at_flush_is_text(self):
        p = StreamParser()
        p.feed("a<")
        assert p.finish() == [TextSegment("a<")]

    def test_partial_tag_at_flush_is_error(self):
        p = StreamParser()
        p.feed("a<Edi")
        with pytest.raises(MalformedToken) as exc:
            p.finish()
        assert "unterminated tag" in exc.value.reason

    def test_box_close_split_across_chunks(self):
        p = StreamParser()
        out = p.feed("<box>[0,0,1,1]</bo")
        assert out == []
        out = p.feed("x>")
        assert out == [GroundingSegment(Region(0, 0, 1, 1))]

    def test_error_poisons_parser(self):
        p = StreamParser()
        with pytest.raises(MalformedToken):
            p.feed("<Nope>")
        with pytest.raises(MalformedToken):
            p.feed("more")

    def test_chunking_invariance_random(self):
        rng = random.Random(1234)
        for _ in range(200):
            text = serialize(rand_message(rng))
            expected = parse(text).segments
            for _ in range(4):
                p = StreamParser()
                got: list = []
                for chunk in rand_chunking(rng, text):
                    got.extend(p.feed(chunk))
                got.extend(p.finish())
                assert tuple(got) == expected


class TestRegion:
    def test_parse_plain(self):
        assert parse_region("[0.100,0.200,0.500,0.600]") == Region(0.1, 0.2, 0.5, 0.6)

    def test_parse_inverted_x(self):
        with pytest.raises(InvalidRegion) as exc:
            parse_region("[0.5,0.5,0.2,0.9]")
        assert "x2" in exc.value.reason

    def test_parse_out_of_range(self):
        with pytest.raises(InvalidRegion) as exc:
            parse_region("[1.200,0,0,0]")
        assert "out of range" in exc.value.reason

    def test_parse_wrong_arity(self):
        with pytest.raises(InvalidRegion):
            parse_region("[0.1,0.2,0.3]")

    def test_parse_not_a_number(self):
        with pytest.raises(InvalidRegion):
            parse_region("[a,0,0,0]")

    def test_any_precision_accepted(self):
        assert parse_region("[0.5,0.5,0.5,0.5]") == parse_region("[0.50000,0.5,.5,0.5]")

    def test_constructor_enforces_bounds(self):
        with pytest.raises(ValueError):
            Region(0.5, 0.5, 0.2, 0.9)
        with pytest.raises(ValueError):
            Region(-0.1, 0, 1, 1)
        with pytest.raises(ValueError):
            Region(float("nan"), 0, 1, 1)

    def test_format_three_decimals(self):
        assert format_region(Region(0, 0, 1, 1)) == "[0.000,0.000,1.000,1.000]"


class TestSerialize:
    def test_full_frame_grounding(self):
        assert serialize([GroundingSegment(Region(0, 0, 1, 1))]) == "<box>[0.000,0.000,1.000,1.000]</box>"

    def test_plain_text(self):
        assert serialize([TextSegment("hi")]) == "hi"

    def test_round_trip_of_parse_example(self):
        msg = parse('Sure. <Edit>remove the dog</Edit><box>[0.320,0.410,0.780,0.950]</box>')
        assert parse(serialize(msg)).segments == msg.segments

    def test_in_span_regions_serialized_inside_span(self):
        seg = TaskSegment(TaskKind.IMAGE_SEG, "the cat", (Region(0.1, 0.1, 0.4, 0.4),))
        assert serialize([seg]) == "<Seg>the cat<box>[0.100,0.100,0.400,0.400]</box></Seg>"

    def test_bad_region_rejected(self):
        bad = Region(0, 0, 1, 1)
        object.__setattr__(bad, "x2", 2.0)
        with pytest.raises(InvalidSegment):
            serialize([GroundingSegment(bad)])

    def test_round_trip_random_messages(self):
        rng = random.Random(99)
        for _ in range(500):
            msg = rand_message(rng)
            assert validate(msg) == []
            assert parse(serialize(msg)).segments == msg.segments


class TestValidate:
    def test_well_formed_edit_with_box(self):
        msg = parse('<Edit>remove the dog</Edit><box>[0.320,0.410,0.780,0.950]</box>')
        assert validate(msg) == []

    def test_missing_region_flagged(self):
        msg = ParsedMessage((TaskSegment(TaskKind.IMAGE_SEG, "the cat", ()),))
        (violation,) = validate(msg)
        assert violation.code == MISSING_REGION

    def test_generation_needs_no_region(self):
        msg = ParsedMessage((TaskSegment(TaskKind.IMAGE_GEN, "a sunset", ()),))
        assert validate(msg) == []

    def test_whitespace_separated_box_attaches(self):
        msg = parse('<Seg>cat</Seg> <box>[0.1,0.1,0.2,0.2]</box>')
        assert validate(msg) == []
        regions = effective_regions(msg.segments)
        assert regions[0] == (Region(0.1, 0.1, 0.2, 0.2),)

    def test_box_after_text_does_not_attach(self):
        msg = parse('<Seg>cat</Seg> and here <box>[0.1,0.1,0.2,0.2]</box>')
        codes = [v.code for v in validate(msg)]
        assert codes == [MISSING_REGION]

    def test_region_chain_attaches(self):
        msg = parse('<Edit>recolor</Edit><box>[0,0,0.5,0.5]</box> <box>[0.5,0.5,1,1]</box>')
        regions = effective_regions(msg.segments)
        assert len(regions[0]) == 2

    def test_embedded_markup_flagged(self):
        msg = ParsedMessage((TextSegment("see <Edit> here"),))
        (violation,) = validate(msg)
        assert violation.code == EMBEDDED_MARKUP

    def test_adjacent_text_segments_flagged(self):
        msg = ParsedMessage((TextSegment("a"), TextSegment("b")))
        (violation,) = validate(msg)
        assert violation.code == NONCANONICAL_TEXT

    def test_violations_serialize_to_json(self):
        msg = ParsedMessage((TaskSegment(TaskKind.IMAGE_SEG, "x", ()),))
        (violation,) = validate(msg)
        d = violation.to_json_dict()
        assert set(d) == {"code", "offset", "detail"}


class TestFuzz:
    def test_parse_is_total_over_random_bytes(self):
        rng = random.Random(7)
        for _ in range(2000):
            raw = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40)))
            text = raw.decode("latin-1")
            try:
                msg = parse(text)
            except MalformedToken:
                continue
            assert "".join(
                text[seg.start : seg.end] for seg in msg.segments
            ) == text

    def test_parse_is_total_over_tagged_soup(self):
        rng = random.Random(8)
        atoms = ["<Edit>", "</Edit>", "<box>", "</box>", "[0,0,1,1]", "x", "<", ">", "</", "<Seg>", "1.5", ","]
        for _ in range(2000):
            text = "".join(rng.choice(atoms) for _ in range(rng.randrange(0, 10)))
            try:
                parse(text)
            except MalformedToken:
                pass
