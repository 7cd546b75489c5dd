from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvc.alignment import (FramePhoneMap, RawSegment, collapse, parse_alignment, parse_textgrid, parse_tsv,
                           serialize_tsv, to_frames)
from pvc.errors import ContractViolation, EmptyInputError, ParseError, ValidationError

HUA2 = "HH\t0.00\t0.05\nUW2\t0.05\t0.08\nAA2\t0.08\t0.14\n"

TEXTGRID = '''File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 0.14
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 0.14
        intervals: size = 1
        intervals [1]:
            xmin = 0
            xmax = 0.14
            text = "hua2"
    item [2]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 0.14
        intervals: size = 4
        intervals [1]:
            xmin = 0
            xmax = 0.05
            text = "HH"
        intervals [2]:
            xmin = 0.05
            xmax = 0.08
            text = "UW2"
        intervals [3]:
            xmin = 0.08
            xmax = 0.10
            text = ""
        intervals [4]:
            xmin = 0.10
            xmax = 0.14
            text = "AA2"
'''


def test_parse_hua2():
    segs = parse_tsv(HUA2)
    assert [s.label for s in segs] == ["HH", "UW2", "AA2"]
    assert [(s.start, s.end) for s in segs] == [(Decimal("0.00"), Decimal("0.05")),
                                                (Decimal("0.05"), Decimal("0.08")),
                                                (Decimal("0.08"), Decimal("0.14"))]


def test_hua2_frames():
    al, fmap = to_frames(parse_tsv(HUA2), 6, 0.14 / 6)
    assert fmap.phone_of_frame.tolist() == [0, 0, 1, 2, 2, 2]
    assert [(s.label, s.start_frame, s.end_frame) for s in al.segments] == [
        ("HH", 0, 2), ("UW2", 2, 3), ("AA2", 3, 6)]
    assert fmap.segment_ends().tolist() == [1, 2, 5]


def test_single_segment():
    segs = parse_tsv("a\t0\t0.1\n")
    assert len(segs) == 1
    _, fmap = to_frames(segs, 10, 0.01)
    assert fmap.phone_of_frame.tolist() == [0] * 10


def test_gap_becomes_silence():
    segs = parse_tsv("a\t0.00\t0.05\nb\t0.06\t0.10\n")
    al, fmap = to_frames(segs, 10, 0.01)
    assert [s.label for s in al.segments] == ["a", "sil", "b"]
    assert al.segments[1].start_frame == 5 and al.segments[1].end_frame == 6
    assert fmap.num_phones == 3


def test_leading_gap_and_trailing_frames():
    al, fmap = to_frames(parse_tsv("a\t0.02\t0.05\n"), 8, 0.01)
    assert [(s.label, s.start_frame, s.end_frame) for s in al.segments] == [("sil", 0, 2), ("a", 2, 8)]


def test_all_segments_after_audio():
    with pytest.raises(ValidationError):
        to_frames(parse_tsv("a\t5.0\t6.0\n"), 10, 0.01)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 2"):
        parse_tsv("a\t0\t0.1\nb\t0.1\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_tsv("a\tzero\t0.1\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_tsv("a\t0.2\t0.1\n")
    with pytest.raises(ValidationError):
        parse_tsv("a\t0\t0.1\nb\t0.05\t0.2\n")
    with pytest.raises(EmptyInputError):
        parse_tsv("")


def test_parse_alignment_files(tmp_path):
    tsv = tmp_path / "hua2.tsv"
    tsv.write_text(HUA2)
    assert len(parse_alignment(tsv)) == 3
    tg = tmp_path / "hua2.TextGrid"
    tg.write_text(TEXTGRID)
    segs = parse_alignment(tg)
    assert [s.label for s in segs] == ["HH", "UW2", "AA2"]
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    with pytest.raises(EmptyInputError):
        parse_alignment(empty)


def test_textgrid_needs_phones_tier():
    with pytest.raises(ParseError):
        parse_textgrid(TEXTGRID.replace('"phones"', '"other"'))


def test_serialize_round_trip():
    segs = parse_tsv(HUA2)
    again = parse_tsv(serialize_tsv(segs))
    assert again == segs
    assert serialize_tsv(again) == serialize_tsv(segs)


def test_frame_map_contract():
    with pytest.raises(ContractViolation):
        FramePhoneMap(np.array([0, 2]))
    with pytest.raises(ContractViolation):
        FramePhoneMap(np.array([1, 1]))
    with pytest.raises(ContractViolation):
        FramePhoneMap(np.array([0, 1, 0]))


def _owner_by_scan(segments, T, hop):
    """Segment index whose half-open interval holds each frame centre, -1 in gaps."""
    out = []
    for f in range(T):
        c = (f + 0.5) * hop
        owner = -1
        for i, s in enumerate(segments):
            if float(s.start) <= c < float(s.end):
                owner = i
        if c >= float(segments[-1].end):
            owner = len(segments) - 1
        out.append(owner)
    return out


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=15), st.integers(0, 5), st.data())
def test_random_segmentations_round_trip(lengths_ms, tail, data):
    # lengths in units of 10 ms so every segment owns at least one frame centre
    hop = 0.01
    bounds = np.concatenate([[0], np.cumsum(lengths_ms)])
    segs = [RawSegment(f"p{i}", Decimal(int(a)) / 100, Decimal(int(b)) / 100)
            for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]
    T = int(bounds[-1]) + tail
    al, fmap = to_frames(segs, T, hop)
    assert len(fmap) == T
    assert len(collapse(fmap)) == len(segs) == fmap.num_phones
    owners = _owner_by_scan(segs, T, hop)
    assert fmap.phone_of_frame.tolist() == owners
    for s, (a, b) in zip(segs, collapse(fmap)):
        assert abs(a - float(s.start) / hop) <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 5)), min_size=1, max_size=10))
def test_gappy_segmentations_cover_every_frame(pieces):
    segs, t = [], 0
    for i, (length, gap) in enumerate(pieces):
        t += gap
        segs.append(RawSegment(f"p{i}", Decimal(t) / 100, Decimal(t + length) / 100))
        t += length
    T = t
    al, fmap = to_frames(segs, T, 0.01)
    assert al.T == T
    assert np.all(np.diff(fmap.phone_of_frame) >= 0)
    owners = _owner_by_scan(segs, T, 0.01)
    labels = [al.segments[k].label for k in fmap.phone_of_frame]
    for f, o in enumerate(owners):
        assert labels[f] == (segs[o].label if o >= 0 else "sil")
