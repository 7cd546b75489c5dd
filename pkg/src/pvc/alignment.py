"""Forced-alignment parsing (TSV and TextGrid) and phone-to-frame mapping."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, EmptyInputError, ParseError, ValidationError

SILENCE = "sil"


@dataclass(frozen=True)
class RawSegment:
    label: str
    start: Decimal
    end: Decimal


@dataclass(frozen=True)
class Segment:
    label: str
    start_frame: int
    end_frame: int  # exclusive


@dataclass
class PhoneAlignment:
    segments: list[Segment]

    def __post_init__(self):
        prev_end = 0
        for s in self.segments:
            if s.start_frame != prev_end or s.end_frame <= s.start_frame:
                raise ValidationError(f"segments must tile the frame axis, bad segment {s}")
            prev_end = s.end_frame

    @property
    def T(self) -> int:
        return self.segments[-1].end_frame if self.segments else 0

    def __len__(self) -> int:
        return len(self.segments)


@dataclass
class FramePhoneMap:
    phone_of_frame: np.ndarray

    def __post_init__(self):
        self.phone_of_frame = np.asarray(self.phone_of_frame, dtype=np.int64).reshape(-1)
        p = self.phone_of_frame
        if p.size == 0:
            raise ContractViolation("empty frame map")
        if p[0] != 0 or np.any(np.diff(p) < 0) or np.any(np.diff(p) > 1):
            raise ContractViolation("frame map must be a monotone surjection starting at 0")

    def __len__(self) -> int:
        return self.phone_of_frame.shape[0]

    @property
    def num_phones(self) -> int:
        return int(self.phone_of_frame[-1]) + 1

    def segment_ends(self) -> np.ndarray:
        """Final frame index of every phone segment."""
        p = self.phone_of_frame
        return np.append(np.nonzero(np.diff(p))[0], len(p) - 1)

    @classmethod
    def from_lengths(cls, lengths: Sequence[int]) -> "FramePhoneMap":
        return cls(np.repeat(np.arange(len(lengths)), lengths))


# ------------------------------------------------------------------- parsing


def _decimal(text: str, line: int) -> Decimal:
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise ParseError(f"not a number: {text!r}", line) from None
    if not value.is_finite():
        raise ParseError(f"not a finite number: {text!r}", line)
    return value


def _validate(segments: list[RawSegment], source: str) -> list[RawSegment]:
    if not segments:
        raise EmptyInputError(f"{source}: no segments")
    for a, b in zip(segments, segments[1:]):
        if b.start < a.end:
            raise ValidationError(f"{source}: {b.label!r} at {b.start} overlaps {a.label!r} ending {a.end}")
    return segments


def parse_tsv(text: str, source: str = "<string>") -> list[RawSegment]:
    segments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) != 3:
            raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", lineno)
        label = cols[0].strip()
        if not label:
            raise ParseError("empty label", lineno)
        start, end = _decimal(cols[1], lineno), _decimal(cols[2], lineno)
        if start < 0 or end <= start:
            raise ParseError(f"interval [{start}, {end}) is empty or negative", lineno)
        segments.append(RawSegment(label, start, end))
    return _validate(segments, source)


_TG_FIELD = re.compile(r'^\s*(\w+)\s*=\s*(.*?)\s*$')


def parse_textgrid(text: str, source: str = "<string>", tier: str = "phones") -> list[RawSegment]:
    """Read the interval tier ``tier`` from a long-format TextGrid.

    Empty-labelled intervals are dropped (they become silence on frame
    conversion).
    """
    segments: list[RawSegment] = []
    in_tier = found = False
    cur: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("item [") or stripped.startswith("item["):
            in_tier = False
            continue
        m = _TG_FIELD.match(line)
        if not m:
            continue
        key, value = m.group(1), m.group(2)
        if key == "name":
            in_tier = value.strip('"') == tier
            found = found or in_tier
            continue
        if key == "class" and value.strip('"') != "IntervalTier":
            in_tier = False
            continue
        if not in_tier:
            continue
        if key in ("xmin", "xmax", "text"):
            cur[key] = (value, lineno)
            if key == "text":
                if "xmin" not in cur or "xmax" not in cur:
                    raise ParseError("interval text before its bounds", lineno)
                label = value
                if len(label) < 2 or label[0] != '"' or label[-1] != '"':
                    raise ParseError(f"unquoted interval text {label!r}", lineno)
                label = label[1:-1].replace('""', '"').strip()
                start = _decimal(*cur["xmin"])
                end = _decimal(*cur["xmax"])
                if end <= start:
                    raise ParseError(f"interval [{start}, {end}) is empty", lineno)
                if label:
                    segments.append(RawSegment(label, start, end))
                cur = {}
    if not found:
        raise ParseError(f"no interval tier named {tier!r}")
    return _validate(segments, source)


def parse_alignment(path: str | Path) -> list[RawSegment]:
    """Parse a 3-column TSV (label, start_s, end_s) or a TextGrid ``phones`` tier."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyInputError(f"{path}: empty alignment file")
    if path.suffix.lower() == ".textgrid" or text.lstrip().startswith("File type"):
        return parse_textgrid(text, str(path))
    return parse_tsv(text, str(path))


def serialize_tsv(segments: Sequence[RawSegment]) -> str:
    return "".join(f"{s.label}\t{s.start}\t{s.end}\n" for s in segments)


def segments_to_seconds(al: PhoneAlignment, hop_seconds: float) -> list[RawSegment]:
    """Frame-level alignment back to seconds, for re-serialisation."""
    hop = Decimal(str(hop_seconds))
    return [RawSegment(s.label, s.start_frame * hop, s.end_frame * hop) for s in al.segments]


# ------------------------------------------------------------- frame mapping


def to_frames(segments: Sequence[RawSegment], T: int,
              hop_seconds: float) -> tuple[PhoneAlignment, FramePhoneMap]:
    """Assign every frame to the segment containing its centre time.

    Frames whose centre falls in a gap (or before the first segment) form
    ``sil`` segments; frames past the last segment join the last segment.
    Segments too short to own a frame centre disappear.
    """
    if T < 1 or hop_seconds <= 0:
        raise ContractViolation("need T >= 1 and a positive hop")
    if not segments:
        raise EmptyInputError("no segments")
    centres = (np.arange(T) + 0.5) * hop_seconds
    starts = np.array([float(s.start) for s in segments])
    ends = np.array([float(s.end) for s in segments])
    if starts[0] > centres[-1]:
        raise ValidationError("every segment starts after the last frame")
    # candidate: last segment starting at or before the centre
    k = np.searchsorted(starts, centres, side="right") - 1
    owner = np.full(T, -1)
    valid = k >= 0
    inside = np.zeros(T, dtype=bool)
    inside[valid] = centres[valid] < ends[k[valid]]
    owner[inside] = k[inside]
    owner[centres >= ends[-1]] = len(segments) - 1

    labels: list[str] = []
    bounds: list[int] = []
    key_prev = None
    for f in range(T):
        # gap frames are keyed by the segment they follow so distinct gaps stay distinct
        key = ("seg", int(owner[f])) if owner[f] >= 0 else ("gap", int(k[f]))
        if key != key_prev:
            labels.append(segments[key[1]].label if key[0] == "seg" else SILENCE)
            bounds.append(f)
            key_prev = key
    bounds.append(T)
    segs = [Segment(l, a, b) for l, a, b in zip(labels, bounds[:-1], bounds[1:])]
    lengths = np.diff(bounds)
    return PhoneAlignment(segs), FramePhoneMap.from_lengths(lengths)


def collapse(fmap: FramePhoneMap) -> list[tuple[int, int]]:
    """Run-length collapse of a frame map into ``(start, end_exclusive)`` pairs."""
    ends = fmap.segment_ends() + 1
    starts = np.concatenate([[0], ends[:-1]])
    return list(zip(starts.tolist(), ends.tolist()))
