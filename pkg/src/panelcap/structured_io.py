"""Structured caption grammar: one ``L: caption`` line per panel, then ``[DET]``.

Grammar (applied to each ``\\n``-separated line after trimming)::

    caption line   ^([A-Za-z])\\s*:\\s*(\\S.*)$
    trigger line   ^\\[DET\\]$

Lines that match neither are skipped. Parsing stops at the first trigger
line; anything after it is ignored.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DET_TOKEN = "[DET]"
LINE_RE = re.compile(r"^([A-Za-z])\s*:\s*(\S.*)$")

CAPTIONING_PROMPT = (
    "You are given a scientific compound figure.\n"
    "Task: detect subfigures and, for each detected subfigure that shows a visible alphabetic "
    "label A to Z or a to z, write exactly one short scientific caption.\n"
    "Formatting rules:\n"
    "1) Output one line per subfigure in ascending label order A, B, C, ...\n"
    '2) Use uppercase labels and the exact format: "A: <caption>".\n'
    "3) After listing all subfigure captions, output a single [DET] token on a NEW line.\n"
    "Return ONLY the caption lines followed by the final [DET]; no extra text."
)

DETECTION_PROMPT = (
    "You are given a scientific compound figure containing multiple sub-panels A, B, C, ...\n"
    "Detect all sub-panels and output ONLY a JSON array.\n"
    "Each element must be an object with fields:\n"
    '- "class": an integer in [0, 25] where A maps to 0, B maps to 1, ..., Z maps to 25\n'
    '- "bbox_2d": [x_min, y_min, x_max, y_max] using normalized coordinates in range [0, 1000]\n'
    "Rules:\n"
    "- Do not output any text outside the JSON array.\n"
    "- bbox_2d must satisfy x_min < x_max and y_min < y_max.\n"
    "- Include every detected panel; multiple boxes may share the same class."
)

PROMPT_VERSION = 1


def normalize_label(letter: str) -> str:
    if len(letter) != 1 or not ("A" <= letter.upper() <= "Z"):
        raise ValueError(f"panel label must be a single letter A-Z, got {letter!r}")
    return letter.upper()


@dataclass(frozen=True)
class LabeledCaption:
    label: str
    text: str

    def __post_init__(self):
        object.__setattr__(self, "label", normalize_label(self.label))
        text = self.text.strip()
        if not text:
            raise ValueError("caption text is empty")
        if "\n" in text or "\r" in text:
            raise ValueError("caption text must be a single line")
        object.__setattr__(self, "text", text)


@dataclass(frozen=True)
class StructuredOutput:
    lines: tuple[LabeledCaption, ...] = field(default_factory=tuple)
    det_terminated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], det_terminated: bool = True) -> "StructuredOutput":
        return cls(tuple(LabeledCaption(l, t) for l, t in pairs), det_terminated)

    @property
    def labels(self) -> list[str]:
        return [ln.label for ln in self.lines]

    def first_by_label(self) -> dict[str, str]:
        """Label -> caption keeping the first occurrence of duplicated labels."""
        out: dict[str, str] = {}
        for ln in self.lines:
            out.setdefault(ln.label, ln.text)
        return out


def parse_structured(raw: str) -> StructuredOutput:
    lines: list[LabeledCaption] = []
    det = False
    for line in raw.split("\n"):
        line = line.strip()
        if line == DET_TOKEN:
            det = True
            break
        m = LINE_RE.match(line)
        if m:
            lines.append(LabeledCaption(m.group(1), m.group(2)))
    return StructuredOutput(tuple(lines), det)


def serialize_structured(s: StructuredOutput) -> str:
    out = [f"{ln.label}: {ln.text}" for ln in s.lines]
    if s.det_terminated:
        out.append(DET_TOKEN)
    return "\n".join(out)


def captioning_prompt() -> str:
    return CAPTIONING_PROMPT


def detection_prompt() -> str:
    return DETECTION_PROMPT


def fewshot_prompt(exemplars: Sequence[LabeledCaption] = ()) -> str:
    """Captioning prompt followed by exemplar caption lines the answer should continue."""
    if not exemplars:
        return CAPTIONING_PROMPT
    shots = serialize_structured(StructuredOutput(tuple(exemplars), False))
    return f"{CAPTIONING_PROMPT}\nKnown captions:\n{shots}"
