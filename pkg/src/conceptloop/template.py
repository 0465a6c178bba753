"""Structured reasoning response: serializer, strict parser and format reward.

Canonical layout::

    <think>..</think> <rule>..</rule> <check>[x1, y1, x2, y2]</check>
    <bbox>[x3, y3, x4, y4]</bbox> <answer>noun phrase</answer>

Whitespace is allowed between elements; anything else outside the tags is
rejected.  Coordinates are printed with four decimals.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources

from .geometry import BoxN

TAGS = ("think", "rule", "check", "bbox", "answer")
TEMPLATE_VERSION = "v1"
_TAG_RE = re.compile(r"</?(think|rule|check|bbox|answer)>")
_NUM = r"\s*([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*"
_BOX_RE = re.compile(r"^\s*\[" + ",".join([_NUM] * 4) + r"\]\s*$")


class ParseError(str, enum.Enum):
    MissingTag = "MissingTag"
    DuplicateTag = "DuplicateTag"
    BadOrder = "BadOrder"
    BadBox = "BadBox"
    BadAnswer = "BadAnswer"
    TrailingGarbage = "TrailingGarbage"


@dataclass(frozen=True)
class StructuredResponse:
    think: str
    rule: str
    check: BoxN
    bbox: BoxN
    answer: str

    def __post_init__(self):
        for name in ("think", "rule", "answer"):
            if _TAG_RE.search(getattr(self, name)):
                raise ValueError(f"{name} text may not contain tag tokens")
        if not 1 <= len(self.answer.split()) <= 3 or self.answer != " ".join(self.answer.split()):
            raise ValueError(f"answer must be 1-3 single-spaced words, got {self.answer!r}")


@dataclass(frozen=True)
class ParseOutcome:
    response: StructuredResponse | None = None
    error: ParseError | None = None

    @property
    def ok(self) -> bool:
        return self.response is not None


def _fmt_box(b: BoxN) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in b.as_tuple()) + "]"


def serialize(r: StructuredResponse) -> str:
    return (f"<think>{r.think}</think> <rule>{r.rule}</rule> "
            f"<check>{_fmt_box(r.check)}</check> <bbox>{_fmt_box(r.bbox)}</bbox> "
            f"<answer>{r.answer}</answer>")


def _parse_box(text: str) -> BoxN | None:
    m = _BOX_RE.match(text)
    if not m:
        return None
    try:
        return BoxN(*(float(g) for g in m.groups()))
    except ValueError:
        return None


_CANONICAL = [t for name in TAGS for t in (f"<{name}>", f"</{name}>")]


def parse(t: str) -> ParseOutcome:
    tokens = list(_TAG_RE.finditer(t))
    names = [m.group(0) for m in tokens]
    for tok in _CANONICAL:
        c = names.count(tok)
        if c == 0:
            return ParseOutcome(error=ParseError.MissingTag)
    for tok in _CANONICAL:
        if names.count(tok) > 1:
            return ParseOutcome(error=ParseError.DuplicateTag)
    if names != _CANONICAL:
        return ParseOutcome(error=ParseError.BadOrder)
    # text outside the elements must be whitespace
    outside = [t[:tokens[0].start()], t[tokens[-1].end():]]
    outside += [t[tokens[i].end():tokens[i + 1].start()] for i in range(1, len(tokens) - 1, 2)]
    if any(s.strip() for s in outside):
        return ParseOutcome(error=ParseError.TrailingGarbage)
    body = {TAGS[i]: t[tokens[2 * i].end():tokens[2 * i + 1].start()] for i in range(len(TAGS))}
    check, bbox = _parse_box(body["check"]), _parse_box(body["bbox"])
    if check is None or bbox is None:
        return ParseOutcome(error=ParseError.BadBox)
    words = body["answer"].split()
    if not 1 <= len(words) <= 3:
        return ParseOutcome(error=ParseError.BadAnswer)
    return ParseOutcome(response=StructuredResponse(
        think=body["think"], rule=body["rule"], check=check, bbox=bbox,
        answer=" ".join(words)))


def format_reward(t: str) -> int:
    return 1 if parse(t).ok else 0


def system_prompt() -> str:
    """The versioned instruction template used for trace dumps."""
    return resources.files("conceptloop.data").joinpath(
        f"template_{TEMPLATE_VERSION}.txt").read_text()


def render_prompt(problem: str, reference_boxes: list[BoxN]) -> str:
    boxes = ", ".join(_fmt_box(b) for b in reference_boxes) or "none"
    return system_prompt().replace("{problem}", problem).replace("{reference_boxes}", boxes)
