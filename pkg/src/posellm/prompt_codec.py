"""Keypoint catalog, instruction prompts, character tokenizer and coordinate text."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from typing import Iterable, List, Optional, Sequence, Tuple

import math


class TokenizationError(ValueError):
    pass


def _load_catalog() -> Tuple[Tuple[str, str], ...]:
    text = resources.files("posellm").joinpath("data/keypoints.tsv").read_text("utf-8")
    entries = []
    for line in text.splitlines():
        if not line:
            continue
        name, description = line.split("\t", 1)
        entries.append((name, description))
    return tuple(entries)


KEYPOINT_CATALOG: Tuple[Tuple[str, str], ...] = _load_catalog()
KEYPOINT_NAMES: Tuple[str, ...] = tuple(name for name, _ in KEYPOINT_CATALOG)
NUM_KEYPOINTS = len(KEYPOINT_CATALOG)

QUESTION_TEMPLATE = "Where is the {name} of this person? Answer:"

# Lowercase, digits and ` .,?='-` plus the four characters the prompt template
# needs (`T` from the catalog, `W`/`A`/`:` from the question).
ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 .,?='-TWA:"
PAD, BOS, EOS = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")


@dataclass(frozen=True)
class Vocabulary:
    symbols: Tuple[str, ...]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(SPECIAL_TOKENS + tuple(ALPHABET))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad(self) -> int:
        return PAD

    @property
    def bos(self) -> int:
        return BOS

    @property
    def eos(self) -> int:
        return EOS

    def to_id(self) -> dict:
        return {s: i for i, s in enumerate(self.symbols)}

    def dump(self) -> str:
        """``symbol<TAB>id`` lines, one per entry."""
        return "".join(f"{s}\t{i}\n" for i, s in enumerate(self.symbols))


VOCAB = Vocabulary.default()
_CHAR_TO_ID = {c: i for i, c in enumerate(VOCAB.symbols) if i >= len(SPECIAL_TOKENS)}


def tokenize(text: str) -> List[int]:
    ids = []
    for pos, ch in enumerate(text):
        try:
            ids.append(_CHAR_TO_ID[ch])
        except KeyError:
            raise TokenizationError(f"character {ch!r} at offset {pos} is not in the alphabet") from None
    return ids


def detokenize(ids: Iterable[int], keep_special: bool = False) -> str:
    """Map ids back to text. Special tokens are dropped unless ``keep_special``."""
    out = []
    for i in ids:
        i = int(i)
        if i < len(SPECIAL_TOKENS):
            if keep_special:
                out.append(SPECIAL_TOKENS[i])
            continue
        out.append(VOCAB.symbols[i])
    return "".join(out)


def keypoint_index(name: str) -> int:
    try:
        return KEYPOINT_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown keypoint {name!r}; valid names: {', '.join(KEYPOINT_NAMES)}") from None


def build_prompt(keypoint: int) -> str:
    if not isinstance(keypoint, int) or not 0 <= keypoint < NUM_KEYPOINTS:
        raise ValueError(f"keypoint index must be in [0, {NUM_KEYPOINTS - 1}], got {keypoint!r}")
    name, description = KEYPOINT_CATALOG[keypoint]
    return f"{description} {QUESTION_TEMPLATE.format(name=name)}"


_THOUSANDTH = Decimal("0.001")


def _fmt(v: float) -> str:
    if math.isnan(v):
        raise ValueError("coordinate is NaN")
    v = min(max(float(v), 0.0), 1.0)
    return str(Decimal(repr(v)).quantize(_THOUSANDTH, rounding=ROUND_HALF_UP))


def serialize_coords(x: float, y: float) -> str:
    """Render a normalized point as ``x=0.ddd,y=0.ddd`` (round half up, clamped to [0, 1])."""
    return f"x={_fmt(x)},y={_fmt(y)}"


_ANSWER_RE = re.compile(r"x=([01]\.\d{3}),y=([01]\.\d{3})")


def parse_coords(answer: str) -> Optional[Tuple[float, float]]:
    """Inverse of :func:`serialize_coords`; returns ``None`` on any malformation."""
    m = _ANSWER_RE.fullmatch(answer.strip(" "))
    if m is None:
        return None
    x, y = float(m.group(1)), float(m.group(2))
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        return None
    return x, y


@dataclass(frozen=True)
class InstructionRecord:
    keypoint: int
    prompt_text: str
    answer_text: str
    token_ids: Tuple[int, ...]
    answer_mask: Tuple[bool, ...]

    @property
    def prompt_ids(self) -> Tuple[int, ...]:
        """The ``bos`` + prompt prefix fed to the decoder at inference time."""
        return self.token_ids[: self.answer_mask.index(True)]


def prompt_ids(keypoint: int) -> List[int]:
    return [BOS] + tokenize(build_prompt(keypoint))


def make_training_record(keypoint: int, x: float, y: float) -> InstructionRecord:
    prompt = build_prompt(keypoint)
    answer = serialize_coords(x, y)
    head = [BOS] + tokenize(prompt)
    tail = tokenize(" " + answer) + [EOS]
    return InstructionRecord(
        keypoint=keypoint,
        prompt_text=prompt,
        answer_text=answer,
        token_ids=tuple(head + tail),
        answer_mask=tuple([False] * len(head) + [True] * len(tail)),
    )


def max_record_length() -> int:
    """Longest ``bos + prompt + answer + eos`` sequence over the catalog."""
    answer = len(" " + serialize_coords(0.0, 0.0)) + 1
    return max(len(prompt_ids(k)) for k in range(NUM_KEYPOINTS)) + answer


def answer_length() -> int:
    return len(" " + serialize_coords(0.0, 0.0)) + 1
