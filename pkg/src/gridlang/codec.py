"""Token interface: vocabulary, coordinate discretization, box/mask codecs.

Coordinates are discretized to integers in [0, 2*extent] and rendered one
digit token at a time, so the vocabulary stays tiny. Class and color names
are single tokens, which keeps first-token scoring well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

# Fixed special-token order; the vocabulary file lists these first.
PAD = "<PAD>"
EOS = "<EOS>"
BOS = "<BOS>"
BOX_OPEN = "<box>"
BOX_CLOSE = "</box>"
MASK = "<MASK>"
DEPTH = "<DEPTH>"
NORMAL_X = "<NORMAL_X>"
NORMAL_Y = "<NORMAL_Y>"
NORMAL_Z = "<NORMAL_Z>"
COMMA = ","
PERIOD = "."

SPECIALS = [PAD, EOS, BOS, BOX_OPEN, BOX_CLOSE, MASK, DEPTH,
            NORMAL_X, NORMAL_Y, NORMAL_Z, COMMA, PERIOD]
DIGITS = [str(d) for d in range(10)]
CLASS_NAMES = ["circle", "square", "triangle", "ring", "bar"]
COLOR_NAMES = ["red", "green", "blue", "yellow", "magenta", "cyan"]
TASK_WORDS = ["detect", "outline", "segment", "refer", "depth", "normals", "the"]


class CodecError(ValueError):
    """Base class for malformed sequences; carries the offending token index."""

    def __init__(self, message: str, index: int = -1):
        super().__init__(message)
        self.index = index


class OutOfBounds(CodecError):
    pass


class UnknownClass(CodecError):
    pass


class MalformedBox(CodecError):
    pass


class BadMaskCount(CodecError):
    pass


class Vocabulary:
    """Bijective token <-> id map with dense ids; specials come first."""

    def __init__(self, tokens: list[str] | None = None):
        if tokens is None:
            tokens = SPECIALS + DIGITS + CLASS_NAMES + COLOR_NAMES + TASK_WORDS
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for sp in SPECIALS:
            if sp not in tokens:
                raise ValueError(f"vocabulary missing special token {sp!r}")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        self.pad = self.ids[PAD]
        self.eos = self.ids[EOS]
        self.bos = self.ids[BOS]
        self.box_open = self.ids[BOX_OPEN]
        self.box_close = self.ids[BOX_CLOSE]
        self.mask = self.ids[MASK]
        self.depth = self.ids[DEPTH]
        self.normal_xyz = (self.ids[NORMAL_X], self.ids[NORMAL_Y], self.ids[NORMAL_Z])
        self.comma = self.ids[COMMA]
        self.period = self.ids[PERIOD]
        self.digit_ids = {self.ids[d]: int(d) for d in DIGITS}
        self.class_ids = {self.ids[c]: i for i, c in enumerate(CLASS_NAMES)
                          if c in self.ids}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        if token not in self.ids:
            raise KeyError(f"unknown token {token!r}")
        return self.ids[token]

    def encode_all(self, tokens: list[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def class_name(self, class_id: int) -> str:
        return CLASS_NAMES[class_id]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class BoxAnn:
    """Continuous-coordinate box with a class label."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    def validate(self, w: float, h: float) -> None:
        if not (0 <= self.x1 <= self.x2 <= w and 0 <= self.y1 <= self.y2 <= h):
            raise ValueError(f"invalid box {self} for {w}x{h} image")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Prediction:
    """Structured parse of one decoded subsequence."""

    kind: str  # "box" | "mask" | "empty"
    class_id: int | None = None
    quant_box: tuple[int, int, int, int] | None = None
    mask_token_count: int = 0
    score: float = float("nan")
    mask_positions: list[int] = field(default_factory=list)


def discretize(v: float, extent: float) -> int:
    """Map a continuous coordinate to an integer bin in [0, 2*extent]."""
    if v < -1e-6 or v > extent + 1e-6:
        raise OutOfBounds(f"coordinate {v} outside [0, {extent}]")
    rng = int(round(2 * extent))
    # round half away from zero, then clamp
    q = math.floor(v * rng / extent + 0.5)
    return min(max(q, 0), rng)


def undiscretize(q: int, extent: float) -> float:
    rng = int(round(2 * extent))
    return q * extent / rng


def _digit_tokens(value: int, vocab: Vocabulary) -> list[int]:
    return [vocab.encode(ch) for ch in str(value)]


def serialize_box(box: BoxAnn, class_name: str, extent_w: float, extent_h: float,
                  vocab: Vocabulary) -> list[int]:
    """class , <box> x1 , y1 , x2 , y2 </box> as token ids."""
    if class_name not in vocab.ids or class_name not in CLASS_NAMES:
        raise UnknownClass(f"unknown class {class_name!r}")
    qx1 = discretize(box.x1, extent_w)
    qy1 = discretize(box.y1, extent_h)
    qx2 = discretize(box.x2, extent_w)
    qy2 = discretize(box.y2, extent_h)
    out = [vocab.encode(class_name), vocab.comma, vocab.box_open]
    for i, q in enumerate((qx1, qy1, qx2, qy2)):
        if i:
            out.append(vocab.comma)
        out.extend(_digit_tokens(q, vocab))
    out.append(vocab.box_close)
    return out


def serialize_mask_request(class_name: str, n_tokens: int, vocab: Vocabulary) -> list[int]:
    """class , <MASK> * n_tokens as token ids."""
    if class_name not in vocab.ids or class_name not in CLASS_NAMES:
        raise UnknownClass(f"unknown class {class_name!r}")
    return [vocab.encode(class_name), vocab.comma] + [vocab.mask] * n_tokens


def _read_number(seq: list[int], pos: int, vocab: Vocabulary) -> tuple[int, int]:
    digits = []
    while pos < len(seq) and seq[pos] in vocab.digit_ids:
        digits.append(vocab.digit_ids[seq[pos]])
        pos += 1
    if not digits:
        raise MalformedBox("expected digit inside <box>...</box>", pos)
    value = 0
    for d in digits:
        value = value * 10 + d
    return value, pos


def parse_response(seq: list[int], expected_mask_tokens: int,
                   vocab: Vocabulary) -> Prediction:
    """Pattern-match one decoded subsequence into a Prediction.

    Accepts ``<EOS>`` (empty), ``class,<box>a,b,c,d</box><EOS>`` and
    ``class,<MASK>*n<EOS>``. Raises typed CodecErrors with the offending
    token index; never inspects anything past ``<EOS>``.
    """
    seq = list(seq)
    if not seq or seq[0] == vocab.eos:
        return Prediction(kind="empty")
    first = seq[0]
    if first not in vocab.class_ids:
        raise UnknownClass(f"first token {vocab.tokens[first]!r} is not a class", 0)
    class_id = vocab.class_ids[first]
    if len(seq) < 2 or seq[1] != vocab.comma:
        raise MalformedBox("expected ',' after class token", 1)
    if len(seq) < 3:
        raise MalformedBox("truncated response", 2)
    pos = 2
    if seq[pos] == vocab.box_open:
        pos += 1
        coords = []
        for i in range(4):
            if i:
                if pos >= len(seq) or seq[pos] != vocab.comma:
                    raise MalformedBox("expected ',' between coordinates", pos)
                pos += 1
            value, pos = _read_number(seq, pos, vocab)
            coords.append(value)
        if pos >= len(seq) or seq[pos] != vocab.box_close:
            raise MalformedBox("expected </box>", pos)
        pos += 1
        if pos >= len(seq) or seq[pos] != vocab.eos:
            raise MalformedBox("expected <EOS> after </box>", pos)
        return Prediction(kind="box", class_id=class_id, quant_box=tuple(coords))
    if seq[pos] == vocab.mask:
        start = pos
        while pos < len(seq) and seq[pos] == vocab.mask:
            pos += 1
        count = pos - start
        if pos >= len(seq) or seq[pos] != vocab.eos or count != expected_mask_tokens:
            raise BadMaskCount(
                f"expected {expected_mask_tokens} <MASK> tokens, got {count}", pos)
        return Prediction(kind="mask", class_id=class_id, mask_token_count=count,
                          mask_positions=list(range(start, start + count)))
    raise MalformedBox("expected <box> or <MASK> after class", pos)
