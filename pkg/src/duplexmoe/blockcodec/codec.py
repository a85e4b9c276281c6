"""Encoding, decoding, and validation of the interleaved time-block stream.

Stream shape per session::

    <bop> p... <eop>  ( <bos> s*S <eos>  <boi> i*G <eoi> ...  <bot> text <eot>
    <boa> a*A <eoa> )*

Segment order inside a block is fixed: speech, image(s), text, action. A
speech-only block carries one empty image segment and an all-<noop> action
payload. Text payloads are either exactly X tokens or the single <silence>
token.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..samoe.routing import ModalityTag
from .vocab import VocabLayout


class CodecError(ValueError):
    """Stream violates the block grammar; message carries offset and context."""


class _StreamEnded(CodecError):
    """The stream stopped mid-block (partial tail, not a violation)."""


class Mode(Enum):
    DEFAULT = "default"
    SPEECH_ONLY = "speech_only"


@dataclass(frozen=True)
class Geometry:
    speech_slots: int = 5
    image_slots: int = 4
    text_slots: int = 8
    action_slots: int = 2
    n_image_segments: int = 1


GEOM = Geometry()


@dataclass(frozen=True)
class Segment:
    tag: ModalityTag
    payload: tuple[int, ...]


@dataclass(frozen=True)
class Block:
    tick: int
    speech: tuple[int, ...]
    images: tuple[tuple[int, ...], ...]
    text: tuple[int, ...]
    action: tuple[int, ...]

    @property
    def speech_only(self) -> bool:
        return all(len(seg) == 0 for seg in self.images)

    def segments(self) -> list[Segment]:
        segs = [Segment(ModalityTag.SPEECH_IN, self.speech)]
        segs += [Segment(ModalityTag.IMAGE_IN, seg) for seg in self.images]
        segs += [Segment(ModalityTag.TEXT_OUT, self.text),
                 Segment(ModalityTag.ACTION_OUT, self.action)]
        return segs


@dataclass
class DecodedStream:
    prompt: tuple[int, ...] | None
    blocks: list[Block]
    partial: list[tuple[int, int]]  # unconsumed (token, tag) tail, if any


def _require_slice(layout, tok: int, slc: tuple[int, int], what: str,
                   offset: int) -> None:
    if not (slc[0] <= tok < slc[1]):
        found = layout.name(tok) if 0 <= tok < layout.size else str(tok)
        raise CodecError(
            f"token {found!r} at offset {offset} outside the {what} vocab slice")


def prompt_prefix(prompt_ids, layout: VocabLayout) -> list[tuple[int, int]]:
    """``<bop> p... <eop>`` pairs, inserted once at the start of a session."""
    out = [(layout.id("<bop>"), int(ModalityTag.B_PROMPT))]
    for off, tok in enumerate(prompt_ids):
        _require_slice(layout, tok, layout.prompt, "prompt", off)
        out.append((int(tok), int(ModalityTag.PROMPT)))
    out.append((layout.id("<eop>"), int(ModalityTag.B_PROMPT)))
    return out


def encode_block(speech, images, text, action, mode: Mode,
                 layout: VocabLayout, geom: Geometry = GEOM) -> list[tuple[int, int]]:
    """Tokenize one block's payloads into the fixed segment order."""
    if images and isinstance(images[0], (int, np.integer)):
        images = [images]
    images = [tuple(seg) for seg in images] if images else []
    if mode == Mode.SPEECH_ONLY:
        if any(len(seg) for seg in images):
            raise CodecError("speech-only block cannot carry image tokens")
        images = [()]
        if any(a != layout.noop for a in action):
            raise CodecError("speech-only block requires an all-<noop> action payload")
    else:
        if len(images) != geom.n_image_segments:
            raise CodecError(
                f"default-mode block needs {geom.n_image_segments} image "
                f"segment(s), got {len(images)}")
        for seg in images:
            if len(seg) != geom.image_slots:
                raise CodecError(
                    f"image segment length {len(seg)} != {geom.image_slots}")

    if len(speech) != geom.speech_slots:
        raise CodecError(
            f"speech payload length {len(speech)} != {geom.speech_slots}")
    silence_only = len(text) == 1 and text[0] == layout.silence
    if not silence_only and len(text) != geom.text_slots:
        raise CodecError(
            f"text payload must be <silence> or exactly {geom.text_slots} "
            f"tokens, got {len(text)}")
    if len(action) != geom.action_slots:
        raise CodecError(
            f"action payload length {len(action)} != {geom.action_slots}")

    out: list[tuple[int, int]] = []

    def seg(opener, closer, payload, tag, slc, what):
        out.append((layout.id(opener), int(ModalityTag.boundary(tag))))
        for tok in payload:
            _require_slice(layout, int(tok), slc, what, len(out))
            out.append((int(tok), int(tag)))
        out.append((layout.id(closer), int(ModalityTag.boundary(tag))))

    seg("<bos>", "<eos>", speech, ModalityTag.SPEECH_IN, layout.speech, "speech")
    for image_seg in images:
        seg("<boi>", "<eoi>", image_seg, ModalityTag.IMAGE_IN, layout.image, "image")
    seg("<bot>", "<eot>", text, ModalityTag.TEXT_OUT, layout.text, "text")
    seg("<boa>", "<eoa>", action, ModalityTag.ACTION_OUT, layout.action, "action")
    return out


def encode_stream(prompt_ids, blocks, layout: VocabLayout,
                  geom: Geometry = GEOM):
    """Whole-session encoding: (tokens, tags, ticks) int arrays.

    Prompt positions carry tick -1; each block's positions carry its tick.
    """
    pairs: list[tuple[int, int]] = []
    ticks: list[int] = []
    if prompt_ids is not None:
        pp = prompt_prefix(prompt_ids, layout)
        pairs += pp
        ticks += [-1] * len(pp)
    for blk in blocks:
        mode = Mode.SPEECH_ONLY if blk.speech_only else Mode.DEFAULT
        enc = encode_block(blk.speech, list(blk.images), blk.text, blk.action,
                           mode, layout, geom)
        pairs += enc
        ticks += [blk.tick] * len(enc)
    tokens = np.array([p[0] for p in pairs], dtype=np.int64)
    tags = np.array([p[1] for p in pairs], dtype=np.int8)
    return tokens, tags, np.array(ticks, dtype=np.int64)


class _Cursor:
    def __init__(self, pairs):
        self.pairs = [(int(t), int(g)) for t, g in pairs]
        self.i = 0

    def done(self) -> bool:
        return self.i >= len(self.pairs)

    def peek(self):
        return self.pairs[self.i]

    def next(self):
        pair = self.pairs[self.i]
        self.i += 1
        return pair


def _fail(cur: _Cursor, layout, expected: str) -> CodecError:
    if cur.done():
        return _StreamEnded(
            f"stream ended at offset {cur.i}; expected {expected}")
    tok, tag = cur.peek()
    found = layout.name(tok) if 0 <= tok < layout.size else f"id:{tok}"
    return CodecError(
        f"order violation at offset {cur.i}: expected {expected}, "
        f"found {found!r} (tag {tag})")


def _boundary(cur: _Cursor, layout, name: str, tag: ModalityTag) -> None:
    want = (layout.id(name), int(tag))
    if cur.done() or cur.peek() != want:
        raise _fail(cur, layout, repr(name))
    cur.next()


def _payload(cur: _Cursor, layout, tag: ModalityTag, slc, limit: int,
             what: str) -> list[int]:
    toks: list[int] = []
    while not cur.done() and cur.peek()[1] == int(tag):
        tok, _ = cur.next()
        _require_slice(layout, tok, slc, what, cur.i - 1)
        toks.append(tok)
        if len(toks) > limit:
            raise CodecError(
                f"oversize {what} segment at offset {cur.i - 1}: "
                f"more than {limit} payload tokens")
    return toks


def _decode_block(cur: _Cursor, layout, geom: Geometry, tick: int) -> Block:
    _boundary(cur, layout, "<bos>", ModalityTag.B_SPEECH_IN)
    speech = _payload(cur, layout, ModalityTag.SPEECH_IN, layout.speech,
                      geom.speech_slots, "speech")
    if len(speech) != geom.speech_slots:
        raise _fail(cur, layout, f"{geom.speech_slots} speech tokens")
    _boundary(cur, layout, "<eos>", ModalityTag.B_SPEECH_IN)

    images: list[tuple[int, ...]] = []
    _boundary(cur, layout, "<boi>", ModalityTag.B_IMAGE_IN)
    first = _payload(cur, layout, ModalityTag.IMAGE_IN, layout.image,
                     geom.image_slots, "image")
    _boundary(cur, layout, "<eoi>", ModalityTag.B_IMAGE_IN)
    images.append(tuple(first))
    speech_only = len(first) == 0
    if not speech_only:
        if len(first) != geom.image_slots:
            raise CodecError(
                f"image segment before offset {cur.i} has {len(first)} "
                f"tokens, expected {geom.image_slots} or none")
        for _ in range(geom.n_image_segments - 1):
            _boundary(cur, layout, "<boi>", ModalityTag.B_IMAGE_IN)
            extra = _payload(cur, layout, ModalityTag.IMAGE_IN, layout.image,
                             geom.image_slots, "image")
            if len(extra) != geom.image_slots:
                raise _fail(cur, layout, f"{geom.image_slots} image tokens")
            _boundary(cur, layout, "<eoi>", ModalityTag.B_IMAGE_IN)
            images.append(tuple(extra))

    _boundary(cur, layout, "<bot>", ModalityTag.B_TEXT_OUT)
    text = _payload(cur, layout, ModalityTag.TEXT_OUT, layout.text,
                    geom.text_slots, "text")
    silence_only = len(text) == 1 and text[0] == layout.silence
    if not silence_only and len(text) != geom.text_slots:
        raise _fail(cur, layout, f"<silence> or {geom.text_slots} text tokens")
    _boundary(cur, layout, "<eot>", ModalityTag.B_TEXT_OUT)

    _boundary(cur, layout, "<boa>", ModalityTag.B_ACTION_OUT)
    action = _payload(cur, layout, ModalityTag.ACTION_OUT, layout.action,
                      geom.action_slots, "action")
    if len(action) != geom.action_slots:
        raise _fail(cur, layout, f"{geom.action_slots} action tokens")
    if speech_only and any(a != layout.noop for a in action):
        raise CodecError(
            f"speech-only block before offset {cur.i} carries a real action")
    _boundary(cur, layout, "<eoa>", ModalityTag.B_ACTION_OUT)

    return Block(tick=tick, speech=tuple(speech), images=tuple(images),
                 text=tuple(text), action=tuple(action))


def decode_stream(pairs, layout: VocabLayout,
                  geom: Geometry = GEOM) -> DecodedStream:
    """Parse a (token, tag) sequence greedily into blocks.

    Grammar violations raise ``CodecError`` naming the offset and the
    expected-vs-found tokens; a stream that simply stops mid-block yields
    the unconsumed tail as ``partial`` instead.
    """
    cur = _Cursor(pairs)
    prompt: tuple[int, ...] | None = None
    if not cur.done() and cur.peek() == (layout.id("<bop>"), int(ModalityTag.B_PROMPT)):
        cur.next()
        prompt = tuple(_payload(cur, layout, ModalityTag.PROMPT, layout.prompt,
                                layout.prompt[1] - layout.prompt[0], "prompt"))
        _boundary(cur, layout, "<eop>", ModalityTag.B_PROMPT)

    blocks: list[Block] = []
    while not cur.done():
        mark = cur.i
        try:
            blocks.append(_decode_block(cur, layout, geom, tick=len(blocks)))
        except _StreamEnded:
            return DecodedStream(prompt, blocks, cur.pairs[mark:])
    return DecodedStream(prompt, blocks, [])


# ---------------------------------------------------------------------------
# text dump fixture format
# ---------------------------------------------------------------------------

def block_to_text(block: Block, layout: VocabLayout) -> str:
    def names(ids):
        return " ".join(layout.name(t) for t in ids)

    parts = [f"S[{names(block.speech)}]"]
    parts += [f"I[{names(seg)}]" for seg in block.images]
    parts += [f"T[{names(block.text)}]", f"A[{names(block.action)}]"]
    return " ".join(parts)


def block_from_text(line: str, layout: VocabLayout, tick: int = 0) -> Block:
    import re

    fields = re.findall(r"([SITA])\[([^\]]*)\]", line)
    speech: tuple[int, ...] = ()
    images: list[tuple[int, ...]] = []
    text: tuple[int, ...] = ()
    action: tuple[int, ...] = ()
    for kind, body in fields:
        ids = tuple(layout.id(nm) for nm in body.split())
        if kind == "S":
            speech = ids
        elif kind == "I":
            images.append(ids)
        elif kind == "T":
            text = ids
        else:
            action = ids
    return Block(tick=tick, speech=speech, images=tuple(images) or ((),),
                 text=text, action=action)
