"""Modality tags and the total tag-to-expert routing rule."""

from __future__ import annotations

from enum import IntEnum


class ModalityTag(IntEnum):
    """Segment kind of one stream position.

    Boundary tags carry the tag of the segment they delimit; use
    ``ModalityTag.boundary(tag)`` / ``tag.owner()`` to move between them.
    PAD marks positions past a sequence end inside rectangular batches and
    never appears in a real stream.
    """

    SPEECH_IN = 0
    IMAGE_IN = 1
    TEXT_OUT = 2
    ACTION_OUT = 3
    PROMPT = 4
    B_SPEECH_IN = 5
    B_IMAGE_IN = 6
    B_TEXT_OUT = 7
    B_ACTION_OUT = 8
    B_PROMPT = 9
    PAD = 10

    @classmethod
    def boundary(cls, tag: "ModalityTag") -> "ModalityTag":
        if tag.is_boundary():
            raise ValueError(f"{tag.name} is already a boundary tag")
        return cls(tag.value + 5)

    def is_boundary(self) -> bool:
        return self.B_SPEECH_IN <= self.value <= self.B_PROMPT

    def owner(self) -> "ModalityTag":
        """The segment tag this position belongs to (identity off boundaries)."""
        if self.is_boundary():
            return ModalityTag(self.value - 5)
        return self


class ExpertId(IntEnum):
    SPEECH_EXPERT = 0
    ACTION_EXPERT = 1


_ROUTE = {
    ModalityTag.SPEECH_IN: ExpertId.SPEECH_EXPERT,
    ModalityTag.TEXT_OUT: ExpertId.SPEECH_EXPERT,
    ModalityTag.PROMPT: ExpertId.SPEECH_EXPERT,
    ModalityTag.IMAGE_IN: ExpertId.ACTION_EXPERT,
    ModalityTag.ACTION_OUT: ExpertId.ACTION_EXPERT,
    ModalityTag.PAD: ExpertId.SPEECH_EXPERT,
}


def route(tag: ModalityTag) -> ExpertId:
    """Route a position to the expert owning its modality.

    Speech, text, and the system prompt go to the speech expert; vision and
    action go to the action expert. A boundary routes with the segment it
    delimits.
    """
    return _ROUTE[ModalityTag(tag).owner()]


def route_lut() -> list[int]:
    """Routing as an int lookup table indexed by tag value (hot-path form)."""
    return [route(ModalityTag(v)).value for v in range(len(ModalityTag))]
