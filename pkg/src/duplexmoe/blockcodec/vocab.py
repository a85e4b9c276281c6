"""The unified token-id space, partitioned into contiguous modality slices.

Layout order: boundary tokens, prompt words, speech-input words, image
observation symbols, text-output words, action tokens. Routing always keys
off segment tags; the contiguous slices exist so slice membership checks and
per-expert output restriction are cheap and cross-vocab emissions are
structurally impossible.
"""

from __future__ import annotations

from enum import IntEnum

from ..samoe.config import SAMoEConfig, SpecialTokens

GRID_W = 5
GRID_H = 5
# instruction cells address a 6x6 label space; the extra row/column names
# targets the arm cannot reach (motion-defect analogs)
CELL_W = 6
CELL_H = 6

N_QA = 20
N_INTERRUPTS = 10
N_GIBBERISH = 8
N_ECHO_WORDS = 12

REJECT_DIMENSIONS = ("VISUAL", "SEMANTIC", "MOTION", "OUT-OF-CONTEXT")
STATE_WORDS = ("ON-TABLE", "IN-GRIPPER", "AT-GOAL")


class Color(IntEnum):
    RED = 0
    BLUE = 1
    GREEN = 2


COLORS = (Color.RED, Color.BLUE, Color.GREEN)


class VocabLayout:
    """Builds and indexes the default unified vocabulary."""

    def __init__(self):
        self.names: list[str] = []
        self._by_name: dict[str, int] = {}

        def tok(name: str) -> int:
            tid = len(self.names)
            self.names.append(name)
            self._by_name[name] = tid
            return tid

        def block(names) -> tuple[int, int]:
            lo = len(self.names)
            for nm in names:
                tok(nm)
            return lo, len(self.names)

        # structural boundaries, ids fixed by SpecialTokens defaults
        block(["<bos>", "<eos>", "<boi>", "<eoi>", "<bot>", "<eot>",
               "<boa>", "<eoa>", "<bop>", "<eop>"])
        self.prompt = block(["P-DEFAULT", "P-ASR", "P-QA"])

        speech_lo = len(self.names)
        self.spad = tok("<spad>")
        self.move = tok("MOVE")
        self.to = tok("TO")
        self.where = tok("WHERE")
        self.ask = tok("ASK")
        self.obj_words = block([f"OBJ-{i}" for i in range(len(COLORS))])
        self.col_words = block([f"COL-{c.name}" for c in COLORS])
        self.cell_words = block([f"CELL-{x}-{y}"
                                 for x in range(CELL_W) for y in range(CELL_H)])
        self.q_words = block([f"Q-{i}" for i in range(N_QA)])
        self.interrupts = block([f"INT-{i}" for i in range(N_INTERRUPTS)])
        self.gibberish = block([f"GIB-{i}" for i in range(N_GIBBERISH)])
        self.echo_words = block([f"W-{i}" for i in range(N_ECHO_WORDS)])
        # spoken forms of the special responses; their transcripts are the
        # response tokens themselves, so stage-1 transcription touches every
        # response row of the unembedding
        self.say_words = block(
            [f"SAY-{d}" for d in ("CANCELLED",) + REJECT_DIMENSIONS + STATE_WORDS])
        self.speech = (speech_lo, len(self.names))

        image_lo = len(self.names)
        self.img_grip = block([f"IMG-GRIP-{i}" for i in range(GRID_W * GRID_H)])
        self.img_held = block(["IMG-HELD-0", "IMG-HELD-1"])
        self.img_obj_none = tok("IMG-OBJ-NONE")
        self.img_obj = block([f"IMG-OBJ-{i}-{c.name}"
                              for i in range(GRID_W * GRID_H) for c in COLORS])
        self.img_goal_none = tok("IMG-GOAL-NONE")
        self.img_goal = block([f"IMG-GOAL-{i}" for i in range(GRID_W * GRID_H)])
        self.image = (image_lo, len(self.names))

        text_lo = len(self.names)
        self.silence = tok("<silence>")
        self.tpad = tok("<tpad>")
        self.cancelled = tok("CANCELLED")
        self.rejects = block([f"REJECT-{d}" for d in REJECT_DIMENSIONS])
        self.state_words = block(list(STATE_WORDS))
        self.answers = block([f"ANS-{i}" for i in range(N_QA)])
        mirrors = (["MOVE", "TO", "WHERE", "ASK"]
                   + [f"OBJ-{i}" for i in range(len(COLORS))]
                   + [f"COL-{c.name}" for c in COLORS]
                   + [f"CELL-{x}-{y}" for x in range(CELL_W) for y in range(CELL_H)]
                   + [f"W-{i}" for i in range(N_ECHO_WORDS)])
        self.text_mirrors = block([f"T:{m}" for m in mirrors])
        self.text = (text_lo, len(self.names))

        action_lo = len(self.names)
        self.noop = tok("<noop>")
        self.act_left = tok("LEFT")
        self.act_right = tok("RIGHT")
        self.act_up = tok("UP")
        self.act_down = tok("DOWN")
        self.act_grip = tok("GRIP")
        self.act_release = tok("RELEASE")
        self.action = (action_lo, len(self.names))

        self.size = len(self.names)
        self._echo_map = self._build_echo_map()

    # -- lookups ----------------------------------------------------------

    def id(self, name: str) -> int:
        return self._by_name[name]

    def name(self, tid: int) -> str:
        return self.names[tid]

    def _build_echo_map(self) -> dict[int, int]:
        m: dict[int, int] = {}
        for nm, tid in self._by_name.items():
            if nm.startswith("T:"):
                m[self._by_name[nm[2:]]] = tid
        m[self._by_name["SAY-CANCELLED"]] = self.cancelled
        for d in REJECT_DIMENSIONS:
            m[self._by_name[f"SAY-{d}"]] = self._by_name[f"REJECT-{d}"]
        for w in STATE_WORDS:
            m[self._by_name[f"SAY-{w}"]] = self._by_name[w]
        return m

    def echo(self, speech_id: int) -> int:
        """Transcript token for a spoken word (the ASR-analog target)."""
        return self._echo_map[speech_id]

    def echoable(self) -> list[int]:
        return sorted(self._echo_map)

    def cell_word(self, x: int, y: int) -> int:
        return self.cell_words[0] + x * CELL_H + y

    def cell_word_coords(self, tid: int) -> tuple[int, int]:
        off = tid - self.cell_words[0]
        return off // CELL_H, off % CELL_H

    def in_bounds_cells(self) -> list[int]:
        return [self.cell_word(x, y) for x in range(GRID_W) for y in range(GRID_H)]

    def out_of_bounds_cells(self) -> list[int]:
        return [self.cell_word(x, y) for x in range(CELL_W) for y in range(CELL_H)
                if x >= GRID_W or y >= GRID_H]

    def img_grip_tok(self, cell: int) -> int:
        return self.img_grip[0] + cell

    def img_held_tok(self, held: bool) -> int:
        return self.img_held[0] + int(held)

    def img_obj_tok(self, cell: int | None, color: int = 0) -> int:
        if cell is None:
            return self.img_obj_none
        return self.img_obj[0] + cell * len(COLORS) + int(color)

    def img_goal_tok(self, cell: int | None) -> int:
        if cell is None:
            return self.img_goal_none
        return self.img_goal[0] + cell

    def reject_tok(self, dimension: str) -> int:
        return self.rejects[0] + REJECT_DIMENSIONS.index(dimension)

    def state_tok(self, word: str) -> int:
        return self.state_words[0] + STATE_WORDS.index(word)

    def answer_tok(self, i: int) -> int:
        return self.answers[0] + i

    def in_slice(self, tid: int, slc: tuple[int, int]) -> bool:
        return slc[0] <= tid < slc[1]

    # -- model wiring ------------------------------------------------------

    def specials(self) -> SpecialTokens:
        return SpecialTokens(bos=self.id("<bos>"), eos=self.id("<eos>"),
                             boi=self.id("<boi>"), eoi=self.id("<eoi>"),
                             bot=self.id("<bot>"), eot=self.id("<eot>"),
                             boa=self.id("<boa>"), eoa=self.id("<eoa>"),
                             bop=self.id("<bop>"), eop=self.id("<eop>"),
                             silence=self.silence, noop=self.noop)

    def model_config(self, **overrides) -> SAMoEConfig:
        """The default model geometry wired to this vocabulary."""
        kw = dict(vocab_size=self.size,
                  speech_out=self.text,
                  action_out=self.action,
                  text_payload=self.text,
                  action_payload=self.action,
                  specials=self.specials())
        kw.update(overrides)
        return SAMoEConfig(**kw)


_DEFAULT: VocabLayout | None = None


def default_layout() -> VocabLayout:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = VocabLayout()
    return _DEFAULT
