"""Episode scripts: deterministic scenes, utterance schedules, expected answers.

Scene convention kept throughout the corpus: one target object per scene
whose id equals its color index, so instruction references by id or by color
are both checkable against the single object visible in the image tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..blockcodec.codec import Mode
from ..blockcodec.vocab import (COLORS, GRID_H, GRID_W, REJECT_DIMENSIONS,
                                VocabLayout)
from .world import Obj, WorldState

SPEECH_SLOTS = 5

# seeds below this are reserved for held-out evaluation; gen_dataset offsets
# its episode seeds past it
EVAL_SEED_SPACE = 100_000


class TaskKind(Enum):
    ECHO = "echo"
    QA = "qa"
    MANIP = "manip"
    SPEAK_WHILE_ACT = "speak_while_act"
    CONTEXT_VQA = "context_vqa"
    DEFECTIVE = "defective"
    BARGE_IN = "barge_in"
    SILENCE_CONTROL = "silence_control"


SPEECH_ONLY_TASKS = (TaskKind.ECHO, TaskKind.QA)
MANIP_FAMILY = (TaskKind.MANIP, TaskKind.SPEAK_WHILE_ACT, TaskKind.CONTEXT_VQA,
                TaskKind.BARGE_IN, TaskKind.SILENCE_CONTROL)


def qa_answer_index(question: int) -> int:
    """Fixed lookup table pairing question k with its answer word."""
    return (7 * question + 3) % 20


@dataclass(frozen=True)
class Utterance:
    start_tick: int
    tokens: tuple[int, ...]
    kind: str  # instruction | query | interrupt

    def n_ticks(self) -> int:
        return max(1, math.ceil(len(self.tokens) / SPEECH_SLOTS))

    def end_tick(self) -> int:
        return self.start_tick + self.n_ticks() - 1


@dataclass(frozen=True)
class EpisodeScript:
    task: TaskKind
    mode: Mode
    seed: int
    prompt: tuple[int, ...]
    utterances: tuple[Utterance, ...]
    expected: tuple[tuple[int, ...], ...]
    target_obj: int | None
    goal_cell: int | None
    defect_dim: str | None
    max_ticks: int

    def instruction(self) -> Utterance:
        return self.utterances[0]

    def find(self, kind: str) -> Utterance | None:
        for u in self.utterances:
            if u.kind == kind:
                return u
        return None

    def last_speech_end(self) -> int:
        return max(u.end_tick() for u in self.utterances)

    def to_dict(self) -> dict:
        return {
            "task": self.task.value, "mode": self.mode.value, "seed": self.seed,
            "prompt": list(self.prompt),
            "utterances": [[u.start_tick, list(u.tokens), u.kind]
                           for u in self.utterances],
            "expected": [list(e) for e in self.expected],
            "target_obj": self.target_obj, "goal_cell": self.goal_cell,
            "defect_dim": self.defect_dim, "max_ticks": self.max_ticks,
        }

    @staticmethod
    def from_dict(d: dict) -> "EpisodeScript":
        return EpisodeScript(
            task=TaskKind(d["task"]), mode=Mode(d["mode"]), seed=d["seed"],
            prompt=tuple(d["prompt"]),
            utterances=tuple(Utterance(u[0], tuple(u[1]), u[2])
                             for u in d["utterances"]),
            expected=tuple(tuple(e) for e in d["expected"]),
            target_obj=d["target_obj"], goal_cell=d["goal_cell"],
            defect_dim=d["defect_dim"], max_ticks=d["max_ticks"])


def _empty_world() -> WorldState:
    return WorldState(GRID_W, GRID_H, {}, gripper=0, held=None,
                      walls=frozenset(), goal=None)


def _scene(rng: np.random.Generator, min_path: int = 5,
           max_path: int = 9) -> tuple[WorldState, int]:
    """One object whose id equals its color; total BFS path in [min, max]."""
    n_cells = GRID_W * GRID_H
    oid = int(rng.integers(0, len(COLORS)))
    while True:
        gripper, obj_cell, goal = (int(c) for c in
                                   rng.choice(n_cells, size=3, replace=False))
        d1 = abs(gripper % GRID_W - obj_cell % GRID_W) + \
            abs(gripper // GRID_W - obj_cell // GRID_W)
        d2 = abs(obj_cell % GRID_W - goal % GRID_W) + \
            abs(obj_cell // GRID_W - goal // GRID_W)
        if min_path <= d1 + d2 <= max_path:
            break
    state = WorldState(GRID_W, GRID_H, {oid: Obj(obj_cell, oid)},
                       gripper=gripper, held=None, walls=frozenset(), goal=goal)
    return state, oid


def _manip_instruction(rng, layout: VocabLayout, oid: int,
                       goal: int) -> tuple[int, ...]:
    ref = (layout.obj_words[0] + oid if rng.random() < 0.5
           else layout.col_words[0] + oid)
    gx, gy = goal % GRID_W, goal // GRID_W
    return (layout.move, ref, layout.to, layout.cell_word(gx, gy))


def _oracle_ticks(state: WorldState, oid: int, actions_per_tick: int) -> int:
    """Blocks the oracle needs once it starts acting (path + grip + release)."""
    d1 = (abs(state.gripper % GRID_W - state.objects[oid].cell % GRID_W)
          + abs(state.gripper // GRID_W - state.objects[oid].cell // GRID_W))
    d2 = (abs(state.objects[oid].cell % GRID_W - state.goal % GRID_W)
          + abs(state.objects[oid].cell // GRID_W - state.goal // GRID_W))
    return math.ceil((d1 + d2 + 2) / actions_per_tick)


def reset(task: TaskKind, seed: int,
          layout: VocabLayout | None = None,
          actions_per_tick: int = 2) -> tuple[WorldState, EpisodeScript]:
    """Deterministic (task, seed) -> initial state + schedule."""
    from ..blockcodec.vocab import default_layout
    layout = layout or default_layout()
    task = TaskKind(task)
    rng = np.random.default_rng([list(TaskKind).index(task), int(seed)])
    start = int(rng.integers(0, 2))

    if task == TaskKind.ECHO:
        pool = layout.echoable()
        # a length that fills every speech slot would leave the utterance end
        # undetectable (no trailing pad, the pause analog), so skip it
        n = int(rng.choice([3, 4, 6, 7, 8]))
        words = tuple(int(w) for w in rng.choice(pool, size=n, replace=True))
        instr = Utterance(start, words, "instruction")
        expected = tuple(layout.echo(w) for w in words)
        return _empty_world(), EpisodeScript(
            task, Mode.SPEECH_ONLY, seed, (layout.id("P-ASR"),), (instr,),
            (expected,), None, None, None, max_ticks=instr.end_tick() + 3)

    if task == TaskKind.QA:
        q = int(rng.integers(0, 20))
        instr = Utterance(start, (layout.ask, layout.q_words[0] + q),
                          "instruction")
        ans = (layout.answer_tok(qa_answer_index(q)),)
        return _empty_world(), EpisodeScript(
            task, Mode.SPEECH_ONLY, seed, (layout.id("P-QA"),), (instr,),
            (ans,), None, None, None, max_ticks=instr.end_tick() + 3)

    prompt = (layout.id("P-DEFAULT"),)

    if task == TaskKind.DEFECTIVE:
        state, oid = _scene(rng)
        dim = REJECT_DIMENSIONS[int(rng.integers(0, 4))]
        gx, gy = state.goal % GRID_W, state.goal // GRID_W
        goal_word = layout.cell_word(gx, gy)
        if dim == "VISUAL":
            wrong = (oid + 1 + int(rng.integers(0, len(COLORS) - 1))) % len(COLORS)
            tokens = (layout.move, layout.col_words[0] + wrong, layout.to,
                      goal_word)
        elif dim == "SEMANTIC":
            wrong = (oid + 1 + int(rng.integers(0, len(COLORS) - 1))) % len(COLORS)
            tokens = (layout.move, layout.obj_words[0] + wrong, layout.to,
                      goal_word)
        elif dim == "MOTION":
            oob = layout.out_of_bounds_cells()
            tokens = (layout.move, layout.obj_words[0] + oid, layout.to,
                      int(oob[int(rng.integers(0, len(oob)))]))
            state = WorldState(state.width, state.height, state.objects,
                               state.gripper, state.held, state.walls, goal=None)
        else:  # OUT-OF-CONTEXT
            # 3-4 tokens: never fills all slots, keeping the end detectable
            n = int(rng.integers(3, 5))
            tokens = tuple(int(g) for g in
                           rng.integers(layout.gibberish[0],
                                        layout.gibberish[1], size=n))
            state = WorldState(state.width, state.height, state.objects,
                               state.gripper, state.held, state.walls, goal=None)
        instr = Utterance(start, tokens, "instruction")
        return state, EpisodeScript(
            task, Mode.DEFAULT, seed, prompt, (instr,),
            ((layout.reject_tok(dim),),), None, None, dim,
            max_ticks=instr.end_tick() + 3)

    # manipulation family: a solvable scene plus optional mid-episode speech
    state, oid = _scene(rng)
    instr = Utterance(start, _manip_instruction(rng, layout, oid, state.goal),
                      "instruction")
    ie = instr.end_tick()
    done = ie + _oracle_ticks(state, oid, actions_per_tick) - 1
    utterances = [instr]
    expected: tuple[tuple[int, ...], ...] = ()
    max_ticks = done + 3

    if task == TaskKind.SPEAK_WHILE_ACT:
        q = int(rng.integers(0, 20))
        qt = int(rng.integers(ie + 2, min(ie + 8, done - 1) + 1))
        utterances.append(Utterance(qt, (layout.ask, layout.q_words[0] + q),
                                    "query"))
        expected = ((layout.answer_tok(qa_answer_index(q)),),)
    elif task == TaskKind.CONTEXT_VQA:
        qt = int(rng.integers(ie + 2, min(ie + 30, done + 1) + 1))
        utterances.append(Utterance(qt, (layout.where,
                                         layout.obj_words[0] + oid), "query"))
        max_ticks = max(max_ticks, qt + 2)
    elif task == TaskKind.BARGE_IN:
        it = int(rng.integers(ie + 2, min(ie + 8, done - 1) + 1))
        cmd = layout.interrupts[0] + int(rng.integers(0, 10))
        utterances.append(Utterance(it, (cmd,), "interrupt"))
        expected = ((layout.cancelled,),)
        max_ticks = it + 3

    return state, EpisodeScript(
        task, Mode.DEFAULT, seed, prompt, tuple(utterances), expected,
        oid, state.goal, None, max_ticks=max_ticks)


def emit_speech(script: EpisodeScript, tick: int, layout: VocabLayout,
                slots: int = SPEECH_SLOTS) -> list[int]:
    """The tick's speech chunk: scheduled words, padded to the slot count."""
    out: list[int] = []
    for u in script.utterances:
        if u.start_tick <= tick <= u.end_tick():
            off = (tick - u.start_tick) * slots
            out = list(u.tokens[off:off + slots])
            break
    return out + [layout.spad] * (slots - len(out))


def depad(tokens, layout: VocabLayout) -> list[int]:
    return [t for t in tokens
            if t not in (layout.spad, layout.tpad, layout.silence)]


def expected_answer(script: EpisodeScript, state: WorldState | None,
                    tick: int, layout: VocabLayout) -> tuple[int, ...]:
    """Correct response tokens for the script at this execution stage."""
    if script.task == TaskKind.CONTEXT_VQA:
        if state is None:
            raise ValueError("context VQA answers require the world state")
        obj = state.objects[script.target_obj]
        if state.held == script.target_obj:
            return (layout.state_tok("IN-GRIPPER"),)
        if obj.cell == script.goal_cell:
            return (layout.state_tok("AT-GOAL"),)
        return (layout.state_tok("ON-TABLE"),)
    if script.expected:
        return script.expected[0]
    return ()
