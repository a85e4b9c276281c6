"""Oracle rollouts and teacher-forced training sequences.

``build_rollout`` plays an episode with the ground-truth policy and the
scripted responses; the same rollout backs dataset generation, the
oracle-passthrough harness tests, and the expected-answer checks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ..blockcodec.codec import GEOM, Block, Geometry, Mode, encode_stream
from ..blockcodec.vocab import VocabLayout, default_layout
from ..samoe.routing import ModalityTag
from .scripts import (EVAL_SEED_SPACE, EpisodeScript, TaskKind, emit_speech,
                      expected_answer, reset)
from .world import Act, WorldState, goal_satisfied, observe_image, oracle_policy, step
from .trace import Event, EventKind

PRETRAIN_MANIP = "manip_text"  # stage-1 variant: instruction arrives as text


@dataclass
class Rollout:
    script: EpisodeScript
    states: list[WorldState]  # start-of-tick states
    speech: list[list[int]]
    images: list[list[int] | None]
    text: list[list[int]]
    action: list[list[int]]
    events: list[Event]


def _pad_text(tokens, layout: VocabLayout, slots: int) -> list[int]:
    toks = list(tokens)
    if len(toks) > slots:
        raise ValueError(f"text payload {len(toks)} exceeds {slots} slots")
    return toks + [layout.tpad] * (slots - len(toks))


def act_token(layout: VocabLayout, act: Act) -> int:
    return layout.action[0] + int(act)


def build_rollout(task, seed: int, layout: VocabLayout | None = None,
                  geom: Geometry = GEOM,
                  action_pretrain: bool = False) -> Rollout:
    layout = layout or default_layout()
    state, script = reset(TaskKind(task) if not action_pretrain else TaskKind.MANIP,
                          seed, layout, actions_per_tick=geom.action_slots)
    instr = script.instruction()
    ie = 0 if action_pretrain else instr.end_tick()
    query = script.find("query")
    interrupt = script.find("interrupt")
    speech_only = script.mode == Mode.SPEECH_ONLY

    states, speech, images, text, action = [], [], [], [], []
    events: list[Event] = []
    for u in ([] if action_pretrain else script.utterances):
        events.append(Event(u.start_tick, EventKind.SPEECH_STARTS))
        events.append(Event(u.end_tick(), EventKind.SPEECH_ENDS))

    done_seen = False
    for tick in range(script.max_ticks):
        states.append(state)
        if action_pretrain:
            speech.append([layout.spad] * geom.speech_slots)
        else:
            speech.append(emit_speech(script, tick, layout, geom.speech_slots))
        images.append(None if speech_only else observe_image(state, layout))

        # text: scripted response at the tick the triggering speech ends
        toks: list[int] = [layout.silence]
        if action_pretrain:
            if tick == 0:
                mirror = [layout.echo(w) for w in instr.tokens]
                toks = _pad_text(mirror, layout, geom.text_slots)
        elif script.task == TaskKind.ECHO and tick == ie:
            toks = _pad_text(script.expected[0], layout, geom.text_slots)
        elif script.task == TaskKind.QA and tick == ie:
            toks = _pad_text(script.expected[0], layout, geom.text_slots)
        elif script.task == TaskKind.DEFECTIVE and tick == ie:
            toks = _pad_text(script.expected[0], layout, geom.text_slots)
        elif query is not None and tick == query.end_tick():
            ans = expected_answer(script, state, tick, layout)
            toks = _pad_text(ans, layout, geom.text_slots)
        elif interrupt is not None and tick == interrupt.end_tick():
            toks = _pad_text((layout.cancelled,), layout, geom.text_slots)
        text.append(toks)
        if toks != [layout.silence]:
            events.append(Event(tick, EventKind.TEXT_EMITTED))
            if layout.cancelled in toks:
                events.append(Event(tick, EventKind.CANCELLED))

        # actions: the oracle acts once the instruction is complete and no
        # interrupt has landed; everything else is <noop>
        acts: list[int] = []
        acting = (script.task in (TaskKind.MANIP, TaskKind.SPEAK_WHILE_ACT,
                                  TaskKind.CONTEXT_VQA, TaskKind.BARGE_IN,
                                  TaskKind.SILENCE_CONTROL)
                  and tick >= ie
                  and (interrupt is None or tick < interrupt.end_tick()))
        for _ in range(geom.action_slots):
            if acting:
                a = oracle_policy(state, (script.target_obj, script.goal_cell))
                state, _note = step(state, a)
            else:
                a = Act.NOOP
            acts.append(act_token(layout, a))
        action.append(acts)
        if any(a != act_token(layout, Act.NOOP) for a in acts):
            events.append(Event(tick, EventKind.ACTION_EMITTED))
        if (script.target_obj is not None and not done_seen
                and goal_satisfied(state, (script.target_obj, script.goal_cell))):
            events.append(Event(tick, EventKind.TASK_DONE))
            done_seen = True

    kind_order = list(EventKind)
    events.sort(key=lambda e: (e.tick, kind_order.index(e.kind)))
    return Rollout(script, states, speech, images, text, action, events)


@dataclass
class Example:
    tokens: np.ndarray
    tags: np.ndarray
    ticks: np.ndarray
    mask: np.ndarray
    task: str
    seed: int

    def to_dict(self) -> dict:
        return {"task": self.task, "seed": self.seed,
                "tokens": self.tokens.tolist(), "tags": self.tags.tolist(),
                "ticks": self.ticks.tolist(),
                "mask": self.mask.astype(int).tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Example":
        return Example(np.array(d["tokens"], dtype=np.int64),
                       np.array(d["tags"], dtype=np.int8),
                       np.array(d["ticks"], dtype=np.int64),
                       np.array(d["mask"], dtype=bool),
                       d["task"], d["seed"])


def example_from_rollout(roll: Rollout, layout: VocabLayout,
                         geom: Geometry = GEOM,
                         action_pretrain: bool = False) -> Example:
    blocks = []
    for tick in range(len(roll.speech)):
        img = roll.images[tick]
        blocks.append(Block(tick=tick, speech=tuple(roll.speech[tick]),
                            images=((),) if img is None else (tuple(img),),
                            text=tuple(roll.text[tick]),
                            action=tuple(roll.action[tick])))
    tokens, tags, ticks = encode_stream(roll.script.prompt, blocks, layout, geom)
    mask = (tags == int(ModalityTag.ACTION_OUT))
    if not action_pretrain:
        mask = mask | (tags == int(ModalityTag.TEXT_OUT))
    task = PRETRAIN_MANIP if action_pretrain else roll.script.task.value
    return Example(tokens, tags, ticks, mask, task, roll.script.seed)


def _mix_items(mix: dict) -> tuple[list[str], np.ndarray]:
    items = []
    for key, w in sorted(mix.items(), key=lambda kv: str(kv[0])):
        name = key.value if isinstance(key, TaskKind) else str(key)
        if name != PRETRAIN_MANIP:
            TaskKind(name)  # validates the key
        if w < 0:
            raise ValueError(f"negative weight for task {name}")
        if w > 0:
            items.append((name, float(w)))
    if not items:
        raise ValueError("task mix has no positive weights")
    names = [nm for nm, _ in items]
    weights = np.array([w for _, w in items])
    return names, weights / weights.sum()


def gen_dataset(mix: dict, n: int, seed: int,
                layout: VocabLayout | None = None,
                geom: Geometry = GEOM) -> tuple[list[Example], dict]:
    """Deterministic teacher-forced corpus plus its manifest.

    Episode seeds are offset past the held-out evaluation seed space so
    training scenes never collide with eval scenes.
    """
    layout = layout or default_layout()
    names, probs = _mix_items(mix)
    rng = np.random.default_rng([int(seed)])
    picks = rng.choice(len(names), size=n, p=probs)
    examples: list[Example] = []
    counts: dict[str, int] = {nm: 0 for nm in names}
    for i in range(n):
        name = names[int(picks[i])]
        ep_seed = EVAL_SEED_SPACE + seed * 1_000_000 + i
        pretrain = name == PRETRAIN_MANIP
        roll = build_rollout(TaskKind.MANIP if pretrain else TaskKind(name),
                             ep_seed, layout, geom, action_pretrain=pretrain)
        examples.append(example_from_rollout(roll, layout, geom,
                                             action_pretrain=pretrain))
        counts[name] += 1
    manifest = {"n": n, "seed": seed,
                "mix": {nm: float(w) for nm, w in zip(names, probs)},
                "counts": counts}
    return examples, manifest


def write_dataset(examples: list[Example], manifest: dict, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    data_path = os.path.join(out_dir, "dataset.jsonl")
    with open(data_path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")
    man_path = os.path.join(out_dir, "manifest.json")
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"dataset": data_path, "manifest": man_path}


def read_dataset(path: str) -> list[Example]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Example.from_dict(json.loads(line)))
    return out
