"""Streaming full-duplex episode execution against a live model.

Per tick: speech and image segments stream in through ``forward_token``, the
model emits its text then action segments, actions hit the world, the
history policy prunes the cache, and the tick is recorded. The model alone
decides when to speak and act; the runner only enforces the block grammar.
"""

from __future__ import annotations

import numpy as np

from ..blockcodec.codec import GEOM, Geometry, Mode, prompt_prefix
from ..blockcodec.history import HistoryPolicy, truncate_history
from ..blockcodec.vocab import VocabLayout, default_layout
from ..duplex_sim.dataset import Rollout, build_rollout
from ..duplex_sim.scripts import EpisodeScript, TaskKind, emit_speech
from ..duplex_sim.trace import (EpisodeTrace, Event, EventKind, TickRecord,
                                state_hash)
from ..duplex_sim.world import Act, WorldState, goal_satisfied, observe_image, step
from ..samoe.cache import UnifiedKVCache
from ..samoe.model import SAMoEModel, forward_token, sample_segment
from ..samoe.routing import ModalityTag

DEFAULT_CAP = 60


def _feed(model, cache, tok: int, tag: ModalityTag) -> np.ndarray:
    return forward_token(model, cache, int(tok), tag, cache.next_position)


def run_episode(model: SAMoEModel, state: WorldState, script: EpisodeScript,
                layout: VocabLayout | None = None,
                geom: Geometry = GEOM,
                cap: int = DEFAULT_CAP,
                temperature: float = 0.0,
                sample_seed: int = 0,
                policy: HistoryPolicy | None = None,
                export_hidden: str | None = None,
                speech_source=None,
                text_source=None,
                action_source=None) -> EpisodeTrace:
    """Stream one scripted episode; returns the full tick-by-tick trace.

    The three ``*_source`` hooks replace a segment's content with scripted
    payloads fed structurally (tick -> token list). Speech defaults to the
    script's schedule. In speech-only mode the action payload is always the
    dummy all-<noop> segment, matching the block grammar, so a lone speech
    expert can run sessions without owning the action vocab.
    """
    layout = layout or default_layout()
    policy = policy or HistoryPolicy()
    cfg = model.config
    capacity = (cap + 2) * cfg.tokens_per_block(False) + 64
    cache = UnifiedKVCache(cfg, capacity=capacity)
    rng = np.random.default_rng([int(script.seed), int(sample_seed)])
    speech_only = script.mode == Mode.SPEECH_ONLY

    trace = EpisodeTrace(header={
        "task": script.task.value, "seed": script.seed,
        "mode": script.mode.value, "cap": cap,
        "temperature": temperature,
        "script": script.to_dict(),
    })
    hidden_blocks: dict[int, list] = {}

    for tok, tag in prompt_prefix(script.prompt, layout):
        _feed(model, cache, tok, ModalityTag(tag))

    goal = (script.target_obj, script.goal_cell) \
        if script.target_obj is not None else None
    done_seen = False
    cancelled_seen = False
    interrupt = script.find("interrupt")
    if speech_only and action_source is None:
        action_source = lambda _tick: [layout.noop] * geom.action_slots  # noqa: E731

    def feed_segment(payload, tag, opener, closer):
        _feed(model, cache, layout.id(opener), ModalityTag.boundary(tag))
        for tok in payload:
            _feed(model, cache, tok, tag)
        _feed(model, cache, layout.id(closer), ModalityTag.boundary(tag))
        return list(payload)

    for tick in range(cap):
        cache.begin_block(tick)
        pre_state = state
        events: list[Event] = []
        for u in script.utterances:
            if u.start_tick == tick:
                events.append(Event(tick, EventKind.SPEECH_STARTS))
            if u.end_tick() == tick:
                events.append(Event(tick, EventKind.SPEECH_ENDS))

        speech = (speech_source(tick) if speech_source
                  else emit_speech(script, tick, layout, geom.speech_slots))
        feed_segment(speech, ModalityTag.SPEECH_IN, "<bos>", "<eos>")

        image: list[int] = []
        if speech_only:
            feed_segment([], ModalityTag.IMAGE_IN, "<boi>", "<eoi>")
        else:
            image = observe_image(state, layout)
            feed_segment(image, ModalityTag.IMAGE_IN, "<boi>", "<eoi>")

        if text_source is not None:
            text = feed_segment(text_source(tick), ModalityTag.TEXT_OUT,
                                "<bot>", "<eot>")
        else:
            sink: list | None = [] if export_hidden else None
            text = sample_segment(model, cache, ModalityTag.TEXT_OUT,
                                  temperature=temperature, rng=rng,
                                  hidden_sink=sink)
            if sink:
                hidden_blocks[tick] = sink
        if action_source is not None:
            action = feed_segment(action_source(tick), ModalityTag.ACTION_OUT,
                                  "<boa>", "<eoa>")
        else:
            action = sample_segment(model, cache, ModalityTag.ACTION_OUT,
                                    temperature=temperature, rng=rng)

        notes: list[str] = []
        for tok in action:
            act = Act(tok - layout.action[0])
            state, note = step(state, act)
            if note:
                notes.append(note)

        if text != [layout.silence]:
            events.append(Event(tick, EventKind.TEXT_EMITTED))
        if layout.cancelled in text:
            events.append(Event(tick, EventKind.CANCELLED))
            cancelled_seen = True
        if any(tok != layout.noop for tok in action):
            events.append(Event(tick, EventKind.ACTION_EMITTED))
        if goal is not None and not done_seen and goal_satisfied(state, goal):
            events.append(Event(tick, EventKind.TASK_DONE))
            done_seen = True

        sd = pre_state.to_dict()
        trace.records.append(TickRecord(
            tick=tick, state=sd, state_hash=state_hash(sd),
            speech=list(map(int, speech)), image=list(map(int, image)),
            text=list(map(int, text)), action=list(map(int, action)),
            events=events, notes=notes))

        truncate_history(cache, tick, policy)

        if _should_stop(script, tick, done_seen, cancelled_seen, interrupt):
            break

    trace.header["final_state"] = state.to_dict()
    if export_hidden:
        from ..trainer.checkpoint import write_container
        entries = {f"block{t:04d}.text_hidden": np.stack(h)
                   for t, h in hidden_blocks.items()}
        if entries:
            write_container(export_hidden, entries)
    return trace


def _should_stop(script: EpisodeScript, tick: int, done_seen: bool,
                 cancelled_seen: bool, interrupt) -> bool:
    last_speech = script.last_speech_end()
    if script.task in (TaskKind.ECHO, TaskKind.QA, TaskKind.DEFECTIVE):
        return tick >= script.max_ticks - 1
    if script.task == TaskKind.BARGE_IN and cancelled_seen \
            and interrupt is not None and tick >= interrupt.end_tick() + 2:
        return True
    if done_seen and tick >= last_speech + 1 and tick >= script.max_ticks - 2:
        return True
    return False


def oracle_model_outputs(task, seed: int, layout: VocabLayout | None = None,
                         geom: Geometry = GEOM) -> EpisodeTrace:
    """The ground-truth rollout expressed as a trace (oracle passthrough)."""
    layout = layout or default_layout()
    roll: Rollout = build_rollout(task, seed, layout, geom)
    script = roll.script
    trace = EpisodeTrace(header={
        "task": script.task.value, "seed": script.seed,
        "mode": script.mode.value, "cap": script.max_ticks,
        "temperature": 0.0, "script": script.to_dict(),
    })
    state = None
    for tick in range(len(roll.speech)):
        sd = roll.states[tick].to_dict()
        events = [e for e in roll.events if e.tick == tick]
        trace.records.append(TickRecord(
            tick=tick, state=sd, state_hash=state_hash(sd),
            speech=list(roll.speech[tick]),
            image=list(roll.images[tick] or []),
            text=list(roll.text[tick]), action=list(roll.action[tick]),
            events=events, notes=[]))
        state = roll.states[tick]
    # replay the final tick's actions to capture the end-of-episode state
    for tok in roll.action[-1]:
        state, _ = step(state, Act(tok - layout.action[0]))
    trace.header["final_state"] = state.to_dict()
    return trace
