"""Duplex and task metrics, all pure functions of serialized traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..blockcodec.vocab import VocabLayout, default_layout
from ..duplex_sim.scripts import EpisodeScript, TaskKind, depad, expected_answer
from ..duplex_sim.trace import EpisodeTrace
from ..duplex_sim.world import Obj, WorldState

INF = math.inf

DIALOGUE_TASKS = (TaskKind.ECHO, TaskKind.QA, TaskKind.SPEAK_WHILE_ACT,
                  TaskKind.CONTEXT_VQA, TaskKind.DEFECTIVE)
ACTION_TASKS = (TaskKind.MANIP, TaskKind.SPEAK_WHILE_ACT, TaskKind.CONTEXT_VQA,
                TaskKind.SILENCE_CONTROL, TaskKind.BARGE_IN)


def _script(trace: EpisodeTrace) -> EpisodeScript:
    return EpisodeScript.from_dict(trace.header["script"])


def _state_from_dict(d: dict) -> WorldState:
    return WorldState(
        width=5, height=5,
        objects={int(k): Obj(v[0], v[1]) for k, v in d["objects"].items()},
        gripper=d["gripper"], held=d["held"],
        walls=frozenset(d["walls"]), goal=d["goal"])


def _first_text_tick(trace, layout, after: int) -> int | None:
    for rec in trace.records:
        if rec.tick >= after and rec.text != [layout.silence]:
            return rec.tick
    return None


def _first_action_tick(trace, layout, after: int) -> int | None:
    for rec in trace.records:
        if rec.tick >= after and any(t != layout.noop for t in rec.action):
            return rec.tick
    return None


def metric_turn_taking(trace: EpisodeTrace,
                       layout: VocabLayout | None = None) -> dict:
    """Dialogue and action turn-taking, each (success, latency-in-blocks).

    Success means the first response lands in the block of the triggering
    utterance's final speech tick or the next one; what the response says is
    irrelevant here. Inapplicable channels are reported as None.
    """
    layout = layout or default_layout()
    script = _script(trace)
    out: dict = {"dialogue": None, "action": None}

    if script.task in DIALOGUE_TASKS:
        trigger = script.find("query") or script.instruction()
        end = trigger.end_tick()
        tick = _first_text_tick(trace, layout, end)
        latency = INF if tick is None else tick - end
        out["dialogue"] = (latency <= 1, latency)

    if script.task in ACTION_TASKS:
        end = script.instruction().end_tick()
        tick = _first_action_tick(trace, layout, end)
        latency = INF if tick is None else tick - end
        out["action"] = (latency <= 1, latency)
    return out


def metric_barge_in(trace: EpisodeTrace,
                    layout: VocabLayout | None = None) -> tuple | None:
    """(success, stop latency) or None when the script has no interrupt.

    Success: CANCELLED is spoken within one block of the interrupt's end and
    every action payload from that block on is all-<noop>.
    """
    layout = layout or default_layout()
    script = _script(trace)
    interrupt = script.find("interrupt")
    if interrupt is None:
        return None
    end = interrupt.end_tick()
    cancel_tick = None
    for rec in trace.records:
        if rec.tick >= end and layout.cancelled in rec.text:
            cancel_tick = rec.tick
            break
    if cancel_tick is None:
        return False, INF
    latency = cancel_tick - end
    if latency > 1:
        return False, latency
    for rec in trace.records:
        if rec.tick >= cancel_tick and any(t != layout.noop for t in rec.action):
            return False, latency
    return True, latency


def _answer_tokens(trace, layout, after: int) -> tuple[int | None, list[int]]:
    tick = _first_text_tick(trace, layout, after)
    if tick is None:
        return None, []
    rec = next(r for r in trace.records if r.tick == tick)
    return tick, depad(rec.text, layout)


def metric_task_success(trace: EpisodeTrace,
                        layout: VocabLayout | None = None) -> bool:
    """Task-kind-specific success predicate over a finished trace."""
    layout = layout or default_layout()
    script = _script(trace)
    task = script.task

    if task in (TaskKind.ECHO, TaskKind.QA):
        _, answer = _answer_tokens(trace, layout, script.instruction().end_tick())
        return tuple(answer) in {tuple(e) for e in script.expected}

    if task == TaskKind.CONTEXT_VQA:
        query = script.find("query")
        tick, answer = _answer_tokens(trace, layout, query.end_tick())
        if tick is None:
            return False
        rec = next(r for r in trace.records if r.tick == tick)
        state = _state_from_dict(rec.state)
        return tuple(answer) == expected_answer(script, state, tick, layout)

    if task == TaskKind.DEFECTIVE:
        _, answer = _answer_tokens(trace, layout, script.instruction().end_tick())
        rejected = tuple(answer) == (layout.reject_tok(script.defect_dim),)
        acted = any(any(t != layout.noop for t in rec.action)
                    for rec in trace.records)
        return rejected and not acted

    if task == TaskKind.SILENCE_CONTROL:
        return all(rec.text == [layout.silence] for rec in trace.records)

    if task == TaskKind.BARGE_IN:
        result = metric_barge_in(trace, layout)
        return bool(result and result[0])

    # MANIP and the manipulation half of SPEAK_WHILE_ACT
    final = _state_from_dict(trace.header["final_state"])
    return final.objects[script.target_obj].cell == script.goal_cell


def metric_rejected_at_all(trace: EpisodeTrace,
                           layout: VocabLayout | None = None) -> bool:
    """Defective episodes: any REJECT-* spoken and zero real actions."""
    layout = layout or default_layout()
    script = _script(trace)
    _, answer = _answer_tokens(trace, layout, script.instruction().end_tick())
    rejects = set(range(layout.rejects[0], layout.rejects[1]))
    acted = any(any(t != layout.noop for t in rec.action)
                for rec in trace.records)
    return bool(set(answer) & rejects) and not acted


def metric_answer_success(trace: EpisodeTrace,
                          layout: VocabLayout | None = None) -> bool | None:
    """Answer correctness for the query inside a concurrent episode."""
    layout = layout or default_layout()
    script = _script(trace)
    query = script.find("query")
    if query is None:
        return None
    tick, answer = _answer_tokens(trace, layout, query.end_tick())
    if script.task == TaskKind.CONTEXT_VQA:
        if tick is None:
            return False
        rec = next(r for r in trace.records if r.tick == tick)
        state = _state_from_dict(rec.state)
        return tuple(answer) == expected_answer(script, state, tick, layout)
    return tuple(answer) in {tuple(e) for e in script.expected}


@dataclass
class EpisodeMetrics:
    task: str
    seed: int
    success: bool
    dialogue_turn: tuple | None
    action_turn: tuple | None
    barge: tuple | None
    answer: bool | None
    rejected_any: bool | None
    silence_violations: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def metrics_from_trace(trace: EpisodeTrace,
                       layout: VocabLayout | None = None) -> EpisodeMetrics:
    layout = layout or default_layout()
    script = _script(trace)
    turns = metric_turn_taking(trace, layout)
    violations = sum(1 for rec in trace.records
                     if rec.text != [layout.silence])
    return EpisodeMetrics(
        task=script.task.value, seed=script.seed,
        success=metric_task_success(trace, layout),
        dialogue_turn=turns["dialogue"], action_turn=turns["action"],
        barge=metric_barge_in(trace, layout),
        answer=metric_answer_success(trace, layout),
        rejected_any=(metric_rejected_at_all(trace, layout)
                      if script.task == TaskKind.DEFECTIVE else None),
        silence_violations=(violations
                            if script.task == TaskKind.SILENCE_CONTROL else 0))


def _rate(flags) -> float | None:
    flags = [f for f in flags if f is not None]
    if not flags:
        return None
    return sum(1 for f in flags if f) / len(flags)


def _latencies(pairs) -> list[float]:
    return [p[1] for p in pairs if p is not None and p[1] != INF]


@dataclass
class MetricReport:
    header: dict
    rows: list[dict] = field(default_factory=list)

    def add_task_summary(self, model: str, task: str,
                         episodes: list[EpisodeMetrics]) -> dict:
        lat = _latencies([e.dialogue_turn for e in episodes]
                         + [e.action_turn for e in episodes])
        row = {
            "model": model, "task": task, "n": len(episodes),
            "success": _rate([e.success for e in episodes]),
            "dialogue_turn": _rate([e.dialogue_turn[0]
                                    if e.dialogue_turn else None
                                    for e in episodes]),
            "action_turn": _rate([e.action_turn[0] if e.action_turn else None
                                  for e in episodes]),
            "barge_in": _rate([e.barge[0] if e.barge else None
                               for e in episodes]),
            "rejected": _rate([e.rejected_any for e in episodes]),
            "answer": _rate([e.answer for e in episodes]),
            "mean_latency": (float(np.mean(lat)) if lat else None),
            "p95_latency": (float(np.percentile(lat, 95)) if lat else None),
            "silence_violations": sum(e.silence_violations for e in episodes),
        }
        self.rows.append(row)
        return row

    _COLUMNS = ("model", "task", "n", "success", "dialogue_turn",
                "action_turn", "barge_in", "rejected", "answer",
                "mean_latency", "p95_latency", "silence_violations")

    def to_csv(self) -> str:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v)

        lines = [",".join(self._COLUMNS)]
        for row in self.rows:
            lines.append(",".join(cell(row[c]) for c in self._COLUMNS))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = ["metric report"]
        for key in sorted(self.header):
            lines.append(f"  {key}: {self.header[key]}")
        for row in self.rows:
            parts = [f"{row['model']}/{row['task']}: n={row['n']}"]
            for key in ("success", "dialogue_turn", "action_turn", "barge_in",
                        "rejected", "answer"):
                if row[key] is not None:
                    parts.append(f"{key}={row[key]:.3f}")
            if row["mean_latency"] is not None:
                parts.append(f"lat={row['mean_latency']:.2f}"
                             f"/p95={row['p95_latency']:.2f}")
            if row["silence_violations"]:
                parts.append(f"violations={row['silence_violations']}")
            lines.append("  " + " ".join(parts))
        return "\n".join(lines) + "\n"


def evaluate_suite(model, tasks, seeds, layout: VocabLayout | None = None,
                   model_name: str = "model", cap: int = 60,
                   temperature: float = 0.0,
                   report: MetricReport | None = None,
                   trace_sink=None) -> MetricReport:
    """Run tasks x seeds against one model and aggregate per task."""
    from ..duplex_sim.scripts import reset
    from .runner import run_episode

    layout = layout or default_layout()
    seeds = list(seeds)
    if report is None:
        report = MetricReport(header={"seeds": f"{seeds[0]}..{seeds[-1]}"
                                      if seeds else "none",
                                      "n_seeds": len(seeds)})
    for task in tasks:
        task = TaskKind(task)
        episodes = []
        for seed in seeds:
            state, script = reset(task, seed, layout)
            trace = run_episode(model, state, script, layout, cap=cap,
                                temperature=temperature)
            episodes.append(metrics_from_trace(trace, layout))
            if trace_sink is not None:
                trace_sink(trace)
        report.add_task_summary(model_name, task.value, episodes)
    return report


def echo_token_accuracy(model, seeds, layout: VocabLayout | None = None,
                        cap: int = 20) -> float:
    """Per-token transcription accuracy of the speech path on held-out seeds."""
    from ..duplex_sim.scripts import reset
    from .runner import run_episode

    layout = layout or default_layout()
    correct = total = 0
    for seed in seeds:
        state, script = reset(TaskKind.ECHO, seed, layout)
        trace = run_episode(model, state, script, layout, cap=cap)
        _, answer = _answer_tokens(trace, layout,
                                   script.instruction().end_tick())
        expected = list(script.expected[0])
        total += len(expected)
        correct += sum(1 for i, tok in enumerate(expected)
                       if i < len(answer) and answer[i] == tok)
    return correct / max(1, total)


def text_conditioned_manip_success(model, seeds,
                                   layout: VocabLayout | None = None,
                                   cap: int = 30) -> float:
    """Stage-1 action eval: the instruction arrives in the text slots, speech
    stays padded, and the lone expert drives the gripper."""
    from ..duplex_sim.dataset import _pad_text
    from ..duplex_sim.scripts import reset
    from .runner import run_episode

    layout = layout or default_layout()
    geom_text = layout.model_config().slots_text
    wins = 0
    for seed in seeds:
        state, script = reset(TaskKind.MANIP, seed, layout)
        instr = [layout.echo(w) for w in script.instruction().tokens]

        def text_source(tick, _instr=instr):
            if tick == 0:
                return _pad_text(_instr, layout, geom_text)
            return [layout.silence]

        trace = run_episode(
            model, state, script, layout, cap=cap,
            speech_source=lambda _t: [layout.spad] * 5,
            text_source=text_source)
        final = _state_from_dict(trace.header["final_state"])
        wins += final.objects[script.target_obj].cell == script.goal_cell
    return wins / max(1, len(list(seeds)))


def compare_models(models: dict, tasks, seeds,
                   layout: VocabLayout | None = None, cap: int = 60,
                   temperature: float = 0.0) -> MetricReport:
    """Identical episode seeds across every model; one summary row per
    (model, task) plus per-model averages."""
    layout = layout or default_layout()
    seeds = list(seeds)
    report = MetricReport(header={
        "seeds": f"{seeds[0]}..{seeds[-1]}" if seeds else "none",
        "n_seeds": len(seeds),
        "models": ",".join(models),
    })
    for name, model in models.items():
        evaluate_suite(model, tasks, seeds, layout, model_name=name, cap=cap,
                       temperature=temperature, report=report)
        own = [r for r in report.rows if r["model"] == name]
        avg = {"model": name, "task": "AVERAGE", "n": sum(r["n"] for r in own),
               "success": float(np.mean([r["success"] for r in own])),
               "dialogue_turn": None, "action_turn": None, "barge_in": None,
               "rejected": None, "answer": None, "mean_latency": None,
               "p95_latency": None, "silence_violations": 0}
        report.rows.append(avg)
    return report
