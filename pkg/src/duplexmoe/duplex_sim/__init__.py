from .world import (
    Act,
    UnreachableGoal,
    WorldState,
    observe_image,
    oracle_policy,
    step,
)
from .scripts import (
    EpisodeScript,
    TaskKind,
    Utterance,
    emit_speech,
    expected_answer,
    qa_answer_index,
    reset,
)
from .trace import Event, EventKind, EpisodeTrace, TickRecord
from .dataset import Example, gen_dataset, write_dataset

__all__ = [
    "Act",
    "EpisodeScript",
    "EpisodeTrace",
    "Event",
    "EventKind",
    "Example",
    "TaskKind",
    "TickRecord",
    "UnreachableGoal",
    "Utterance",
    "WorldState",
    "emit_speech",
    "expected_answer",
    "gen_dataset",
    "observe_image",
    "oracle_policy",
    "qa_answer_index",
    "reset",
    "step",
    "write_dataset",
]
