"""Tick-by-tick episode records; every metric is a pure function of these."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum


class EventKind(Enum):
    SPEECH_STARTS = "speech_starts"
    SPEECH_ENDS = "speech_ends"
    TEXT_EMITTED = "text_emitted"
    ACTION_EMITTED = "action_emitted"
    TASK_DONE = "task_done"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class Event:
    tick: int
    kind: EventKind


def state_hash(state_dict: dict) -> str:
    blob = json.dumps(state_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TickRecord:
    tick: int
    state: dict
    state_hash: str
    speech: list[int]
    image: list[int]
    text: list[int]
    action: list[int]
    events: list[Event] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"tick": self.tick, "state": self.state,
                "state_hash": self.state_hash,
                "speech": self.speech, "image": self.image,
                "text": self.text, "action": self.action,
                "events": [[e.tick, e.kind.value] for e in self.events],
                "notes": self.notes}

    @staticmethod
    def from_dict(d: dict) -> "TickRecord":
        return TickRecord(
            tick=d["tick"], state=d["state"], state_hash=d["state_hash"],
            speech=d["speech"], image=d["image"], text=d["text"],
            action=d["action"],
            events=[Event(t, EventKind(k)) for t, k in d["events"]],
            notes=d["notes"])


@dataclass
class EpisodeTrace:
    header: dict  # task, seed, mode, script, cap
    records: list[TickRecord] = field(default_factory=list)

    def events(self, kind: EventKind) -> list[Event]:
        out = []
        for rec in self.records:
            out += [e for e in rec.events if e.kind == kind]
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        lines += [json.dumps(rec.to_dict(), sort_keys=True)
                  for rec in self.records]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "EpisodeTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])["header"]
        records = [TickRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        return EpisodeTrace(header=header, records=records)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def load(path) -> "EpisodeTrace":
        with open(path) as fh:
            return EpisodeTrace.from_jsonl(fh.read())
