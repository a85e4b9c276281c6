"""Flat key=value training configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..duplex_sim.dataset import PRETRAIN_MANIP
from ..duplex_sim.scripts import TaskKind


class Stage(Enum):
    EXPERT_SPEECH = "expert_speech"
    EXPERT_ACTION = "expert_action"
    JOINT_SAMOE = "joint_samoe"
    DENSE_BASELINE = "dense_baseline"


class ConfigError(ValueError):
    pass


_SPEECH_TASKS = {TaskKind.ECHO.value, TaskKind.QA.value}


@dataclass
class TrainConfig:
    stage: Stage
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-3
    warmup: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    seed: int = 0
    task_mix: dict[str, float] = field(default_factory=dict)
    lora_rank: int = 8
    lora_alpha: float = 8.0
    precision: str = "f64"
    init_speech: str = ""   # stage-1 speech checkpoint (joint stage)
    init_action: str = ""   # stage-1 action checkpoint (joint stage)
    init_from: str = "SCRATCH"  # dense: FROM_SPEECH | FROM_ACTION | SCRATCH
    init_path: str = ""     # dense: source expert checkpoint
    checkpoint_every: int = 0  # 0 = final only
    log_every: int = 10
    chunk_episodes: int = 64   # fresh-data generation chunk (length-bucketed)

    def __post_init__(self):
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup must be in [0, 1), got {self.warmup}")
        if not self.task_mix:
            self.task_mix = default_mix(self.stage)
        self.validate_mix()

    def validate_mix(self) -> None:
        names = set(self.task_mix)
        known = {t.value for t in TaskKind} | {PRETRAIN_MANIP}
        unknown = names - known
        if unknown:
            raise ConfigError(f"unknown task mix keys: {sorted(unknown)}")
        if self.stage == Stage.EXPERT_SPEECH and not names <= _SPEECH_TASKS:
            raise ConfigError(
                f"speech expert trains on speech-only tasks {sorted(_SPEECH_TASKS)}, "
                f"got {sorted(names)}")
        if self.stage == Stage.EXPERT_ACTION and names != {PRETRAIN_MANIP}:
            raise ConfigError(
                f"action expert trains on {PRETRAIN_MANIP!r} only, got {sorted(names)}")

    def warmup_steps(self) -> int:
        return int(round(self.warmup * self.steps))

    def to_text(self) -> str:
        lines = [f"stage={self.stage.value}"]
        for key in ("steps", "batch_size", "lr", "warmup", "beta1", "beta2",
                    "weight_decay", "seed", "lora_rank", "lora_alpha",
                    "precision", "init_speech", "init_action", "init_from",
                    "init_path", "checkpoint_every", "log_every",
                    "chunk_episodes"):
            lines.append(f"{key}={getattr(self, key)}")
        for task in sorted(self.task_mix):
            lines.append(f"task_mix.{task}={self.task_mix[task]}")
        return "\n".join(lines) + "\n"


def default_mix(stage: Stage) -> dict[str, float]:
    if stage == Stage.EXPERT_SPEECH:
        return {TaskKind.ECHO.value: 1.0, TaskKind.QA.value: 1.0}
    if stage == Stage.EXPERT_ACTION:
        return {PRETRAIN_MANIP: 1.0}
    return {
        TaskKind.ECHO.value: 1.0,
        TaskKind.QA.value: 1.0,
        TaskKind.MANIP.value: 1.5,
        TaskKind.SPEAK_WHILE_ACT.value: 1.5,
        TaskKind.CONTEXT_VQA.value: 1.5,
        TaskKind.DEFECTIVE.value: 1.5,
        TaskKind.BARGE_IN.value: 1.5,
        TaskKind.SILENCE_CONTROL.value: 1.0,
    }


_INT_KEYS = {"steps", "batch_size", "seed", "lora_rank", "checkpoint_every",
             "log_every", "chunk_episodes"}
_FLOAT_KEYS = {"lr", "warmup", "beta1", "beta2", "weight_decay", "lora_alpha"}


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key=value`` lines; '#' starts a comment, blanks are skipped."""
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()

    if "stage" not in kv:
        raise ConfigError("config is missing the 'stage' key")
    try:
        stage = Stage(kv.pop("stage"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    mix: dict[str, float] = {}
    args: dict = {}
    for key, value in kv.items():
        if key.startswith("task_mix."):
            mix[key[len("task_mix."):]] = float(value)
        elif key in _INT_KEYS:
            args[key] = int(value)
        elif key in _FLOAT_KEYS:
            args[key] = float(value)
        elif key in ("precision", "init_speech", "init_action", "init_from",
                     "init_path"):
            args[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(stage=stage, task_mix=mix, **args)


def parse_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
