"""Staged training over freshly generated episodes.

Every step draws its own batch of episodes from the data RNG, so the whole
run is a pure function of (config, seed) and resuming from a checkpoint
reproduces the uninterrupted run exactly (single-threaded, f64).
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..blockcodec.history import HistoryPolicy, policy_attention_mask
from ..blockcodec.vocab import VocabLayout, default_layout
from ..duplex_sim.dataset import (PRETRAIN_MANIP, Example, build_rollout,
                                  example_from_rollout)
from ..duplex_sim.scripts import EVAL_SEED_SPACE, TaskKind
from ..numkernel import Tape, zero_grads
from ..samoe import ExpertId, SAMoEModel
from ..samoe.model import sequence_loss
from ..samoe.params import make_adapters
from ..samoe.routing import ModalityTag
from .builders import (DENSE, build_dense_model, build_samoe_model,
                       dense_init, expert_from_tensors, fresh_expert)
from .checkpoint import load_checkpoint, restored_rng, save_checkpoint
from .config import ConfigError, Stage, TrainConfig
from .optim import AdamWState, adamw_step


@dataclass
class TrainResult:
    model: SAMoEModel
    checkpoint_path: str
    log_rows: list[tuple] = field(default_factory=list)
    final_loss: float = float("nan")


def collate(examples: list[Example], layout: VocabLayout,
            policy: HistoryPolicy):
    b = len(examples)
    t = max(len(ex.tokens) for ex in examples)
    tokens = np.full((b, t), layout.id("<bos>"), dtype=np.int64)
    tags = np.full((b, t), int(ModalityTag.PAD), dtype=np.int8)
    mask = np.zeros((b, t), dtype=bool)
    allowed = np.ones((b, t, t), dtype=bool)
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        tokens[i, :n] = ex.tokens
        tags[i, :n] = ex.tags
        mask[i, :n] = ex.mask
        ticks = np.concatenate([ex.ticks,
                                np.full(t - n, ex.ticks[-1], dtype=np.int64)])
        allowed[i] = policy_attention_mask(tags[i], ticks, policy)
    return tokens, tags, mask, allowed


def _draw_batch(config: TrainConfig, layout: VocabLayout,
                rng: np.random.Generator) -> list[Example]:
    names = sorted(config.task_mix)
    weights = np.array([config.task_mix[nm] for nm in names], dtype=float)
    probs = weights / weights.sum()
    picks = rng.choice(len(names), size=config.batch_size, p=probs)
    seeds = rng.integers(EVAL_SEED_SPACE, 2 ** 31, size=config.batch_size)
    out = []
    for pick, seed in zip(picks, seeds):
        name = names[int(pick)]
        pretrain = name == PRETRAIN_MANIP
        task = TaskKind.MANIP if pretrain else TaskKind(name)
        roll = build_rollout(task, int(seed), layout, action_pretrain=pretrain)
        out.append(example_from_rollout(roll, layout, action_pretrain=pretrain))
    return out


def _build_stage_model(config: TrainConfig, layout: VocabLayout,
                       init_rng: np.random.Generator):
    """Returns (model, trainable param dict)."""
    cfg = layout.model_config(precision=config.precision)
    if config.stage == Stage.EXPERT_SPEECH:
        params = fresh_expert("speech_expert", cfg, init_rng, layout.text)
        model = SAMoEModel(cfg, {ExpertId.SPEECH_EXPERT: params},
                           router=lambda tag: ExpertId.SPEECH_EXPERT)
        return model, model.named_parameters()
    if config.stage == Stage.EXPERT_ACTION:
        params = fresh_expert("action_expert", cfg, init_rng, layout.action)
        model = SAMoEModel(cfg, {ExpertId.ACTION_EXPERT: params},
                           router=lambda tag: ExpertId.ACTION_EXPERT)
        return model, model.named_parameters()
    if config.stage == Stage.JOINT_SAMOE:
        if not config.init_speech or not config.init_action:
            raise ConfigError("joint stage requires init_speech and init_action "
                              "checkpoints")
        sp_ck = load_checkpoint(config.init_speech)
        ac_ck = load_checkpoint(config.init_action)
        speech = expert_from_tensors("speech_expert", cfg, sp_ck.tensors,
                                     layout.text)
        action = expert_from_tensors("action_expert", cfg, ac_ck.tensors,
                                     layout.action)
        adapters = make_adapters(
            {ExpertId.SPEECH_EXPERT: speech, ExpertId.ACTION_EXPERT: action},
            config.lora_rank, config.lora_alpha, init_rng)
        model = build_samoe_model(layout, cfg, speech, action, adapters)
        trainable = {}
        for ad in adapters.values():
            trainable.update(ad.named())
        return model, trainable
    if config.stage == Stage.DENSE_BASELINE:
        source = None
        if config.init_from != "SCRATCH":
            if not config.init_path:
                raise ConfigError(f"dense init {config.init_from} needs init_path")
            source = load_checkpoint(config.init_path).tensors
        params = dense_init(config.init_from, source, layout, cfg, init_rng)
        model = build_dense_model(layout, cfg, params)
        return model, model.named_parameters()
    raise ConfigError(f"unhandled stage {config.stage}")


def train(config: TrainConfig, out_dir: str,
          layout: VocabLayout | None = None,
          resume: str | None = None,
          policy: HistoryPolicy | None = None,
          on_step=None) -> TrainResult:
    layout = layout or default_layout()
    policy = policy or HistoryPolicy()
    os.makedirs(out_dir, exist_ok=True)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    data_rng = np.random.default_rng(seeds[1])

    model, trainable = _build_stage_model(config, layout, init_rng)
    all_params = model.named_parameters()
    opt = AdamWState()
    start_step = 0

    if resume:
        ck = load_checkpoint(resume)
        for name, arr in ck.tensors.items():
            if name not in all_params:
                raise ConfigError(f"resume checkpoint has unknown tensor {name!r}")
            all_params[name].data = np.array(arr, copy=True)
        for name, (m, v) in ck.moments.items():
            opt.m[name] = np.array(m, copy=True)
            opt.v[name] = np.array(v, copy=True)
        opt.step = ck.step
        start_step = ck.step
        if ck.rng_state is not None:
            data_rng = restored_rng(ck.rng_state)

    warmup_steps = config.warmup_steps()
    log_rows: list[tuple] = []
    t_start = time.time()
    loss_value = float("nan")
    ckpt_path = os.path.join(out_dir, "model.samo")

    for step in range(start_step + 1, config.steps + 1):
        batch = _draw_batch(config, layout, data_rng)
        tokens, tags, mask, allowed = collate(batch, layout, policy)
        # a lone expert can only be supervised on targets its unembedding
        # covers; the dummy segments of the other modality stay input-only
        if config.stage == Stage.EXPERT_SPEECH:
            mask &= tags == int(ModalityTag.TEXT_OUT)
        elif config.stage == Stage.EXPERT_ACTION:
            mask &= tags == int(ModalityTag.ACTION_OUT)
        zero_grads(all_params)
        with Tape() as tape:
            loss, stats = sequence_loss(model, tokens, tags, mask, allowed)
        tape.backward(loss)
        lr_now = adamw_step(trainable, opt, config.lr, config.beta1,
                            config.beta2, config.weight_decay, warmup_steps)
        loss_value = loss.item()
        acc = stats["correct"] / max(1, stats["n"])
        log_rows.append((step, loss_value, lr_now, time.time() - t_start))
        if on_step is not None:
            on_step(step, loss_value, acc)
        if config.checkpoint_every and step % config.checkpoint_every == 0 \
                and step < config.steps:
            save_checkpoint(os.path.join(out_dir, f"step{step:06d}.samo"),
                            all_params, config.to_text(), step=step,
                            rng=data_rng, moments=opt.moments())

    save_checkpoint(ckpt_path, all_params, config.to_text(), step=config.steps,
                    rng=data_rng, moments=opt.moments())
    log_path = os.path.join(out_dir, "log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "walltime"])
        for row in log_rows:
            writer.writerow([row[0], f"{row[1]:.10f}", f"{row[2]:.8g}",
                             f"{row[3]:.3f}"])
    return TrainResult(model=model, checkpoint_path=ckpt_path,
                       log_rows=log_rows, final_loss=loss_value)
