"""Invariant suites behind the ``check`` command.

Each check returns (name, passed, detail). The fast level is a quick smoke
of every invariant; the full level runs the acceptance-sized sweeps.
"""

from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .blockcodec.codec import GEOM, Block, CodecError, decode_stream, encode_stream
from .blockcodec.history import HistoryPolicy, policy_attention_mask, truncate_history
from .blockcodec.vocab import VocabLayout, default_layout
from .numkernel import Tape, Tensor, finite_diff_check
from .samoe import ExpertId, SAMoEModel, UnifiedKVCache
from .samoe.config import SAMoEConfig
from .samoe.model import (dense_oracle_forward, forward_sequence, forward_token,
                          sequence_loss)
from .samoe.params import init_expert_params, make_adapters
from .samoe.routing import ModalityTag

TAG_MIX = (ModalityTag.SPEECH_IN, ModalityTag.IMAGE_IN, ModalityTag.TEXT_OUT,
           ModalityTag.ACTION_OUT, ModalityTag.PROMPT, ModalityTag.B_TEXT_OUT,
           ModalityTag.B_IMAGE_IN)


def small_config(n_layers=2, d_model=16, n_heads=4, n_kv_heads=2,
                 vocab=24, **kw) -> SAMoEConfig:
    return SAMoEConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                       n_kv_heads=n_kv_heads, d_head=d_model // n_heads,
                       d_ff=2 * d_model, vocab_size=vocab,
                       speech_out=(0, vocab), action_out=(0, vocab), **kw)


def tied_model(cfg: SAMoEConfig, rng) -> tuple[SAMoEModel, object]:
    params = init_expert_params("tied", cfg, rng, (0, cfg.vocab_size), 10000.0)
    model = SAMoEModel(cfg, {ExpertId.SPEECH_EXPERT: params,
                             ExpertId.ACTION_EXPERT: params})
    return model, params


def two_expert_model(cfg: SAMoEConfig, rng,
                     theta=(10000.0, 10000.0)) -> SAMoEModel:
    sp = init_expert_params("speech_expert", cfg, rng, cfg.speech_out, theta[0])
    ac = init_expert_params("action_expert", cfg, rng, cfg.action_out, theta[1])
    return SAMoEModel(cfg, {ExpertId.SPEECH_EXPERT: sp,
                            ExpertId.ACTION_EXPERT: ac})


def random_tagged_sequence(rng, vocab: int, t: int):
    tokens = rng.integers(0, vocab, size=t)
    tags = rng.choice([int(tg) for tg in TAG_MIX], size=t).astype(np.int8)
    return tokens, tags


def check_tied_dense(n_configs: int = 5, tol: float = 1e-9):
    """Routed model with tied experts == independently written dense forward."""
    shapes = [(1, 16), (2, 32), (4, 64), (2, 16), (1, 32), (4, 32), (2, 64)]
    worst = 0.0
    rng = np.random.default_rng(11)
    for layers, d in shapes[:n_configs]:
        cfg = small_config(n_layers=layers, d_model=d)
        model, params = tied_model(cfg, rng)
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 40)
        mine = forward_sequence(model, tokens, tags)
        oracle = dense_oracle_forward(params, tokens)
        diff = max(float(np.max(np.abs(mine[i][1] - oracle[i])))
                   for i in range(len(tokens)))
        worst = max(worst, diff)
    return ("tied-weights dense equivalence", worst <= tol,
            f"max |dlogit| = {worst:.3e} over {n_configs} configs (tol {tol:g})")


def check_streaming(n_seqs: int = 100, tol: float = 1e-10, seed: int = 23):
    """Cached block-by-block decoding == one-pass full recomputation."""
    rng = np.random.default_rng(seed)
    cfg = small_config(n_layers=3, d_model=32)
    model = two_expert_model(cfg, rng, theta=(10000.0, 50000.0))
    worst = 0.0
    for _ in range(n_seqs):
        t = int(rng.integers(3, 48))
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, t)
        full = forward_sequence(model, tokens, tags)
        cache = UnifiedKVCache(cfg, capacity=t + 4)
        for i in range(t):
            logits = forward_token(model, cache, int(tokens[i]),
                                   ModalityTag(int(tags[i])), i)
            worst = max(worst, float(np.max(np.abs(logits - full[i][1]))))
    return ("streaming equivalence", worst <= tol,
            f"max |dlogit| = {worst:.3e} over {n_seqs} sequences (tol {tol:g})")


def check_gradient(min_coords: int = 200, tol: float = 1e-4):
    """Full loss gradients vs central differences, cross-expert included."""
    rng = np.random.default_rng(5)
    cfg = small_config(n_layers=2, d_model=16, vocab=20)
    model = two_expert_model(cfg, rng)
    t = 18
    tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, t)
    mask = np.zeros(t, dtype=bool)
    mask[1:] = np.isin(tags[:-1], (int(ModalityTag.TEXT_OUT),
                                   int(ModalityTag.ACTION_OUT),
                                   int(ModalityTag.SPEECH_IN),
                                   int(ModalityTag.IMAGE_IN)))
    params = model.named_parameters()

    def loss_fn():
        loss, _ = sequence_loss(model, tokens[None, :], tags[None, :],
                                mask[None, :])
        return loss

    err_full = finite_diff_check(loss_fn, params, min_coords=min_coords)

    # cross-expert route: loss only on action-expert targets, probe
    # speech-expert coordinates (information flows through shared attention)
    act_mask = np.zeros(t, dtype=bool)
    act_mask[1:] = np.isin(tags[:-1], (int(ModalityTag.ACTION_OUT),
                                       int(ModalityTag.IMAGE_IN)))

    def loss_action():
        loss, _ = sequence_loss(model, tokens[None, :], tags[None, :],
                                act_mask[None, :])
        return loss

    speech_params = {k: v for k, v in params.items()
                     if k.startswith("speech_expert.")}
    err_cross = finite_diff_check(loss_action, speech_params, min_coords=120)
    nk.zero_grads(params)
    with Tape() as tape:
        loss = loss_action()
    tape.backward(loss)
    cross_mag = max(float(np.max(np.abs(v.grad))) for k, v in speech_params.items()
                    if v.grad is not None)
    ok = err_full <= tol and err_cross <= tol and cross_mag > 1e-8
    return ("gradient correctness (finite differences)", ok,
            f"full {err_full:.3e}, cross-expert {err_cross:.3e} "
            f"(tol {tol:g}), cross-grad magnitude {cross_mag:.2e}")


def random_block(rng, layout: VocabLayout, tick: int, geom=GEOM) -> Block:
    speech = tuple(int(x) for x in rng.integers(*layout.speech,
                                                size=geom.speech_slots))
    speech_only = bool(rng.random() < 0.4)
    if speech_only:
        images: tuple = ((),)
        action = tuple([layout.noop] * geom.action_slots)
    else:
        images = tuple(tuple(int(x) for x in rng.integers(*layout.image,
                                                          size=geom.image_slots))
                       for _ in range(geom.n_image_segments))
        action = tuple(int(x) for x in rng.integers(*layout.action,
                                                    size=geom.action_slots))
    if rng.random() < 0.4:
        text: tuple = (layout.silence,)
    else:
        text = tuple(int(x) for x in rng.integers(*layout.text,
                                                  size=geom.text_slots))
    return Block(tick=tick, speech=speech, images=images, text=text,
                 action=action)


def check_codec_roundtrip(n_blocks: int = 1000, seed: int = 3):
    layout = default_layout()
    rng = np.random.default_rng(seed)
    bad = 0
    remaining = n_blocks
    while remaining > 0:
        count = int(rng.integers(1, 6))
        count = min(count, remaining)
        blocks = [random_block(rng, layout, i) for i in range(count)]
        prompt = tuple(int(x) for x in rng.integers(*layout.prompt,
                                                    size=rng.integers(0, 3)))
        tokens, tags, _ = encode_stream(prompt, blocks, layout)
        dec = decode_stream(list(zip(tokens.tolist(), tags.tolist())), layout)
        if dec.blocks != blocks or dec.prompt != prompt or dec.partial:
            bad += 1
        remaining -= count
    return ("codec round-trip", bad == 0,
            f"{bad} mismatches over {n_blocks} random blocks")


def check_codec_fuzz(n_mutations: int = 1000, seed: int = 4):
    layout = default_layout()
    rng = np.random.default_rng(seed)
    crashes = 0
    parsed = 0
    errored = 0
    for _ in range(n_mutations):
        blocks = [random_block(rng, layout, i)
                  for i in range(int(rng.integers(1, 4)))]
        tokens, tags, _ = encode_stream((), blocks, layout)
        pairs = list(zip(tokens.tolist(), tags.tolist()))
        op = rng.integers(0, 5)
        i = int(rng.integers(0, len(pairs)))
        if op == 0 and len(pairs) > 1:
            del pairs[i]
        elif op == 1:
            pairs.insert(i, pairs[i])
        elif op == 2:
            pairs[i] = (int(rng.integers(0, layout.size)), pairs[i][1])
        elif op == 3 and i + 1 < len(pairs):
            pairs[i], pairs[i + 1] = pairs[i + 1], pairs[i]
        else:
            pairs[i] = (pairs[i][0], int(rng.integers(0, 11)))
        try:
            decode_stream(pairs, layout)
            parsed += 1
        except CodecError:
            errored += 1
        except Exception:
            crashes += 1
    return ("codec fuzz (no crashes)", crashes == 0,
            f"{n_mutations} mutations: {parsed} parsed, {errored} located "
            f"errors, {crashes} crashes")


def check_truncation(seed: int = 9, tol: float = 1e-10):
    """Census of the retention policy plus the masked-attention oracle."""
    layout = default_layout()
    rng = np.random.default_rng(seed)
    cfg = layout.model_config(n_layers=2)
    model = two_expert_model(cfg, rng)
    policy = HistoryPolicy(horizon=2)
    n_blocks = 10
    blocks = [random_block(rng, layout, i) for i in range(n_blocks)]
    tokens, tags, ticks = encode_stream((layout.id("P-DEFAULT"),), blocks,
                                        layout)

    cache = UnifiedKVCache(cfg, capacity=len(tokens) + 8)
    streamed = []
    pos = 0
    for tick in range(-1, n_blocks):
        cache.begin_block(tick)
        sel = ticks == tick
        for tok, tag in zip(tokens[sel], tags[sel]):
            streamed.append(forward_token(model, cache, int(tok),
                                          ModalityTag(int(tag)), pos))
            pos += 1
        if tick >= 0:
            truncate_history(cache, tick, policy)
    # prompt rows
    cache_prompt = [e for e in cache.entries() if e[3] == -1]

    current = n_blocks - 1
    va = {int(ModalityTag.IMAGE_IN), int(ModalityTag.B_IMAGE_IN),
          int(ModalityTag.ACTION_OUT), int(ModalityTag.B_ACTION_OUT)}
    census_ok = len(cache_prompt) == 3
    kept_va_ticks = set()
    for _pos, _exp, tag, tick in cache.entries():
        if int(tag) in va:
            kept_va_ticks.add(tick)
            if tick < current - policy.horizon:
                census_ok = False
    expected_speech = int(np.sum(~np.isin(tags, list(va))))
    kept_speech = sum(1 for e in cache.entries() if int(e[2]) not in va)
    census_ok = census_ok and kept_speech == expected_speech
    census_ok = census_ok and kept_va_ticks == {current, current - 1,
                                                current - 2}

    # the prompt precedes block 0: prepend its positions to the mask inputs
    allowed = policy_attention_mask(tags, ticks, policy)
    full = forward_sequence(model, tokens, tags, allowed=allowed)
    worst = max(float(np.max(np.abs(streamed[i] - full[i][1])))
                for i in range(len(tokens)))
    ok = census_ok and worst <= tol
    return ("history truncation policy", ok,
            f"census {'ok' if census_ok else 'VIOLATED'}, masked-attention "
            f"max |dlogit| = {worst:.3e} (tol {tol:g})")


def check_gqa(tol: float = 1e-12, seed: int = 6):
    """Grouped K/V expansion equals an explicitly ungrouped reference."""
    rng = np.random.default_rng(seed)
    b, h, kv, t, dh = 2, 4, 2, 12, 6
    q = Tensor(rng.normal(size=(b, h, t, dh)))
    k = Tensor(rng.normal(size=(b, kv, t, dh)))
    v = Tensor(rng.normal(size=(b, kv, t, dh)))
    bias = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, -1e30)[None, None]
    grouped = nk.attention(q, k, v, bias, h // kv)

    kr = np.repeat(k.data, h // kv, axis=1)
    vr = np.repeat(v.data, h // kv, axis=1)
    ungrouped = nk.attention(Tensor(q.data), Tensor(kr), Tensor(vr), bias, 1)
    diff_expand = float(np.max(np.abs(grouped.data - ungrouped.data)))

    # and against a per-head softmax composition with kv == heads
    ref = np.empty_like(q.data)
    for bi in range(b):
        for hi in range(h):
            scores = q.data[bi, hi] @ kr[bi, hi].T / np.sqrt(dh) + bias[0, 0]
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            p = e / e.sum(axis=-1, keepdims=True)
            ref[bi, hi] = p @ vr[bi, hi]
    diff_ref = float(np.max(np.abs(grouped.data - ref)))
    worst = max(diff_expand, diff_ref)
    return ("grouped-query attention correctness", worst <= tol,
            f"grouped vs ungrouped max diff = {worst:.3e} (tol {tol:g})")


def check_lora(tol: float = 1e-9, seed: int = 8):
    from .samoe.params import lora_merge

    rng = np.random.default_rng(seed)
    cfg = small_config(n_layers=2, d_model=16, vocab=20)
    model = two_expert_model(cfg, rng)
    tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 20)
    base = forward_sequence(model, tokens, tags)

    adapters = make_adapters(model.experts, rank=4, alpha=4.0, rng=rng)
    with_zero = model.replace(adapters=adapters)
    zeroed = forward_sequence(with_zero, tokens, tags)
    zero_diff = max(float(np.max(np.abs(zeroed[i][1] - base[i][1])))
                    for i in range(len(tokens)))

    for ad in adapters.values():
        ad.up.data = rng.normal(0, 0.2, size=ad.up.data.shape)
    runtime = forward_sequence(model.replace(adapters=adapters), tokens, tags)
    merged_model = lora_merge(model, adapters)
    merged = forward_sequence(merged_model, tokens, tags)
    merge_diff = max(float(np.max(np.abs(runtime[i][1] - merged[i][1])))
                     for i in range(len(tokens)))

    for ad in adapters.values():
        ad.alpha = 0.0
    alpha0 = forward_sequence(model.replace(adapters=adapters), tokens, tags)
    alpha0_diff = max(float(np.max(np.abs(alpha0[i][1] - base[i][1])))
                      for i in range(len(tokens)))

    ok = zero_diff == 0.0 and merge_diff <= tol and alpha0_diff == 0.0
    return ("low-rank adapter contracts", ok,
            f"zero-init diff {zero_diff:g} (exact), merged vs runtime "
            f"{merge_diff:.3e} (tol {tol:g}), alpha=0 diff {alpha0_diff:g}")


def run_checks(level: str = "fast"):
    full = level == "full"
    checks = [
        lambda: check_tied_dense(5 if full else 2),
        lambda: check_streaming(100 if full else 12),
        lambda: check_gradient(200 if full else 200),
        lambda: check_codec_roundtrip(1000 if full else 200),
        lambda: check_codec_fuzz(1000 if full else 200),
        lambda: check_truncation(),
        lambda: check_gqa(),
        lambda: check_lora(),
    ]
    results = [fn() for fn in checks]
    return results
