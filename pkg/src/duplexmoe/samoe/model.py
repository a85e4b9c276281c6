"""Forward paths of the routed-expert transformer.

Three routes cover every use:

* ``forward_batch`` — vectorized, taped, teacher-forced; training and any
  whole-sequence evaluation run through it.
* ``forward_token`` — untaped single-token streaming over a
  ``UnifiedKVCache``; inference runs through it.
* ``dense_oracle_forward`` — an independently written plain transformer used
  to verify the first two and to define the dense comparison architecture.

Each position is processed end to end by exactly one expert; experts meet
only inside attention, which reads every cached K/V row regardless of which
expert produced it.
"""

from __future__ import annotations

import numpy as np

from .. import numkernel as nk
from ..numkernel import Tensor
from ..numkernel.ops import rmsnorm_kernel, rope_kernel, softmax_kernel
from .cache import UnifiedKVCache
from .config import SAMoEConfig
from .params import ExpertParams, LoraAdapter
from .routing import ExpertId, ModalityTag, route

MASK_OFF = -1e30  # additive bias that underflows to exactly zero weight


class SAMoEModel:
    """Immutable bundle of config, experts, optional adapters, and a router."""

    def __init__(self, config: SAMoEConfig, experts: dict,
                 adapters: dict[str, LoraAdapter] | None = None,
                 router=None):
        self.config = config
        self.experts = experts
        self.adapters = adapters or {}
        self.router = router or route
        self.expert_order = sorted(experts.keys(), key=lambda k: (str(type(k)), k))
        self._lut = np.array(
            [self.expert_order.index(self.router(ModalityTag(v)))
             for v in range(len(ModalityTag))], dtype=np.int8)

    def replace(self, experts=None, adapters=None) -> "SAMoEModel":
        return SAMoEModel(self.config,
                          experts if experts is not None else self.experts,
                          adapters if adapters is not None else self.adapters,
                          self.router)

    def route_ids(self, tags: np.ndarray) -> np.ndarray:
        return self._lut[tags]

    def expert_for(self, tag: ModalityTag) -> ExpertParams:
        return self.experts[self.router(ModalityTag(tag))]

    def adapter(self, params: ExpertParams, key: str) -> LoraAdapter | None:
        return self.adapters.get(f"{params.name}.{key}")

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in self.expert_order:
            out.update(self.experts[key].named())
        for name in sorted(self.adapters):
            out.update(self.adapters[name].named())
        return out


def _project(x: Tensor, w: Tensor, adapter: LoraAdapter | None) -> Tensor:
    out = nk.matmul(x, w)
    if adapter is not None:
        delta = nk.matmul(nk.matmul(x, adapter.down), adapter.up)
        out = nk.add(out, nk.scale(delta, adapter.scaling))
    return out


def _project_np(x: np.ndarray, w: Tensor, adapter: LoraAdapter | None) -> np.ndarray:
    out = x @ w.data
    if adapter is not None:
        out = out + adapter.scaling * ((x @ adapter.down.data) @ adapter.up.data)
    return out


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def forward_batch(model: SAMoEModel, tokens: np.ndarray, tags: np.ndarray,
                  allowed: np.ndarray | None = None) -> dict:
    """Teacher-forced forward over a [B, T] batch.

    ``allowed`` is an optional [B, T, T] visibility mask (True = key visible
    to query); it is intersected with causality. Returns
    ``{expert_key: (flat_indices, logits Tensor)}`` where flat indices index
    the flattened [B*T] stream and logits cover that expert's output range.
    """
    tokens = np.asarray(tokens)
    tags = np.asarray(tags)
    if tokens.ndim != 2:
        raise ValueError(f"forward_batch expects [B, T] tokens, got {tokens.shape}")
    b, t = tokens.shape
    if t == 0:
        return {}
    cfg = model.config
    h, kv, dh, g = cfg.n_heads, cfg.n_kv_heads, cfg.d_head, cfg.group_size
    n = b * t

    vis = causal_mask(t)[None, :, :]
    if allowed is not None:
        vis = vis & allowed
    bias = np.where(vis, 0.0, MASK_OFF)[:, None, :, :].astype(cfg.dtype)

    flat_tokens = tokens.reshape(n)
    route_ids = model.route_ids(tags.reshape(n))
    positions = np.tile(np.arange(t, dtype=np.int64), b)
    idx = {ei: np.flatnonzero(route_ids == ei)
           for ei in range(len(model.expert_order))}
    active = [(ei, model.experts[model.expert_order[ei]])
              for ei in range(len(model.expert_order)) if idx[ei].size > 0]

    def assemble(parts):
        acc = None
        for ei, part in parts:
            placed = nk.put_rows(n, idx[ei], part)
            acc = placed if acc is None else nk.add(acc, placed)
        return acc

    x = assemble([(ei, nk.embed(p.t("embed"), flat_tokens[idx[ei]]))
                  for ei, p in active])

    for li in range(cfg.n_layers):
        qs, ks, vs = [], [], []
        for ei, p in active:
            xe = nk.take_rows(x, idx[ei])
            ne = nk.rmsnorm(xe, p.layer(li, "attn_norm"))
            pe = positions[idx[ei]]
            q = _project(ne, p.layer(li, "wq"), model.adapter(p, f"layer{li}.wq"))
            k = _project(ne, p.layer(li, "wk"), model.adapter(p, f"layer{li}.wk"))
            v = _project(ne, p.layer(li, "wv"), model.adapter(p, f"layer{li}.wv"))
            q = nk.rope_rows(nk.reshape(q, (idx[ei].size, h, dh)), pe, p.rope_theta)
            k = nk.rope_rows(nk.reshape(k, (idx[ei].size, kv, dh)), pe, p.rope_theta)
            v = nk.reshape(v, (idx[ei].size, kv, dh))
            qs.append((ei, q))
            ks.append((ei, k))
            vs.append((ei, v))
        q = assemble(qs)
        k = assemble(ks)
        v = assemble(vs)

        qh = nk.transpose(nk.reshape(q, (b, t, h, dh)), (0, 2, 1, 3))
        kh = nk.transpose(nk.reshape(k, (b, t, kv, dh)), (0, 2, 1, 3))
        vh = nk.transpose(nk.reshape(v, (b, t, kv, dh)), (0, 2, 1, 3))
        ctx = nk.attention(qh, kh, vh, bias, g)
        ctx = nk.reshape(nk.transpose(ctx, (0, 2, 1, 3)), (n, h * dh))

        x = nk.add(x, assemble(
            [(ei, _project(nk.take_rows(ctx, idx[ei]), p.layer(li, "wo"),
                           model.adapter(p, f"layer{li}.wo")))
             for ei, p in active]))

        outs = []
        for ei, p in active:
            xe = nk.take_rows(x, idx[ei])
            ne = nk.rmsnorm(xe, p.layer(li, "ffn_norm"))
            gate = nk.silu(_project(ne, p.layer(li, "w_gate"),
                                    model.adapter(p, f"layer{li}.w_gate")))
            up = _project(ne, p.layer(li, "w_up"),
                          model.adapter(p, f"layer{li}.w_up"))
            outs.append((ei, _project(nk.mul(gate, up), p.layer(li, "w_down"),
                                      model.adapter(p, f"layer{li}.w_down"))))
        x = nk.add(x, assemble(outs))

    result = {}
    for ei, p in active:
        fe = nk.rmsnorm(nk.take_rows(x, idx[ei]), p.t("final_norm"))
        logits = nk.matmul(fe, p.t("unembed"))
        result[model.expert_order[ei]] = (idx[ei], logits)
    return result


def forward_sequence(model: SAMoEModel, tokens, tags,
                     allowed: np.ndarray | None = None) -> list:
    """One-pass causal forward of a single tagged sequence.

    Returns, per position, ``(expert_key, logits row over that expert's
    output range)``. Equals a streaming ``forward_token`` replay from an
    empty cache.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        return []
    tags = np.asarray([int(tg) for tg in tags], dtype=np.int8)
    ext = allowed[None, :, :] if allowed is not None else None
    per_expert = forward_batch(model, tokens[None, :], tags[None, :], ext)
    out: list = [None] * tokens.size
    for key, (idx, logits) in per_expert.items():
        for row, flat in enumerate(idx):
            out[flat] = (key, logits.data[row])
    return out


def sequence_loss(model: SAMoEModel, tokens: np.ndarray, tags: np.ndarray,
                  loss_mask: np.ndarray, allowed: np.ndarray | None = None):
    """Masked next-token cross entropy averaged over all masked-in targets.

    ``loss_mask[b, j]`` marks token j itself as a prediction target; the
    loss reads logits from position j-1, which routing guarantees belongs to
    the expert whose output range contains the target.

    Returns ``(loss Tensor, stats dict)`` with per-expert target counts and
    greedy-accuracy numbers for logging.
    """
    b, t = tokens.shape
    per_expert = forward_batch(model, tokens, tags, allowed)
    total = None
    n_total = 0
    stats = {"n": 0, "correct": 0}
    for key, (idx, logits) in per_expert.items():
        params = model.experts[key]
        rows_b, rows_t = idx // t, idx % t
        has_next = rows_t + 1 < t
        tgt = np.where(has_next, tokens[rows_b, np.minimum(rows_t + 1, t - 1)], 0)
        m = has_next & loss_mask[rows_b, np.minimum(rows_t + 1, t - 1)]
        if not m.any():
            continue
        in_range = (tgt >= params.out_lo) & (tgt < params.out_hi)
        if np.any(m & ~in_range):
            raise ValueError(
                f"loss target outside {key} output range "
                f"[{params.out_lo}, {params.out_hi})")
        local = np.where(m, tgt - params.out_lo, 0)
        ce = nk.cross_entropy(logits, local, m)
        cnt = int(m.sum())
        part = nk.scale(ce, float(cnt))
        total = part if total is None else nk.add(total, part)
        n_total += cnt
        stats["n"] += cnt
        stats["correct"] += int(
            (logits.data[m].argmax(axis=1) == local[m]).sum())
    if total is None:
        return nk.cross_entropy(Tensor(np.zeros((0, 1), dtype=model.config.dtype)),
                                np.zeros(0, dtype=int), np.zeros(0, bool)), stats
    return nk.scale(total, 1.0 / n_total), stats


# ---------------------------------------------------------------------------
# streaming path
# ---------------------------------------------------------------------------

def _stream_rope_position(position: int) -> int:
    """Indirection point for fault-injection tests; identity in production."""
    return position


def forward_token(model: SAMoEModel, cache: UnifiedKVCache, token_id: int,
                  tag: ModalityTag, position: int,
                  probe: dict | None = None) -> np.ndarray:
    """Consume one token through its routed expert, appending K/V per layer.

    Attends causally over every cache row, whoever produced it. Returns the
    logits over the routed expert's output vocab range. When ``probe`` is a
    dict it receives per-layer attention rows ('attn') and the final hidden
    state ('hidden') for this token.
    """
    cache.check_position(position)
    tag = ModalityTag(tag)
    key = model.router(tag)
    p = model.experts[key]
    cfg = model.config
    h, kv, dh, g = cfg.n_heads, cfg.n_kv_heads, cfg.d_head, cfg.group_size
    rp = float(_stream_rope_position(position))

    cache.append_meta(position, model.expert_order.index(key), tag)
    x = p.t("embed").data[token_id].copy()
    for li in range(cfg.n_layers):
        ne = rmsnorm_kernel(x, p.layer(li, "attn_norm").data)
        q = _project_np(ne, p.layer(li, "wq"), model.adapter(p, f"layer{li}.wq"))
        k = _project_np(ne, p.layer(li, "wk"), model.adapter(p, f"layer{li}.wk"))
        v = _project_np(ne, p.layer(li, "wv"), model.adapter(p, f"layer{li}.wv"))
        q = rope_kernel(q.reshape(h, dh), np.asarray(rp), p.rope_theta)
        k = rope_kernel(k.reshape(kv, dh), np.asarray(rp), p.rope_theta)
        cache.write(li, k, v.reshape(kv, dh))

        ln = cache.length
        keys = cache.k[li][:ln]
        vals = cache.v[li][:ln]
        qg = q.reshape(kv, g, dh)
        scores = np.einsum("kgd,lkd->kgl", qg, keys) * dh ** -0.5
        probs = softmax_kernel(scores)
        ctx = np.einsum("kgl,lkd->kgd", probs, vals).reshape(h * dh)
        if probe is not None:
            probe.setdefault("attn", []).append(probs.reshape(h, ln).copy())

        x = x + _project_np(ctx, p.layer(li, "wo"),
                            model.adapter(p, f"layer{li}.wo"))
        ne = rmsnorm_kernel(x, p.layer(li, "ffn_norm").data)
        gate = _silu_np(_project_np(ne, p.layer(li, "w_gate"),
                                    model.adapter(p, f"layer{li}.w_gate")))
        up = _project_np(ne, p.layer(li, "w_up"),
                         model.adapter(p, f"layer{li}.w_up"))
        x = x + _project_np(gate * up, p.layer(li, "w_down"),
                            model.adapter(p, f"layer{li}.w_down"))

    final = rmsnorm_kernel(x, p.t("final_norm").data)
    if probe is not None:
        probe["hidden"] = final.copy()
    return final @ p.t("unembed").data


def sample_segment(model: SAMoEModel, cache: UnifiedKVCache, tag: ModalityTag,
                   max_len: int | None = None, temperature: float = 0.0,
                   rng: np.random.Generator | None = None,
                   seed: int | None = None,
                   hidden_sink: list | None = None) -> list[int]:
    """Emit one output segment, feeding its boundary tokens structurally.

    TEXT_OUT: a leading <silence> closes the segment at length 1, otherwise
    exactly ``slots_text`` payload tokens are produced. ACTION_OUT always
    produces ``slots_action`` tokens. Logits are restricted to the segment's
    payload vocab range, so off-slice emissions cannot occur.
    """
    tag = ModalityTag(tag)
    if tag not in (ModalityTag.TEXT_OUT, ModalityTag.ACTION_OUT):
        raise ValueError(f"sample_segment only emits TEXT_OUT/ACTION_OUT, got {tag.name}")
    if rng is None:
        rng = np.random.default_rng(seed)
    cfg = model.config
    sp = cfg.specials
    params = model.experts[model.router(tag)]
    if tag == ModalityTag.TEXT_OUT:
        opener, closer = sp.bot, sp.eot
        lo, hi = cfg.text_payload
        count = cfg.slots_text if max_len is None else min(max_len, cfg.slots_text)
    else:
        opener, closer = sp.boa, sp.eoa
        lo, hi = cfg.action_payload
        count = cfg.slots_action if max_len is None else min(max_len, cfg.slots_action)
    boundary = ModalityTag.boundary(tag)

    logits = forward_token(model, cache, opener, boundary, cache.next_position)
    toks: list[int] = []
    for i in range(count):
        exclude = None if (i == 0 or tag != ModalityTag.TEXT_OUT) else sp.silence
        tok = _draw(logits, params.out_lo, lo, hi, exclude, temperature, rng)
        toks.append(tok)
        probe = {} if hidden_sink is not None else None
        logits = forward_token(model, cache, tok, tag, cache.next_position,
                               probe=probe)
        if probe is not None:
            hidden_sink.append(probe["hidden"])
        if tag == ModalityTag.TEXT_OUT and i == 0 and tok == sp.silence:
            break
    forward_token(model, cache, closer, boundary, cache.next_position)
    return toks


def _draw(logits: np.ndarray, out_lo: int, lo: int, hi: int,
          exclude: int | None, temperature: float,
          rng: np.random.Generator) -> int:
    view = logits[lo - out_lo:hi - out_lo].astype(np.float64).copy()
    if exclude is not None and lo <= exclude < hi:
        view[exclude - lo] = -np.inf
    if temperature == 0.0:
        return lo + int(np.argmax(view))
    p = softmax_kernel(view / temperature)
    return lo + int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))


# ---------------------------------------------------------------------------
# independent dense reference
# ---------------------------------------------------------------------------

def dense_oracle_forward(params: ExpertParams, tokens) -> np.ndarray:
    """Textbook single-expert decoder forward, written independently.

    Deliberately avoids every shared kernel and the routed code paths: norms,
    rotary embedding, grouped attention, and masking are all spelled out
    inline. Serves as the equivalence oracle for the routed model and as the
    dense comparison architecture's reference semantics.
    """
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.size
    if t == 0:
        return np.zeros((0, params.out_width()), dtype=cfg.dtype)
    h, kv, dh, g = cfg.n_heads, cfg.n_kv_heads, cfg.d_head, cfg.group_size
    eps = 1e-6
    theta = params.rope_theta
    pos = np.arange(t, dtype=np.float64)
    freqs = theta ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
    ang = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def rot(y):
        # y: [t, heads, dh]; rotate interleaved pairs by the position angle
        even, odd = y[..., 0::2], y[..., 1::2]
        out = np.empty_like(y)
        out[..., 0::2] = even * cos[:, None, :] - odd * sin[:, None, :]
        out[..., 1::2] = even * sin[:, None, :] + odd * cos[:, None, :]
        return out

    def norm(y, gain):
        return y / np.sqrt((y * y).mean(axis=-1, keepdims=True) + eps) * gain

    ts = params.tensors
    x = ts["embed"].data[tokens]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    for li in range(cfg.n_layers):
        ne = norm(x, ts[f"layer{li}.attn_norm"].data)
        q = rot((ne @ ts[f"layer{li}.wq"].data).reshape(t, h, dh))
        k = rot((ne @ ts[f"layer{li}.wk"].data).reshape(t, kv, dh))
        v = (ne @ ts[f"layer{li}.wv"].data).reshape(t, kv, dh)
        k_all = np.repeat(k, g, axis=1)
        v_all = np.repeat(v, g, axis=1)
        scores = np.einsum("qhd,khd->hqk", q, k_all) / np.sqrt(dh)
        scores[:, future] = -np.inf
        shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs = shifted / shifted.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hqk,khd->qhd", probs, v_all).reshape(t, h * dh)
        x = x + ctx @ ts[f"layer{li}.wo"].data
        ne = norm(x, ts[f"layer{li}.ffn_norm"].data)
        gate = ne @ ts[f"layer{li}.w_gate"].data
        gate = gate / (1.0 + np.exp(-gate))
        x = x + ((gate * (ne @ ts[f"layer{li}.w_up"].data))
                 @ ts[f"layer{li}.w_down"].data)
    return norm(x, ts["final_norm"].data) @ ts["unembed"].data
