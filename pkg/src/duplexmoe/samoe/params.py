"""Expert parameter sets and low-rank adapters."""

from __future__ import annotations

import threading

import numpy as np

from ..numkernel import Tensor
from .config import SAMoEConfig

PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")

_TOUCH = threading.local()


def start_touch_log() -> None:
    """Begin recording which expert's tensors are read (test instrumentation)."""
    _TOUCH.log = []


def stop_touch_log() -> list[str]:
    log = getattr(_TOUCH, "log", [])
    _TOUCH.log = None
    return log


class ExpertParams:
    """One expert: full-vocab embedding, per-layer blocks, sliced unembedding.

    The unembedding covers only the expert's output vocab range
    ``[out_lo, out_hi)``; logits it produces are indexed in that local space.
    The input embedding spans the whole unified vocab so a lone expert can
    consume any stream (stage-1 training, dense baseline).
    """

    def __init__(self, name: str, cfg: SAMoEConfig, tensors: dict[str, Tensor],
                 out_range: tuple[int, int], rope_theta: float):
        self.name = name
        self.cfg = cfg
        self.tensors = tensors
        self.out_lo, self.out_hi = out_range
        self.rope_theta = rope_theta

    def t(self, key: str) -> Tensor:
        log = getattr(_TOUCH, "log", None)
        if log is not None:
            log.append(f"{self.name}.{key}")
        return self.tensors[key]

    def layer(self, i: int, key: str) -> Tensor:
        return self.t(f"layer{i}.{key}")

    def named(self) -> dict[str, Tensor]:
        return {f"{self.name}.{k}": v for k, v in self.tensors.items()}

    def out_width(self) -> int:
        return self.out_hi - self.out_lo


def init_expert_params(name: str, cfg: SAMoEConfig, rng: np.random.Generator,
                       out_range: tuple[int, int],
                       rope_theta: float) -> ExpertParams:
    dt = cfg.dtype
    d, h, kv, dh, ff = (cfg.d_model, cfg.n_heads, cfg.n_kv_heads,
                        cfg.d_head, cfg.d_ff)

    def mat(n_in, n_out):
        return Tensor(rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out)).astype(dt),
                      requires_grad=True)

    tensors: dict[str, Tensor] = {
        "embed": Tensor(rng.normal(0.0, 0.5 * d ** -0.5,
                                   size=(cfg.vocab_size, d)).astype(dt),
                        requires_grad=True),
    }
    for i in range(cfg.n_layers):
        tensors[f"layer{i}.attn_norm"] = Tensor(np.ones(d, dtype=dt),
                                                requires_grad=True)
        tensors[f"layer{i}.wq"] = mat(d, h * dh)
        tensors[f"layer{i}.wk"] = mat(d, kv * dh)
        tensors[f"layer{i}.wv"] = mat(d, kv * dh)
        tensors[f"layer{i}.wo"] = mat(h * dh, d)
        tensors[f"layer{i}.ffn_norm"] = Tensor(np.ones(d, dtype=dt),
                                               requires_grad=True)
        tensors[f"layer{i}.w_gate"] = mat(d, ff)
        tensors[f"layer{i}.w_up"] = mat(d, ff)
        tensors[f"layer{i}.w_down"] = mat(ff, d)
    tensors["final_norm"] = Tensor(np.ones(d, dtype=dt), requires_grad=True)
    lo, hi = out_range
    tensors["unembed"] = mat(d, hi - lo)
    return ExpertParams(name, cfg, tensors, out_range, rope_theta)


class LoraAdapter:
    """Low-rank delta for one projection: W + (alpha/r) * down @ up.

    ``down`` (A) maps d_in -> r and ``up`` (B) maps r -> d_out; ``up`` starts
    at zero so a fresh adapter is an exact identity delta.
    """

    def __init__(self, target: str, rank: int, alpha: float,
                 d_in: int, d_out: int, rng: np.random.Generator, dtype):
        if rank <= 0:
            raise ValueError(f"adapter rank must be positive, got {rank}")
        self.target = target
        self.rank = rank
        self.alpha = float(alpha)
        self.down = Tensor(rng.normal(0.0, d_in ** -0.5,
                                      size=(d_in, rank)).astype(dtype),
                           requires_grad=True)
        self.up = Tensor(np.zeros((rank, d_out), dtype=dtype),
                         requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.down.data @ self.up.data)

    def named(self) -> dict[str, Tensor]:
        return {f"lora.{self.target}.A": self.down, f"lora.{self.target}.B": self.up}


def make_adapters(experts: dict, rank: int, alpha: float,
                  rng: np.random.Generator,
                  targets: tuple[str, ...] = PROJECTIONS) -> dict[str, LoraAdapter]:
    """Fresh zero-delta adapters for every targeted projection of every expert."""
    adapters: dict[str, LoraAdapter] = {}
    for params in experts.values():
        for key, w in sorted(params.tensors.items()):
            if key.rsplit(".", 1)[-1] in targets:
                full = f"{params.name}.{key}"
                adapters[full] = LoraAdapter(full, rank, alpha,
                                             w.data.shape[0], w.data.shape[1],
                                             rng, w.data.dtype)
    return adapters


def lora_apply(model, adapters: dict[str, LoraAdapter]):
    """Return a model that evaluates adapters at runtime (weights untouched)."""
    clone = model.replace(adapters=dict(adapters))
    return clone


def lora_merge(model, adapters: dict[str, LoraAdapter]):
    """Fold adapter deltas into the base weights, producing an adapter-free model."""
    merged_experts = {}
    for eid, params in model.experts.items():
        tensors = {}
        for key, w in params.tensors.items():
            full = f"{params.name}.{key}"
            if full in adapters:
                tensors[key] = Tensor(w.data + adapters[full].delta(),
                                      requires_grad=True)
            else:
                tensors[key] = Tensor(w.data.copy(), requires_grad=True)
        merged_experts[eid] = ExpertParams(params.name, params.cfg, tensors,
                                           (params.out_lo, params.out_hi),
                                           params.rope_theta)
    return model.replace(experts=merged_experts, adapters={})
