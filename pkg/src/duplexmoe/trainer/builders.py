"""Model assembly: fresh experts, checkpoint round trips, dense inits."""

from __future__ import annotations

import numpy as np

from ..blockcodec.vocab import VocabLayout, default_layout
from ..numkernel import Tensor
from ..samoe import ExpertId, SAMoEModel
from ..samoe.config import SAMoEConfig
from ..samoe.params import ExpertParams, LoraAdapter, init_expert_params
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

DENSE = "dense"
ROPE_THETA = 10000.0


def fresh_expert(name: str, cfg: SAMoEConfig, rng: np.random.Generator,
                 out_range: tuple[int, int],
                 rope_theta: float = ROPE_THETA) -> ExpertParams:
    return init_expert_params(name, cfg, rng, out_range, rope_theta)


def expert_from_tensors(name: str, cfg: SAMoEConfig, arrays: dict,
                        out_range: tuple[int, int],
                        rope_theta: float = ROPE_THETA) -> ExpertParams:
    prefix = name + "."
    tensors = {}
    for full, arr in arrays.items():
        if full.startswith(prefix):
            tensors[full[len(prefix):]] = Tensor(np.array(arr, copy=True),
                                                 requires_grad=True)
    if "embed" not in tensors or "unembed" not in tensors:
        raise CheckpointError(f"checkpoint carries no {name!r} parameters")
    expected = {k for k in init_expert_params(name, cfg,
                                              np.random.default_rng(0),
                                              out_range, rope_theta).tensors}
    got = set(tensors)
    if got != expected:
        raise CheckpointError(
            f"geometry mismatch for {name!r}: missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}")
    return ExpertParams(name, cfg, tensors, out_range, rope_theta)


def build_samoe_model(layout: VocabLayout, cfg: SAMoEConfig,
                      speech: ExpertParams, action: ExpertParams,
                      adapters: dict[str, LoraAdapter] | None = None) -> SAMoEModel:
    if speech.cfg.n_layers != action.cfg.n_layers or \
            speech.cfg.d_model != action.cfg.d_model or \
            speech.cfg.n_heads != action.cfg.n_heads or \
            speech.cfg.n_kv_heads != action.cfg.n_kv_heads:
        raise CheckpointError("experts must share identical layer/width/head "
                              "configurations to fuse through attention")
    return SAMoEModel(cfg, {ExpertId.SPEECH_EXPERT: speech,
                            ExpertId.ACTION_EXPERT: action},
                      adapters=adapters or {})


def build_dense_model(layout: VocabLayout, cfg: SAMoEConfig,
                      params: ExpertParams) -> SAMoEModel:
    return SAMoEModel(cfg, {DENSE: params}, router=lambda tag: DENSE)


def dense_init(kind: str, source_arrays: dict | None, layout: VocabLayout,
               cfg: SAMoEConfig, rng: np.random.Generator) -> ExpertParams:
    """Dense weights seeded from one expert, the other modality's rows fresh.

    FROM_SPEECH copies the speech expert and fresh-initializes the
    image/action embedding rows and non-text unembedding columns;
    FROM_ACTION mirrors that. SCRATCH is a plain fresh init.
    """
    dense = fresh_expert(DENSE, cfg, rng, (0, layout.size))
    if kind == "SCRATCH":
        return dense
    if kind == "FROM_SPEECH":
        src_name, out_range = "speech_expert", layout.text
        keep_rows = list(range(0, layout.prompt[1])) + \
            list(range(layout.speech[0], layout.speech[1])) + \
            list(range(layout.text[0], layout.text[1]))
    elif kind == "FROM_ACTION":
        src_name, out_range = "action_expert", layout.action
        keep_rows = list(range(0, layout.prompt[0])) + \
            list(range(layout.image[0], layout.image[1])) + \
            list(range(layout.action[0], layout.action[1]))
    else:
        raise CheckpointError(f"unknown dense init {kind!r}")
    if source_arrays is None:
        raise CheckpointError(f"dense init {kind} requires a source checkpoint")
    src = expert_from_tensors(src_name, cfg, source_arrays, out_range)
    for key, tensor in src.tensors.items():
        if key == "embed":
            dense.tensors["embed"].data[keep_rows] = tensor.data[keep_rows]
        elif key == "unembed":
            lo, hi = out_range
            dense.tensors["unembed"].data[:, lo:hi] = tensor.data
        else:
            dense.tensors[key].data[...] = tensor.data
    return dense


def adapters_from_checkpoint(arrays: dict, alpha: float) -> dict[str, LoraAdapter]:
    adapters: dict[str, LoraAdapter] = {}
    downs = {k[len("lora."):-2]: v for k, v in arrays.items()
             if k.startswith("lora.") and k.endswith(".A")}
    for target, down in sorted(downs.items()):
        up = arrays.get(f"lora.{target}.B")
        if up is None:
            raise CheckpointError(f"adapter {target!r} is missing its B matrix")
        ad = LoraAdapter.__new__(LoraAdapter)
        ad.target = target
        ad.rank = down.shape[1]
        ad.alpha = float(alpha)
        ad.down = Tensor(np.array(down, copy=True), requires_grad=True)
        ad.up = Tensor(np.array(up, copy=True), requires_grad=True)
        adapters[target] = ad
    return adapters


def save_model(path: str, model: SAMoEModel, config_text: str, step: int = 0,
               rng: np.random.Generator | None = None,
               moments: dict | None = None) -> None:
    save_checkpoint(path, model.named_parameters(), config_text, step=step,
                    rng=rng, moments=moments)


def load_model(path: str, layout: VocabLayout | None = None
               ) -> tuple[SAMoEModel, Checkpoint]:
    """Rebuild a model from a checkpoint, detecting dense vs two-expert."""
    from .config import parse_config_text

    layout = layout or default_layout()
    ckpt = load_checkpoint(path)
    precision = "f64"
    alpha = 8.0
    if ckpt.config_text:
        try:
            tc = parse_config_text(ckpt.config_text)
            precision = tc.precision
            alpha = tc.lora_alpha
        except Exception:
            pass
    cfg = layout.model_config(precision=precision)
    names = ckpt.tensors.keys()
    if any(n.startswith(DENSE + ".") for n in names):
        params = expert_from_tensors(DENSE, cfg, ckpt.tensors, (0, layout.size))
        return build_dense_model(layout, cfg, params), ckpt
    has_speech = any(n.startswith("speech_expert.") for n in names)
    has_action = any(n.startswith("action_expert.") for n in names)
    if has_speech and has_action:
        speech = expert_from_tensors("speech_expert", cfg, ckpt.tensors,
                                     layout.text)
        action = expert_from_tensors("action_expert", cfg, ckpt.tensors,
                                     layout.action)
        adapters = adapters_from_checkpoint(ckpt.tensors, alpha)
        return build_samoe_model(layout, cfg, speech, action, adapters), ckpt
    if has_speech:
        speech = expert_from_tensors("speech_expert", cfg, ckpt.tensors,
                                     layout.text)
        model = SAMoEModel(cfg, {ExpertId.SPEECH_EXPERT: speech},
                           router=lambda tag: ExpertId.SPEECH_EXPERT)
        return model, ckpt
    if has_action:
        action = expert_from_tensors("action_expert", cfg, ckpt.tensors,
                                     layout.action)
        model = SAMoEModel(cfg, {ExpertId.ACTION_EXPERT: action},
                           router=lambda tag: ExpertId.ACTION_EXPERT)
        return model, ckpt
    raise CheckpointError("checkpoint carries no recognizable model parameters")
