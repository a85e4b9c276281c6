import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import duplexmoe.numkernel as nk
from duplexmoe.checks import (
    check_gqa,
    check_lora,
    check_streaming,
    check_tied_dense,
    random_tagged_sequence,
    small_config,
    tied_model,
    two_expert_model,
)
from duplexmoe.numkernel import Tensor
from duplexmoe.samoe import (
    ExpertId,
    ModalityTag,
    SAMoEModel,
    SequencingError,
    UnifiedKVCache,
    route,
)
from duplexmoe.samoe.config import GQAError, SAMoEConfig
from duplexmoe.samoe.model import (
    dense_oracle_forward,
    forward_sequence,
    forward_token,
    sample_segment,
)
from duplexmoe.samoe.params import (
    init_expert_params,
    make_adapters,
    start_touch_log,
    stop_touch_log,
)


class TestRouting:
    def test_speech_side(self):
        assert route(ModalityTag.SPEECH_IN) == ExpertId.SPEECH_EXPERT
        assert route(ModalityTag.TEXT_OUT) == ExpertId.SPEECH_EXPERT
        assert route(ModalityTag.PROMPT) == ExpertId.SPEECH_EXPERT

    def test_action_side(self):
        assert route(ModalityTag.IMAGE_IN) == ExpertId.ACTION_EXPERT
        assert route(ModalityTag.ACTION_OUT) == ExpertId.ACTION_EXPERT

    def test_boundary_routes_with_owner(self):
        assert route(ModalityTag.boundary(ModalityTag.TEXT_OUT)) \
            == ExpertId.SPEECH_EXPERT
        assert route(ModalityTag.boundary(ModalityTag.IMAGE_IN)) \
            == ExpertId.ACTION_EXPERT

    @given(st.sampled_from(list(ModalityTag)))
    def test_totality(self, tag):
        assert route(tag) in (ExpertId.SPEECH_EXPERT, ExpertId.ACTION_EXPERT)


class TestConfig:
    def test_head_grouping_validated(self):
        with pytest.raises(GQAError):
            SAMoEConfig(n_heads=4, n_kv_heads=3)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(GQAError):
            SAMoEConfig(d_head=7)


class TestTiedEquivalence:
    def test_sweep(self):
        name, ok, detail = check_tied_dense(5)
        assert ok, detail

    def test_every_position_not_just_last(self):
        rng = np.random.default_rng(0)
        cfg = small_config(n_layers=2, d_model=32)
        model, params = tied_model(cfg, rng)
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 25)
        mine = forward_sequence(model, tokens, tags)
        oracle = dense_oracle_forward(params, tokens)
        for i in range(25):
            assert np.max(np.abs(mine[i][1] - oracle[i])) <= 1e-9


class TestDenseOracleHandCheck:
    def test_single_token_two_dim_model(self):
        # d_model=2, one layer, one head, vocab 3, a single token at
        # position 0: rotary is the identity and the token attends only to
        # itself, so every quantity below is plain hand arithmetic.
        cfg = small_config(n_layers=1, d_model=2, n_heads=1, n_kv_heads=1,
                           vocab=3)
        params = init_expert_params("p", cfg, np.random.default_rng(1),
                                    (0, 3), 10000.0)
        ts = params.tensors
        ts["embed"].data = np.array([[0.3, -0.7], [1.0, 0.5], [-0.2, 0.9]])
        ts["layer0.attn_norm"].data = np.array([1.0, 2.0])
        ts["layer0.wq"].data = np.array([[0.5, 0.0], [0.0, 0.5]])
        ts["layer0.wk"].data = np.array([[0.1, 0.2], [0.3, 0.4]])
        ts["layer0.wv"].data = np.array([[1.0, -1.0], [0.5, 0.5]])
        ts["layer0.wo"].data = np.array([[0.2, 0.1], [-0.1, 0.3]])
        ts["layer0.ffn_norm"].data = np.array([1.5, 0.5])
        ts["layer0.w_gate"].data = np.array([[0.4, -0.2, 0.1, 0.0],
                                             [0.0, 0.3, -0.1, 0.2]])
        ts["layer0.w_up"].data = np.array([[1.0, 0.0, 0.5, -0.5],
                                           [0.0, 1.0, -0.5, 0.5]])
        ts["layer0.w_down"].data = np.array([[0.3, 0.0], [0.0, 0.3],
                                             [0.1, 0.1], [-0.1, 0.2]])
        ts["final_norm"].data = np.array([2.0, 1.0])
        ts["unembed"].data = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 1.0]])

        x = np.array([0.3, -0.7])
        n1 = x / np.sqrt(np.mean(x ** 2) + 1e-6) * np.array([1.0, 2.0])
        v = n1 @ ts["layer0.wv"].data  # self-attention weight is exactly 1
        x = x + v @ ts["layer0.wo"].data
        n2 = x / np.sqrt(np.mean(x ** 2) + 1e-6) * np.array([1.5, 0.5])
        gate = n2 @ ts["layer0.w_gate"].data
        act = gate / (1.0 + np.exp(-gate))
        x = x + (act * (n2 @ ts["layer0.w_up"].data)) @ ts["layer0.w_down"].data
        final = x / np.sqrt(np.mean(x ** 2) + 1e-6) * np.array([2.0, 1.0])
        expected = final @ ts["unembed"].data

        got = dense_oracle_forward(params, [0])
        np.testing.assert_allclose(got[0], expected, atol=1e-12)

    def test_attention_rows_normalized_on_live_path(self):
        rng = np.random.default_rng(2)
        cfg = small_config(n_layers=1, d_model=16)
        model, _ = tied_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=8)
        probs_sum = []
        for i, (tok, tag) in enumerate([(1, ModalityTag.SPEECH_IN),
                                        (2, ModalityTag.IMAGE_IN),
                                        (3, ModalityTag.TEXT_OUT)]):
            probe = {}
            forward_token(model, cache, tok, tag, i, probe=probe)
            for rows in probe["attn"]:
                probs_sum.extend(rows.sum(axis=-1).tolist())
        np.testing.assert_allclose(probs_sum, 1.0, atol=1e-12)


class TestStreaming:
    def test_equivalence_sweep(self):
        name, ok, detail = check_streaming(30)
        assert ok, detail

    def test_empty_sequence(self):
        rng = np.random.default_rng(3)
        cfg = small_config()
        model = two_expert_model(cfg, rng)
        assert forward_sequence(model, [], []) == []

    def test_permuting_tokens_changes_logits(self):
        rng = np.random.default_rng(4)
        cfg = small_config(n_layers=2, d_model=32)
        model = two_expert_model(cfg, rng)
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 12)
        tags[2] = tags[5]  # same tag so only content changes
        tokens[2], tokens[5] = 1, 7
        before = forward_sequence(model, tokens, tags)[-1][1]
        tokens[2], tokens[5] = 7, 1
        after = forward_sequence(model, tokens, tags)[-1][1]
        assert np.max(np.abs(before - after)) > 1e-8

    def test_cache_grows_one_row_per_layer_per_call(self):
        rng = np.random.default_rng(5)
        cfg = small_config(n_layers=3)
        model = two_expert_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=8)
        for i in range(4):
            forward_token(model, cache, i, ModalityTag.SPEECH_IN, i)
            assert cache.length == i + 1
            assert cache.next_position == i + 1

    def test_position_gap_raises(self):
        rng = np.random.default_rng(6)
        cfg = small_config()
        model = two_expert_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=8)
        forward_token(model, cache, 0, ModalityTag.SPEECH_IN, 0)
        with pytest.raises(SequencingError, match="position 2"):
            forward_token(model, cache, 1, ModalityTag.SPEECH_IN, 2)
        with pytest.raises(SequencingError, match="position 0"):
            forward_token(model, cache, 1, ModalityTag.SPEECH_IN, 0)

    def test_cross_expert_attention_is_nonzero(self):
        # a text token after an image segment must place weight on K/V rows
        # that the other expert produced
        rng = np.random.default_rng(7)
        cfg = small_config(n_layers=2, d_model=32)
        model = two_expert_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=16)
        stream = [(1, ModalityTag.SPEECH_IN), (2, ModalityTag.B_IMAGE_IN),
                  (3, ModalityTag.IMAGE_IN), (4, ModalityTag.IMAGE_IN),
                  (5, ModalityTag.B_IMAGE_IN)]
        for i, (tok, tag) in enumerate(stream):
            forward_token(model, cache, tok, tag, i)
        probe = {}
        forward_token(model, cache, 6, ModalityTag.TEXT_OUT, len(stream),
                      probe=probe)
        image_rows = [i for i, e in enumerate(cache.entries())
                      if e[1] == ExpertId.ACTION_EXPERT]
        assert image_rows, "image rows should be cached by the action expert"
        mass = sum(float(rows[:, image_rows].sum()) for rows in probe["attn"])
        assert mass > 1e-6

    def test_single_expert_weights_touched_per_token(self):
        rng = np.random.default_rng(8)
        cfg = small_config(n_layers=2)
        model = two_expert_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=8)
        for i, (tok, tag, owner) in enumerate([
                (1, ModalityTag.SPEECH_IN, "speech_expert"),
                (2, ModalityTag.IMAGE_IN, "action_expert"),
                (3, ModalityTag.TEXT_OUT, "speech_expert"),
                (4, ModalityTag.B_ACTION_OUT, "action_expert")]):
            start_touch_log()
            forward_token(model, cache, tok, tag, i)
            touched = stop_touch_log()
            assert touched, "instrumentation should record parameter reads"
            owners = {name.split(".")[0] for name in touched}
            assert owners == {owner}


class TestGQA:
    def test_grouped_equals_ungrouped(self):
        name, ok, detail = check_gqa()
        assert ok, detail

    def test_kv_equals_heads_path(self):
        rng = np.random.default_rng(9)
        cfg = small_config(n_heads=4, n_kv_heads=4)
        model = two_expert_model(cfg, rng)
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 10)
        full = forward_sequence(model, tokens, tags)
        cache = UnifiedKVCache(cfg, capacity=16)
        for i in range(10):
            logits = forward_token(model, cache, int(tokens[i]),
                                   ModalityTag(int(tags[i])), i)
            assert np.max(np.abs(logits - full[i][1])) <= 1e-12


class TestLora:
    def test_contracts(self):
        name, ok, detail = check_lora()
        assert ok, detail

    def test_rank_zero_rejected(self):
        from duplexmoe.samoe.params import LoraAdapter
        with pytest.raises(ValueError, match="rank"):
            LoraAdapter("t", 0, 1.0, 8, 8, np.random.default_rng(0),
                        np.float64)

    def test_gradients_flow_into_adapters(self):
        rng = np.random.default_rng(10)
        cfg = small_config(n_layers=1, d_model=16, vocab=20)
        model = two_expert_model(cfg, rng)
        adapters = make_adapters(model.experts, rank=2, alpha=2.0, rng=rng)
        model = model.replace(adapters=adapters)
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 10)
        mask = np.zeros(10, dtype=bool)
        mask[1:] = True
        from duplexmoe.samoe.model import sequence_loss
        params = {}
        for ad in adapters.values():
            params.update(ad.named())

        def loss_fn():
            loss, _ = sequence_loss(model, tokens[None], tags[None], mask[None])
            return loss

        err = nk.finite_diff_check(loss_fn, params, min_coords=60)
        assert err <= 1e-4


def _layout_model(seed=0, silence_boost=None, noop_boost=None):
    from duplexmoe.blockcodec.vocab import default_layout
    layout = default_layout()
    cfg = layout.model_config(n_layers=1, d_model=16)
    rng = np.random.default_rng(seed)
    model = two_expert_model(cfg, rng)
    if silence_boost is not None:
        sp = model.experts[ExpertId.SPEECH_EXPERT]
        sp.tensors["unembed"].data[:, layout.silence - sp.out_lo] = silence_boost
    if noop_boost is not None:
        ac = model.experts[ExpertId.ACTION_EXPERT]
        ac.tensors["unembed"].data[:, layout.noop - ac.out_lo] = noop_boost
    return layout, cfg, model


class TestSampling:
    def test_forced_silence_closes_segment(self):
        layout, cfg, model = _layout_model(silence_boost=100.0)
        cache = UnifiedKVCache(cfg, capacity=32)
        forward_token(model, cache, layout.id("<bos>"),
                      ModalityTag.B_SPEECH_IN, 0)
        toks = sample_segment(model, cache, ModalityTag.TEXT_OUT)
        assert toks == [layout.silence]

    def test_greedy_is_deterministic(self):
        layout, cfg, model = _layout_model(seed=3)

        def run():
            cache = UnifiedKVCache(cfg, capacity=64)
            forward_token(model, cache, layout.id("<bos>"),
                          ModalityTag.B_SPEECH_IN, 0)
            text = sample_segment(model, cache, ModalityTag.TEXT_OUT,
                                  temperature=0.0)
            act = sample_segment(model, cache, ModalityTag.ACTION_OUT,
                                 temperature=0.0)
            return text, act

        assert run() == run()

    def test_seeded_sampling_reproducible(self):
        layout, cfg, model = _layout_model(seed=4)

        def run():
            cache = UnifiedKVCache(cfg, capacity=64)
            forward_token(model, cache, layout.id("<bos>"),
                          ModalityTag.B_SPEECH_IN, 0)
            return sample_segment(model, cache, ModalityTag.TEXT_OUT,
                                  temperature=1.0, seed=77)

        first, second = run(), run()
        assert first == second

    def test_payloads_stay_in_slice(self):
        layout, cfg, model = _layout_model(seed=5)
        cache = UnifiedKVCache(cfg, capacity=64)
        forward_token(model, cache, layout.id("<bos>"),
                      ModalityTag.B_SPEECH_IN, 0)
        text = sample_segment(model, cache, ModalityTag.TEXT_OUT,
                              temperature=1.3, seed=9)
        act = sample_segment(model, cache, ModalityTag.ACTION_OUT,
                             temperature=1.3, seed=9)
        assert all(layout.text[0] <= t < layout.text[1] for t in text)
        assert all(layout.action[0] <= a < layout.action[1] for a in act)
        assert len(act) == cfg.slots_action
        assert len(text) in (1, cfg.slots_text)
        if len(text) > 1:
            assert layout.silence not in text[1:]

    def test_segment_feeds_boundaries_structurally(self):
        layout, cfg, model = _layout_model(seed=6, silence_boost=100.0)
        cache = UnifiedKVCache(cfg, capacity=64)
        forward_token(model, cache, layout.id("<bos>"),
                      ModalityTag.B_SPEECH_IN, 0)
        sample_segment(model, cache, ModalityTag.TEXT_OUT)
        tags = [e[2] for e in cache.entries()]
        assert tags == [ModalityTag.B_SPEECH_IN, ModalityTag.B_TEXT_OUT,
                        ModalityTag.TEXT_OUT, ModalityTag.B_TEXT_OUT]

    def test_rejects_input_tags(self):
        layout, cfg, model = _layout_model(seed=7)
        cache = UnifiedKVCache(cfg, capacity=8)
        with pytest.raises(ValueError, match="TEXT_OUT/ACTION_OUT"):
            sample_segment(model, cache, ModalityTag.SPEECH_IN)


class TestRopePerExpert:
    def test_differing_thetas_change_outputs(self):
        rng = np.random.default_rng(11)
        cfg = small_config(n_layers=2, d_model=32)
        same = two_expert_model(cfg, np.random.default_rng(11))
        diff = two_expert_model(cfg, np.random.default_rng(11),
                                theta=(10000.0, 500.0))
        tokens, tags = random_tagged_sequence(rng, cfg.vocab_size, 16)
        a = forward_sequence(same, tokens, tags)[-1][1]
        b = forward_sequence(diff, tokens, tags)[-1][1]
        assert np.max(np.abs(a - b)) > 1e-9

    def test_shared_absolute_positions_across_experts(self):
        # the cache stores one strictly increasing position per row even as
        # routing alternates between experts
        rng = np.random.default_rng(12)
        cfg = small_config()
        model = two_expert_model(cfg, rng)
        cache = UnifiedKVCache(cfg, capacity=16)
        tags = [ModalityTag.SPEECH_IN, ModalityTag.IMAGE_IN,
                ModalityTag.TEXT_OUT, ModalityTag.ACTION_OUT] * 2
        for i, tag in enumerate(tags):
            forward_token(model, cache, i % cfg.vocab_size, tag, i)
        positions = [e[0] for e in cache.entries()]
        assert positions == list(range(8))
        experts = {e[1] for e in cache.entries()}
        assert experts == {ExpertId.SPEECH_EXPERT, ExpertId.ACTION_EXPERT}
