import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duplexmoe.blockcodec.codec import Mode
from duplexmoe.blockcodec.vocab import default_layout
from duplexmoe.duplex_sim import (
    Act,
    EpisodeScript,
    TaskKind,
    UnreachableGoal,
    WorldState,
    emit_speech,
    expected_answer,
    gen_dataset,
    observe_image,
    oracle_policy,
    qa_answer_index,
    reset,
    step,
    write_dataset,
)
from duplexmoe.duplex_sim.dataset import (
    Example,
    build_rollout,
    example_from_rollout,
    read_dataset,
)
from duplexmoe.duplex_sim.world import Obj, bfs_distances, goal_satisfied
from duplexmoe.samoe.routing import ModalityTag

layout = default_layout()


def small_world(gripper=0, obj_cell=12, goal=24, walls=(), held=None):
    objects = {0: Obj(None if held == 0 else obj_cell, 0)}
    return WorldState(5, 5, objects, gripper=gripper, held=held,
                      walls=frozenset(walls), goal=goal)


class TestWorldStep:
    def test_noop_leaves_state_unchanged(self):
        state = small_world()
        after, note = step(state, Act.NOOP)
        assert after == state and note is None

    def test_grip_on_empty_cell_flagged(self):
        state = small_world(gripper=0, obj_cell=12)
        after, note = step(state, Act.GRIP)
        assert after == state
        assert note == "grip-empty"

    def test_wall_blocks_movement(self):
        state = small_world(gripper=0, walls=(1,))
        after, note = step(state, Act.RIGHT)
        assert after.gripper == 0 and note == "blocked"

    def test_edge_blocks_movement(self):
        state = small_world(gripper=0)
        after, note = step(state, Act.UP)
        assert after.gripper == 0 and note == "blocked"
        after, note = step(state, Act.LEFT)
        assert after.gripper == 0 and note == "blocked"

    def test_grip_release_cycle(self):
        state = small_world(gripper=12, obj_cell=12)
        state, note = step(state, Act.GRIP)
        assert note is None and state.held == 0
        assert state.objects[0].cell is None
        state, _ = step(state, Act.RIGHT)
        state, note = step(state, Act.RELEASE)
        assert note is None and state.held is None
        assert state.objects[0].cell == 13

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_random_rollout_invariants(self, seed):
        rng = np.random.default_rng(seed)
        state = WorldState(5, 5,
                           {0: Obj(3, 0), 1: Obj(17, 1), 2: Obj(21, 2)},
                           gripper=int(rng.integers(0, 25)), held=None,
                           walls=frozenset(), goal=8)
        for _ in range(50):
            state, _ = step(state, Act(int(rng.integers(0, 7))))
            cells = [o.cell for o in state.objects.values() if o.cell is not None]
            assert len(cells) == len(set(cells))
            assert 0 <= state.gripper < 25
            held = [oid for oid, o in state.objects.items() if o.cell is None]
            assert held == ([state.held] if state.held is not None else [])


class TestObserveImage:
    def test_deterministic(self):
        state = small_world()
        assert observe_image(state, layout) == observe_image(state, layout)

    def test_gripper_motion_changes_tokens_exhaustively(self):
        base = small_world(gripper=0)
        seen = set()
        for cell in range(25):
            state = small_world(gripper=cell)
            seen.add(tuple(observe_image(state, layout)))
        assert len(seen) == 25

    def test_tokens_in_image_slice(self):
        for cell in range(25):
            toks = observe_image(small_world(gripper=cell), layout)
            assert all(layout.image[0] <= t < layout.image[1] for t in toks)
            assert len(toks) == 4

    def test_held_and_goal_fields(self):
        state = small_world(gripper=12, obj_cell=12)
        state, _ = step(state, Act.GRIP)
        toks = observe_image(state, layout)
        assert toks[1] == layout.img_held_tok(True)
        assert toks[2] == layout.img_obj_tok(None)
        assert toks[3] == layout.img_goal_tok(24)

    def test_nearest_object_selected(self):
        objects = {0: Obj(1, 0), 1: Obj(24, 1)}
        state = WorldState(5, 5, objects, gripper=0, held=None,
                           walls=frozenset(), goal=None)
        toks = observe_image(state, layout)
        assert toks[2] == layout.img_obj_tok(1, 0)
        assert toks[3] == layout.img_goal_tok(None)


class TestOraclePolicy:
    def test_grip_then_move_then_release(self):
        state = small_world(gripper=12, obj_cell=12, goal=13)
        acts = []
        for _ in range(4):
            a = oracle_policy(state, (0, 13))
            acts.append(a)
            state, _ = step(state, a)
        assert acts[:3] == [Act.GRIP, Act.RIGHT, Act.RELEASE]
        assert goal_satisfied(state, (0, 13))

    def test_satisfied_goal_noops_forever(self):
        state = small_world(gripper=3, obj_cell=24, goal=24)
        for _ in range(3):
            assert oracle_policy(state, (0, 24)) == Act.NOOP

    def test_tie_break_priority(self):
        # gripper at 12 moving toward the object at 2: only UP shortens the
        # path, and it also precedes the other moves in the fixed tie order
        state = small_world(gripper=12, obj_cell=2, goal=0)
        assert oracle_policy(state, (0, 0)) == Act.UP
        # from 6 toward 18 both DOWN and RIGHT shorten equally; the
        # UP<DOWN<LEFT<RIGHT order picks DOWN
        state = small_world(gripper=6, obj_cell=18, goal=0)
        assert oracle_policy(state, (0, 0)) == Act.DOWN

    def test_unreachable_goal_reported(self):
        # cell 24 (bottom-right corner) sealed behind walls at 23 and 19
        state = WorldState(5, 5, {0: Obj(24, 0)}, gripper=0, held=None,
                           walls=frozenset({23, 19}), goal=12)
        assert bfs_distances(state, 24)[0] == float("inf")
        with pytest.raises(UnreachableGoal):
            oracle_policy(state, (0, 12))

    def test_every_manip_script_solved_within_bound(self):
        bound = 4 * (5 + 5)
        for seed in range(500):
            state, script = reset(TaskKind.MANIP, seed, layout)
            goal = (script.target_obj, script.goal_cell)
            steps_taken = 0
            while not goal_satisfied(state, goal) and steps_taken < bound:
                state, _ = step(state, oracle_policy(state, goal))
                steps_taken += 1
            assert goal_satisfied(state, goal), f"seed {seed} unsolved"


class TestScripts:
    @pytest.mark.parametrize("task", list(TaskKind))
    def test_reset_deterministic(self, task):
        a = reset(task, 123, layout)
        b = reset(task, 123, layout)
        assert a[1] == b[1]
        assert a[0] == b[0]

    def test_semantic_defect_names_absent_object(self):
        found = 0
        for seed in range(200):
            state, script = reset(TaskKind.DEFECTIVE, seed, layout)
            if script.defect_dim != "SEMANTIC":
                continue
            found += 1
            instr = script.instruction().tokens
            ref = next(t for t in instr
                       if layout.obj_words[0] <= t < layout.obj_words[1])
            absent_id = ref - layout.obj_words[0]
            assert absent_id not in state.objects
        assert found > 20

    def test_visual_defect_names_absent_color(self):
        for seed in range(200):
            state, script = reset(TaskKind.DEFECTIVE, seed, layout)
            if script.defect_dim != "VISUAL":
                continue
            instr = script.instruction().tokens
            ref = next(t for t in instr
                       if layout.col_words[0] <= t < layout.col_words[1])
            color = ref - layout.col_words[0]
            assert all(o.color != color for o in state.objects.values())

    def test_motion_defect_targets_out_of_bounds(self):
        for seed in range(200):
            state, script = reset(TaskKind.DEFECTIVE, seed, layout)
            if script.defect_dim != "MOTION":
                continue
            instr = script.instruction().tokens
            cells = [t for t in instr
                     if layout.cell_words[0] <= t < layout.cell_words[1]]
            assert cells and cells[0] in layout.out_of_bounds_cells()
            assert state.goal is None

    def test_barge_in_uses_interrupt_command_pool(self):
        seen = set()
        for seed in range(120):
            _, script = reset(TaskKind.BARGE_IN, seed, layout)
            u = script.find("interrupt")
            assert u is not None and len(u.tokens) == 1
            tok = u.tokens[0]
            assert layout.interrupts[0] <= tok < layout.interrupts[1]
            seen.add(tok)
            ie = script.instruction().end_tick()
            assert ie + 2 <= u.start_tick < script.max_ticks
        assert len(seen) == 10

    def test_query_window_after_instruction(self):
        for task in (TaskKind.SPEAK_WHILE_ACT, TaskKind.CONTEXT_VQA):
            for seed in range(100):
                _, script = reset(task, seed, layout)
                q = script.find("query")
                ie = script.instruction().end_tick()
                assert ie + 2 <= q.start_tick < script.max_ticks

    def test_utterance_ends_always_detectable(self):
        # the final streaming tick always carries at least one pad token
        for task in TaskKind:
            for seed in range(60):
                _, script = reset(task, seed, layout)
                for u in script.utterances:
                    assert len(u.tokens) % 5 != 0


class TestEmitSpeech:
    def test_streaming_arithmetic(self):
        script = EpisodeScript(
            task=TaskKind.ECHO, mode=Mode.SPEECH_ONLY, seed=0, prompt=(),
            utterances=(type(list(reset(TaskKind.ECHO, 0, layout)[1].utterances)[0])(
                start_tick=0,
                tokens=tuple(layout.echoable()[:7]),
                kind="instruction"),),
            expected=(), target_obj=None, goal_cell=None, defect_dim=None,
            max_ticks=4)
        first = emit_speech(script, 0, layout)
        second = emit_speech(script, 1, layout)
        silent = emit_speech(script, 2, layout)
        assert len(first) == len(second) == len(silent) == 5
        assert first == list(script.utterances[0].tokens[:5])
        assert second[:2] == list(script.utterances[0].tokens[5:])
        assert second[2:] == [layout.spad] * 3
        assert silent == [layout.spad] * 5

    def test_depadded_concatenation_recovers_script(self):
        for seed in range(30):
            _, script = reset(TaskKind.ECHO, seed, layout)
            got = []
            for tick in range(script.max_ticks):
                got += [t for t in emit_speech(script, tick, layout)
                        if t != layout.spad]
            assert tuple(got) == script.instruction().tokens


class TestExpectedAnswer:
    def test_qa_lookup(self):
        _, script = reset(TaskKind.QA, 5, layout)
        q = script.instruction().tokens[1] - layout.q_words[0]
        assert script.expected[0] == (layout.answer_tok(qa_answer_index(q)),)

    def test_context_vqa_tracks_state(self):
        state, script = reset(TaskKind.CONTEXT_VQA, 3, layout)
        goal = (script.target_obj, script.goal_cell)
        assert expected_answer(script, state, 0, layout) \
            == (layout.state_tok("ON-TABLE"),)
        while state.held != script.target_obj:
            state, _ = step(state, oracle_policy(state, goal))
        assert expected_answer(script, state, 1, layout) \
            == (layout.state_tok("IN-GRIPPER"),)
        while not goal_satisfied(state, goal):
            state, _ = step(state, oracle_policy(state, goal))
        assert expected_answer(script, state, 2, layout) \
            == (layout.state_tok("AT-GOAL"),)

    def test_defective_expectation(self):
        _, script = reset(TaskKind.DEFECTIVE, 9, layout)
        assert script.expected[0] == (layout.reject_tok(script.defect_dim),)


class TestRolloutConsistency:
    def test_context_vqa_answer_consistent_with_snapshot(self):
        for seed in range(60):
            roll = build_rollout(TaskKind.CONTEXT_VQA, seed, layout)
            query = roll.script.find("query")
            qt = query.end_tick()
            ans = [t for t in roll.text[qt]
                   if t not in (layout.tpad, layout.silence)]
            expect = expected_answer(roll.script, roll.states[qt], qt, layout)
            assert tuple(ans) == expect

    def test_barge_in_quiescent_after_cancel(self):
        for seed in range(40):
            roll = build_rollout(TaskKind.BARGE_IN, seed, layout)
            it = roll.script.find("interrupt").end_tick()
            assert layout.cancelled in roll.text[it]
            for tick in range(it, len(roll.action)):
                assert all(a == layout.noop for a in roll.action[tick])

    def test_echo_text_matches_depadded_speech(self):
        for seed in range(40):
            roll = build_rollout(TaskKind.ECHO, seed, layout)
            words = roll.script.instruction().tokens
            ie = roll.script.instruction().end_tick()
            answer = [t for t in roll.text[ie] if t != layout.tpad]
            assert answer == [layout.echo(w) for w in words]


class TestGenDataset:
    def test_mask_covers_exactly_output_payloads(self):
        examples, _ = gen_dataset({"qa": 1, "manip": 1}, 12, 5, layout)
        for ex in examples:
            payload = np.isin(ex.tags, [int(ModalityTag.TEXT_OUT),
                                        int(ModalityTag.ACTION_OUT)])
            assert (ex.mask == payload).all()

    def test_zero_weight_mix_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            gen_dataset({"qa": 0.0}, 4, 1, layout)

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            gen_dataset({"nonsense": 1.0}, 4, 1, layout)

    def test_byte_identical_regeneration(self, tmp_path):
        mix = {"echo": 1, "qa": 1, "manip": 1}
        a = write_dataset(*gen_dataset(mix, 20, 9, layout), tmp_path / "a")
        b = write_dataset(*gen_dataset(mix, 20, 9, layout), tmp_path / "b")
        assert open(a["dataset"], "rb").read() == open(b["dataset"], "rb").read()
        assert open(a["manifest"], "rb").read() == open(b["manifest"], "rb").read()

    def test_manifest_counts_sum_to_n(self):
        examples, manifest = gen_dataset({"echo": 1, "barge_in": 2}, 25, 2,
                                         layout)
        assert sum(manifest["counts"].values()) == 25
        assert len(examples) == 25

    def test_episode_seeds_avoid_eval_space(self):
        examples, _ = gen_dataset({"qa": 1}, 8, 0, layout)
        assert all(ex.seed >= 100_000 for ex in examples)

    def test_dataset_file_round_trip(self, tmp_path):
        examples, manifest = gen_dataset({"manip": 1}, 6, 4, layout)
        paths = write_dataset(examples, manifest, tmp_path)
        back = read_dataset(paths["dataset"])
        for ex, bk in zip(examples, back):
            assert (ex.tokens == bk.tokens).all()
            assert (ex.mask == bk.mask).all()
            assert ex.task == bk.task

    def test_pretrain_variant_masks_text_out(self):
        examples, _ = gen_dataset({"manip_text": 1}, 6, 3, layout)
        for ex in examples:
            assert ex.task == "manip_text"
            action_only = ex.tags == int(ModalityTag.ACTION_OUT)
            assert (ex.mask == action_only).all()
            # instruction mirrors ride in the first block's text slots
            text_pos = np.flatnonzero(ex.tags == int(ModalityTag.TEXT_OUT))
            first_text = ex.tokens[text_pos[:8]]
            assert any(t != layout.silence for t in first_text)


class TestTraceSerialization:
    def test_round_trip(self, tmp_path):
        from duplexmoe.evalharness import oracle_model_outputs

        trace = oracle_model_outputs(TaskKind.SPEAK_WHILE_ACT, 4, layout)
        path = tmp_path / "trace.jsonl"
        trace.save(path)
        back = type(trace).load(path)
        assert back.header == trace.header
        assert len(back.records) == len(trace.records)
        for a, b in zip(back.records, trace.records):
            assert a.to_dict() == b.to_dict()

    def test_jsonl_lines_are_self_describing(self, tmp_path):
        from duplexmoe.evalharness import oracle_model_outputs

        trace = oracle_model_outputs(TaskKind.QA, 1, layout)
        lines = trace.to_jsonl().splitlines()
        assert "header" in json.loads(lines[0])
        rec = json.loads(lines[1])
        assert {"tick", "state", "speech", "image", "text", "action",
                "events"} <= set(rec)
