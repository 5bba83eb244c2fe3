import json
import math

import numpy as np
import pytest

from synflow.chemgraph import parse_smiles, write_canonical_smiles
from synflow.envs import bundled_env
from synflow.mdp import (Action, ActionKind, DeadEndError, EMPTY_STATE, EnvConfig,
                         MaskViolationError, MdpError, State, StateKind,
                         addreactant_mask, backward_mask, backward_parent_probs,
                         export_routes, forward_mask, reverse_action,
                         reverse_extra_logprob, rollout_backward, rollout_forward,
                         route_record, step_backward, step_forward)
from synflow.policy import PolicyNet, UniformBackwardPolicy
from synflow.templates import parse_template


@pytest.fixture(scope="module")
def tiny():
    return bundled_env("tiny", nbits=256)


@pytest.fixture(scope="module")
def trap():
    return bundled_env("trap", nbits=256)


def mol_state(env, smiles, steps=0):
    return State(StateKind.MOL, env.intern(parse_smiles(smiles)), steps)


class TestForwardMask:
    def test_empty_state(self, tiny):
        mask = forward_mask(EMPTY_STATE, tiny)
        assert not mask.stop
        assert mask.add_first.all()
        assert not mask.react_uni.any() and not mask.react_bi.any()

    def test_acid_state(self, tiny):
        mask = forward_mask(mol_state(tiny, "CC(=O)O"), tiny)
        assert mask.stop  # bare building block may terminate here
        assert mask.react_bi.all()  # amide and ester both fire

    def test_only_stop_at_max_len(self, tiny):
        mask = forward_mask(mol_state(tiny, "CC(=O)O", steps=tiny.max_len), tiny)
        assert mask.stop and not mask.react_bi.any()

    def test_terminal_has_no_mask(self, tiny):
        with pytest.raises(MdpError):
            forward_mask(State(StateKind.TERMINAL, tiny.building_blocks[0], 0), tiny)

    def test_unreactive_state_only_stop(self, tiny):
        # a finished amide has no acid/alcohol/amine handle left
        mask = forward_mask(mol_state(tiny, "CNC(C)=O", steps=1), tiny)
        assert mask.stop
        assert not mask.react_uni.any() and not mask.react_bi.any()

    def test_dead_end_raises(self):
        env = EnvConfig([("inert", parse_smiles("C"))], [], max_len=1,
                        allow_bb_terminals=False, nbits=128)
        with pytest.raises(DeadEndError):
            forward_mask(mol_state(env, "C"), env)

    def test_matcher_oracle_example(self, tiny):
        # acid + amide template: exactly the amine-bearing blocks unlock
        amide_index = [t.id for t in tiny.bi_templates].index("amide_coupling")
        mask = addreactant_mask(mol_state(tiny, "CC(=O)O"), amide_index, tiny)
        labels = [tiny.bb_ids[i] for i in np.flatnonzero(mask)]
        assert labels == ["methylamine", "ethylamine"]


class TestStepForward:
    def test_add_first(self, tiny):
        state = step_forward(EMPTY_STATE, Action(ActionKind.ADD_FIRST_REACTANT,
                                                 bb_index=0), tiny)
        assert state.kind is StateKind.MOL and state.steps_taken == 0
        assert write_canonical_smiles(state.mol) == "CC(=O)O"

    def test_react_bi_composite(self, tiny):
        amide = [t.id for t in tiny.bi_templates].index("amide_coupling")
        cn = tiny.bb_lookup[write_canonical_smiles(parse_smiles("CN"))]
        state = step_forward(mol_state(tiny, "CC(=O)O"),
                             Action(ActionKind.REACT_BI, template_index=amide,
                                    bb_index=cn), tiny)
        assert write_canonical_smiles(state.mol) == write_canonical_smiles(
            parse_smiles("CNC(C)=O"))
        assert state.steps_taken == 1

    def test_stop(self, tiny):
        state = step_forward(mol_state(tiny, "CC(=O)O"), Action(ActionKind.STOP), tiny)
        assert state.is_terminal

    def test_masked_action_rejected(self, tiny):
        with pytest.raises(MaskViolationError):
            step_forward(mol_state(tiny, "CNC(C)=O", steps=1),
                         Action(ActionKind.REACT_BI, template_index=0, bb_index=0),
                         tiny)


class TestBackward:
    def test_bb_state_remove_first(self, tiny):
        mask = backward_mask(mol_state(tiny, "CN"), tiny)
        assert mask.remove_first

    def test_amide_product_decomposes(self, tiny):
        amide = [t.id for t in tiny.bi_templates].index("amide_coupling")
        mask = backward_mask(mol_state(tiny, "CNC(C)=O", steps=1), tiny)
        assert mask.bck_react_bi[amide]

    def test_unrelated_state_all_false(self, trap):
        # acetaldehyde is the canonical trap parent: nothing applies
        mask = backward_mask(mol_state(trap, "CC=O"), trap)
        assert not mask.any()

    def test_tie_probabilities(self, tiny):
        amide = [t.id for t in tiny.bi_templates].index("amide_coupling")
        state = mol_state(tiny, "CNC(C)=O", steps=1)
        probs = backward_parent_probs(
            state, Action(ActionKind.BCK_REACT_BI, template_index=amide), tiny)
        assert set(probs) == {"CC(=O)O", "CN"}
        assert all(abs(p - 0.5) < 1e-12 for _, p in probs.values())

    def test_step_backward_tie_logprob(self, tiny):
        amide = [t.id for t in tiny.bi_templates].index("amide_coupling")
        state = mol_state(tiny, "CNC(C)=O", steps=1)
        rng = np.random.default_rng(0)
        prev, extra = step_backward(
            state, Action(ActionKind.BCK_REACT_BI, template_index=amide), tiny, rng)
        assert prev.kind is StateKind.MOL
        assert math.isclose(extra, math.log(0.5))

    def test_step_backward_deterministic_when_single_parent(self, tiny):
        # depth-2 ester: the non-block fragment continues the trajectory
        ester = [t.id for t in tiny.bi_templates].index("ester_alcohol")
        state = mol_state(tiny, "CC(=O)OCC(NC)=O", steps=2)
        probs = backward_parent_probs(
            state, Action(ActionKind.BCK_REACT_BI, template_index=ester), tiny)
        assert list(probs.values())[0][1] == 1.0
        prev, extra = step_backward(
            state, Action(ActionKind.BCK_REACT_BI, template_index=ester), tiny,
            np.random.default_rng(0))
        assert extra == 0.0
        assert not tiny.is_building_block(prev.mol)

    def test_remove_first_resets(self, tiny):
        prev, extra = step_backward(
            mol_state(tiny, "CN"), Action(ActionKind.BCK_REMOVE_FIRST_REACTANT),
            tiny, np.random.default_rng(0))
        assert prev.kind is StateKind.EMPTY and extra == 0.0

    def test_reverse_extra_logprob_multiset(self, tiny):
        # mixed diester: two ester linkages undo to two distinct parents,
        # each carrying probability 1/2
        ester = [t.id for t in tiny.bi_templates].index("ester_alcohol")
        diester = mol_state(tiny, "CCOC(COC(C)=O)=O", steps=2)
        probs = backward_parent_probs(
            diester, Action(ActionKind.BCK_REACT_BI, template_index=ester), tiny)
        assert len(probs) == 2
        assert all(abs(p - 0.5) < 1e-12 for _, p in probs.values())
        dimer = mol_state(tiny, "CC(=O)OCC(=O)O", steps=1)
        extra = reverse_extra_logprob(
            dimer, Action(ActionKind.REACT_BI, template_index=ester,
                          bb_index=tiny.bb_lookup["CCO"]), diester, tiny)
        assert math.isclose(extra, math.log(0.5))

    def test_symmetric_trimer_single_parent(self, tiny):
        # both ester linkages of the glycolic trimer undo to the same dimer,
        # so the parent distribution is deterministic
        ester = [t.id for t in tiny.bi_templates].index("ester_alcohol")
        trimer = mol_state(tiny, "C(C(=O)OCC(=O)OCC(=O)O)O", steps=2)
        probs = backward_parent_probs(
            trimer, Action(ActionKind.BCK_REACT_BI, template_index=ester), tiny)
        assert len(probs) == 1
        assert list(probs.values())[0][1] == 1.0


class TestRollouts:
    def test_forced_trajectory(self):
        env = bundled_env("count1", nbits=128)
        net = PolicyNet(env, seed=0)
        traj = rollout_forward(net, env, np.random.default_rng(0))
        kinds = [a.kind for a in traj.actions]
        assert kinds == [ActionKind.ADD_FIRST_REACTANT, ActionKind.STOP]
        assert traj.fwd_logprobs == [0.0, 0.0]
        assert traj.bck_logprobs == [0.0, 0.0]

    def test_rollout_respects_length_bound(self, tiny):
        net = PolicyNet(tiny, seed=1)
        rng = np.random.default_rng(4)
        for _ in range(50):
            traj = rollout_forward(net, tiny, rng)
            reactions = sum(a.kind in (ActionKind.REACT_UNI, ActionKind.REACT_BI)
                            for a in traj.actions)
            assert reactions <= tiny.max_len
            assert traj.states[-1].is_terminal
            assert traj.actions[-1].kind is ActionKind.STOP

    def test_terminals_inside_enumeration(self, tiny):
        from synflow.metrics import enumerate_space
        space = enumerate_space(tiny)
        net = PolicyNet(tiny, seed=2)
        rng = np.random.default_rng(5)
        for _ in range(200):
            traj = rollout_forward(net, tiny, rng)
            assert write_canonical_smiles(traj.terminal_mol) in space

    def test_greedy_determinism(self, tiny):
        net = PolicyNet(tiny, seed=3)
        t1 = rollout_forward(net, tiny, np.random.default_rng(99))
        t2 = rollout_forward(net, tiny, np.random.default_rng(99))
        assert [a for a in t1.actions] == [a for a in t2.actions]
        assert t1.fwd_logprobs == t2.fwd_logprobs

    def test_backward_rollout_from_bb(self, tiny):
        traj, reached = rollout_backward(UniformBackwardPolicy(),
                                         parse_smiles("CN"), tiny,
                                         np.random.default_rng(0), steps_taken=0)
        assert reached
        assert [a.kind for a in traj.actions] == [ActionKind.ADD_FIRST_REACTANT,
                                                  ActionKind.STOP]

    def test_backward_rollout_failure_reported(self, trap):
        traj, reached = rollout_backward(UniformBackwardPolicy(),
                                         parse_smiles("CC=O"), trap,
                                         np.random.default_rng(0))
        assert not reached

    def test_composite_logprob_additivity(self, tiny):
        # P(ReactBi composite) factorizes as type/template plus block pick
        net = PolicyNet(tiny, seed=4)
        state = mol_state(tiny, "CC(=O)O")
        mask = forward_mask(state, tiny)
        dist = net.forward_distribution(state, mask, tiny)
        total = 0.0
        for pos, (kind, t_idx) in enumerate(dist.entries):
            lp = dist.top_logprobs[pos]
            if not np.isfinite(lp):
                continue
            if kind is ActionKind.REACT_BI:
                bb_lp, bb_mask = dist.conditionals[t_idx]
                total += float(np.exp(lp) * np.exp(bb_lp[bb_mask]).sum())
            else:
                total += float(np.exp(lp))
        assert math.isclose(total, 1.0, abs_tol=1e-6)


class TestMaskFuzz:
    def test_masked_actions_never_fail(self, tiny, trap):
        # smaller in-suite version of the acceptance fuzz
        rng = np.random.default_rng(123)
        from synflow.metrics import RandomForwardPolicy
        sampler = RandomForwardPolicy()
        applied = 0
        for env in (tiny, trap):
            target = applied + 600
            while applied < target:
                state = EMPTY_STATE
                while not state.is_terminal:
                    mask = forward_mask(state, env)
                    action, _ = sampler.sample_forward(state, mask, env, rng)
                    state = step_forward(state, action, env)  # must not raise
                    applied += 1
        assert applied >= 1200


class TestRouteExport:
    def test_round_trip(self, tiny, tmp_path):
        net = PolicyNet(tiny, seed=6)
        rng = np.random.default_rng(8)
        trajs = [rollout_forward(net, tiny, rng) for _ in range(5)]
        for traj in trajs:
            traj.reward = 0.25
        path = tmp_path / "routes.jsonl"
        export_routes(trajs, tiny, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 5
        for line, traj in zip(lines, trajs):
            record = json.loads(line)
            assert record["reward"] == 0.25
            assert record["terminal_smiles"] == write_canonical_smiles(traj.terminal_mol)
            assert record["steps"][0]["bb_smiles"] in tiny.bb_lookup
        export_routes(trajs, tiny, tmp_path / "again.jsonl")
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()

    def test_empty_export(self, tiny, tmp_path):
        path = tmp_path / "empty.jsonl"
        export_routes([], tiny, path)
        assert path.read_text() == ""
