import math

import numpy as np
import pytest

from synflow.chemgraph import parse_smiles
from synflow.envs import bundled_env
from synflow.mdp import (Action, ActionKind, EMPTY_STATE, State, StateKind,
                         backward_mask, forward_mask, rollout_forward)
from synflow.policy import (PolicyError, PolicyNet, UniformBackwardPolicy,
                            load_policy, sample_action, save_policy,
                            state_features, trajectory_logprob)


@pytest.fixture(scope="module")
def tiny():
    return bundled_env("tiny", nbits=256)


def mol_state(env, smiles, steps=0):
    return State(StateKind.MOL, env.intern(parse_smiles(smiles)), steps)


class TestFeatures:
    def test_empty_state_is_zero_fingerprint(self, tiny):
        feats = state_features(EMPTY_STATE, tiny)
        assert feats.shape == (tiny.nbits + 1,)
        assert not feats[:-1].any() and feats[-1] == 0.0

    def test_step_normalization(self, tiny):
        feats = state_features(mol_state(tiny, "CN", steps=1), tiny)
        assert feats[-1] == 0.5  # max_len 2
        assert feats[:-1].sum() > 0


class TestDistributions:
    def test_empty_state_degenerate_top(self, tiny):
        net = PolicyNet(tiny, seed=0)
        dist = net.forward_distribution(EMPTY_STATE, forward_mask(EMPTY_STATE, tiny),
                                        tiny)
        assert dist.entries == ((ActionKind.ADD_FIRST_REACTANT, None),)
        assert dist.top_logprobs[0] == 0.0
        bb_lp, bb_mask = dist.conditionals["first"]
        assert bb_mask.all()
        assert math.isclose(np.exp(bb_lp).sum(), 1.0, abs_tol=1e-6)

    def test_zero_init_uniform(self, tiny):
        net = PolicyNet(tiny, init="zero")
        state = mol_state(tiny, "CC(=O)O")
        dist = net.forward_distribution(state, forward_mask(state, tiny), tiny)
        live = np.isfinite(dist.top_logprobs)
        assert np.allclose(np.exp(dist.top_logprobs[live]), 1.0 / live.sum())

    def test_zero_init_uniform_backward(self, tiny):
        net = PolicyNet(tiny, init="zero")
        state = mol_state(tiny, "CNC(C)=O", steps=1)
        dist = net.backward_distribution(state, backward_mask(state, tiny), tiny)
        live = np.isfinite(dist.logprobs)
        assert np.allclose(np.exp(dist.logprobs[live]), 1.0 / live.sum())
        assert math.isclose(np.exp(dist.logprobs[live]).sum(), 1.0, abs_tol=1e-6)

    def test_masked_probability_is_zero(self, tiny):
        net = PolicyNet(tiny, seed=5)
        state = mol_state(tiny, "CNC(C)=O", steps=1)  # only Stop is legal
        dist = net.forward_distribution(state, forward_mask(state, tiny), tiny)
        finite = [pos for pos, lp in enumerate(dist.top_logprobs)
                  if np.isfinite(lp)]
        assert [dist.entries[p][0] for p in finite] == [ActionKind.STOP]
        assert dist.top_logprobs[finite[0]] == 0.0

    def test_degenerate_backward_on_bb(self, tiny):
        net = PolicyNet(tiny, seed=5)
        state = mol_state(tiny, "CN")
        dist = net.backward_distribution(state, backward_mask(state, tiny), tiny)
        live = np.isfinite(dist.logprobs)
        assert live.sum() == 1 and dist.logprobs[live][0] == 0.0


class TestSampling:
    def test_degenerate_sample(self, tiny):
        net = PolicyNet(tiny, seed=1)
        state = mol_state(tiny, "CNC(C)=O", steps=1)
        dist = net.forward_distribution(state, forward_mask(state, tiny), tiny)
        action, lp = sample_action(dist, np.random.default_rng(0))
        assert action.kind is ActionKind.STOP and lp == 0.0

    def test_seed_reproducibility(self, tiny):
        net = PolicyNet(tiny, seed=1)
        state = mol_state(tiny, "CC(=O)O")
        dist = net.forward_distribution(state, forward_mask(state, tiny), tiny)
        a1, lp1 = sample_action(dist, np.random.default_rng(77))
        a2, lp2 = sample_action(dist, np.random.default_rng(77))
        assert a1 == a2 and lp1 == lp2

    def test_frequencies_match_three_way_distribution(self):
        # multinomial check against known probabilities within 3 sigma
        from synflow.policy import _categorical
        logprobs = np.log(np.array([0.5, 0.3, 0.2]))
        rng = np.random.default_rng(42)
        n = 100_000
        counts = np.bincount([_categorical(logprobs, rng) for _ in range(n)],
                             minlength=3)
        for k, p in enumerate([0.5, 0.3, 0.2]):
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(counts[k] - n * p) <= 3 * sigma


class TestTrajectoryLogprob:
    def test_forced_env_zero(self):
        env = bundled_env("count1", nbits=128)
        net = PolicyNet(env, seed=0)
        traj = rollout_forward(net, env, np.random.default_rng(0))
        fwd, bck = trajectory_logprob(net, None, traj, env)
        assert fwd == 0.0 and bck == 0.0

    def test_recompute_matches_recorded_backward(self, tiny):
        net = PolicyNet(tiny, seed=2)
        rng = np.random.default_rng(5)
        for _ in range(10):
            traj = rollout_forward(net, tiny, rng)
            _, bck = trajectory_logprob(net, None, traj, tiny)
            assert math.isclose(bck, sum(traj.bck_logprobs), abs_tol=1e-9)

    def test_uniform_matches_training_helper(self, tiny):
        from synflow.training import uniform_backward_logprob
        net = PolicyNet(tiny, seed=2)
        net_b_zero = PolicyNet(tiny, init="zero")
        rng = np.random.default_rng(9)
        for _ in range(10):
            traj = rollout_forward(net, tiny, rng)
            expected = uniform_backward_logprob(traj, tiny)
            _, bck = trajectory_logprob(net, net_b_zero, traj, tiny)
            assert math.isclose(bck, expected, rel_tol=1e-6)

    def test_recompute_deterministic(self, tiny):
        net = PolicyNet(tiny, seed=3)
        traj = rollout_forward(net, tiny, np.random.default_rng(1))
        first = trajectory_logprob(net, None, traj, tiny)
        second = trajectory_logprob(net, None, traj, tiny)
        assert first == second

    def test_checkpoint_round_trip_identical(self, tiny, tmp_path):
        net = PolicyNet(tiny, seed=4)
        traj = rollout_forward(net, tiny, np.random.default_rng(2))
        before = trajectory_logprob(net, None, traj, tiny)
        save_policy(net, tmp_path / "net.ckpt")
        loaded, _ = load_policy(tmp_path / "net.ckpt", tiny)
        after = trajectory_logprob(loaded, None, traj, tiny)
        assert before == after

    def test_hand_counted_uniform_backward(self, tiny):
        # acid -> amide -> stop: reverse counts are 1 backward action at the
        # amide (with a both-block tie) and 1 at the acid state
        from synflow.training import uniform_backward_logprob
        from synflow.mdp import step_forward, Trajectory
        amide = [t.id for t in tiny.bi_templates].index("amide_coupling")
        acid_index = tiny.bb_lookup["CC(=O)O"]
        cn_index = tiny.bb_lookup["CN"]
        s0 = EMPTY_STATE
        s1 = step_forward(s0, Action(ActionKind.ADD_FIRST_REACTANT,
                                     bb_index=acid_index), tiny)
        a2 = Action(ActionKind.REACT_BI, template_index=amide, bb_index=cn_index)
        s2 = step_forward(s1, a2, tiny)
        s3 = step_forward(s2, Action(ActionKind.STOP), tiny)
        traj = Trajectory(states=[s0, s1, s2, s3],
                          actions=[Action(ActionKind.ADD_FIRST_REACTANT,
                                          bb_index=acid_index), a2,
                                   Action(ActionKind.STOP)],
                          fwd_logprobs=[0, 0, 0], bck_logprobs=[0, 0, 0])
        # state s2 (the amide): single backward action, tie ln(1/2);
        # state s1 (the acid): single backward action (remove-first)
        expected = (-math.log(1) + math.log(0.5)) + (-math.log(1))
        assert math.isclose(uniform_backward_logprob(traj, tiny), expected)


class TestModes:
    def test_fingerprint_matrix_constant(self, tiny):
        net = PolicyNet(tiny, bb_mode="fingerprint", seed=0)
        assert "bb_embedding" not in net.store
        h0 = net.bb_matrix_hash()
        # parameter updates elsewhere leave the matrix untouched
        from synflow import numerics as nx
        grads = {"trunk.l1.w": np.ones_like(net.store["trunk.l1.w"])}
        nx.adam_step(net.store, grads, {"policy": 1e-3})
        assert net.bb_matrix_hash() == h0

    def test_embedding_matrix_is_parameter(self, tiny):
        net = PolicyNet(tiny, bb_mode="embedding", seed=0)
        assert "bb_embedding" in net.store
        h0 = net.bb_matrix_hash()
        from synflow import numerics as nx
        grads = {"bb_embedding": np.ones_like(net.store["bb_embedding"])}
        nx.adam_step(net.store, grads, {"policy": 1e-3})
        assert net.bb_matrix_hash() != h0

    def test_cosine_kernel_mode(self, tiny):
        net = PolicyNet(tiny, bb_kernel="cosine", seed=0)
        state = mol_state(tiny, "CC(=O)O")
        dist = net.forward_distribution(state, forward_mask(state, tiny), tiny)
        for bb_lp, bb_mask in dist.conditionals.values():
            assert math.isclose(np.exp(bb_lp[bb_mask]).sum(), 1.0, abs_tol=1e-6)

    def test_checkpoint_refuses_mismatched_env(self, tiny, tmp_path):
        net = PolicyNet(tiny, seed=0)
        save_policy(net, tmp_path / "net.ckpt")
        other = bundled_env("trap", nbits=256)
        with pytest.raises(PolicyError, match="mismatch"):
            load_policy(tmp_path / "net.ckpt", other)


class TestUniformBackwardPolicy:
    def test_logprob_counts_actions(self, tiny):
        state = mol_state(tiny, "CNC(C)=O", steps=1)
        policy = UniformBackwardPolicy()
        action = Action(ActionKind.BCK_REACT_BI, template_index=0)
        assert policy.action_logprob(state, action, tiny) == 0.0  # single action

    def test_sample_uniform(self, tiny):
        state = mol_state(tiny, "CC(=O)OCC(=O)O", steps=1)
        mask = backward_mask(state, tiny)
        policy = UniformBackwardPolicy()
        rng = np.random.default_rng(0)
        action, lp = policy.sample_backward(state, mask, tiny, rng)
        assert math.isclose(lp, -math.log(mask.action_count()))
