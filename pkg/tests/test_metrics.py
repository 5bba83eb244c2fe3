import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synflow.chemgraph import morgan_fingerprint, parse_smiles, tanimoto
from synflow.envs import bundled_env
from synflow.mdp import EnvConfig
from synflow.metrics import (EnumerationBudgetError, MetricsError, SampleSet,
                             count_modes, diversity, empirical_distribution,
                             enumerate_levels, enumerate_space, logz_vs_count,
                             max_similarity_to_reference, random_sampler_terminals,
                             solved_routes_rate, tv_distance)
from synflow.policy import UniformBackwardPolicy
from synflow.templates import parse_template


@pytest.fixture(scope="module")
def tiny():
    return bundled_env("tiny", nbits=256)


def make_samples(smiles_rewards):
    mols = [parse_smiles(s) for s, _ in smiles_rewards]
    return SampleSet(mols=mols, rewards=[r for _, r in smiles_rewards])


class TestDiversity:
    def test_identical_set_is_zero(self):
        samples = make_samples([("CCO", 1.0)] * 3)
        assert diversity(samples) == 0.0

    def test_mixed_arithmetic(self):
        a, b = parse_smiles("CCO"), parse_smiles("c1ccc2ccccc2c1")
        sim = tanimoto(morgan_fingerprint(a, 2, 2048), morgan_fingerprint(b, 2, 2048))
        samples = SampleSet(mols=[a, a, b], rewards=[1, 1, 1])
        expected = (0 + (1 - sim) + (1 - sim)) / 3
        assert math.isclose(diversity(samples), expected)

    def test_requires_two(self):
        with pytest.raises(MetricsError):
            diversity(make_samples([("CCO", 1.0)]))


class TestModes:
    def test_shared_benzene_scaffold(self):
        samples = make_samples([("Cc1ccccc1", 0.95), ("Cc1ccccc1C", 0.99),
                                ("c1ccccc1", 0.92)])
        assert count_modes(samples) == 1

    def test_empty_high_reward_subset(self):
        samples = make_samples([("CCO", 0.2), ("CN", 0.1)])
        assert count_modes(samples) == 0

    def test_two_ring_systems(self):
        samples = make_samples([("c1ccccc1", 0.95), ("C1CCCCC1", 0.95),
                                ("CCO", 0.5)])
        assert count_modes(samples) == 2

    def test_acyclic_share_one_mode(self):
        samples = make_samples([("CCO", 0.95), ("CCCC", 0.99), ("CN", 0.93)])
        assert count_modes(samples) == 1

    def test_order_invariant_and_monotone(self):
        entries = [("c1ccccc1", 0.95), ("C1CCCCC1", 0.95), ("CCO", 0.95),
                   ("Cc1ccccc1", 0.95)]
        forward = count_modes(make_samples(entries))
        assert forward == count_modes(make_samples(entries[::-1]))
        running = [count_modes(make_samples(entries[:k]))
                   for k in range(1, len(entries) + 1)]
        assert running == sorted(running)


class TestSolvedRoutes:
    def test_bb_terminals_always_solved(self, tiny):
        rng = np.random.default_rng(0)
        rate = solved_routes_rate(UniformBackwardPolicy(), tiny.building_blocks,
                                  tiny, rollouts_per_mol=1, rng=rng)
        assert rate == 100.0

    def test_unreachable_terminal_zero(self):
        trap = bundled_env("trap", nbits=256)
        rng = np.random.default_rng(0)
        rate = solved_routes_rate(UniformBackwardPolicy(),
                                  [parse_smiles("CC=O")], trap,
                                  rollouts_per_mol=3, rng=rng)
        assert rate == 0.0


class TestEnumeration:
    def test_single_bb_no_templates(self):
        env = EnvConfig([("inert", parse_smiles("CCO"))], [], max_len=3, nbits=128)
        assert enumerate_space(env) == {"CCO"}

    def test_hand_enumerated_small_space(self):
        # 2 blocks, 1 coupling compatible one way, L=1: both blocks + product
        amide = parse_template("[C:1](=O)[OH].[N;H2:2]>>[C:1](=O)[N;H1:2]", "amide")
        env = EnvConfig([("acid", parse_smiles("CC(=O)O")),
                         ("amine", parse_smiles("CN"))], [amide], max_len=1,
                        nbits=128)
        assert enumerate_space(env) == {"CC(=O)O", "CN", "CC(NC)=O"}

    def test_monotone_in_length(self, tiny):
        assert len(enumerate_space(tiny, max_len=1)) <= len(enumerate_space(tiny,
                                                                            max_len=2))

    def test_budget_error_carries_partial(self, tiny):
        with pytest.raises(EnumerationBudgetError) as err:
            enumerate_space(tiny, node_budget=3)
        assert len(err.value.partial) >= len(tiny.building_blocks)

    def test_all_levels_disjoint(self, tiny):
        levels = enumerate_levels(tiny)
        seen = set()
        for level in levels:
            assert not (set(level) & seen)
            seen |= set(level)


class TestLogZVsCount:
    def test_exact_logz(self, tiny):
        n = len(enumerate_space(tiny))
        assert logz_vs_count(math.log(n), tiny) == pytest.approx(0.0, abs=1e-9)

    def test_relative_error(self, tiny):
        n = len(enumerate_space(tiny))
        assert logz_vs_count(math.log(2 * n), tiny) == pytest.approx(1.0)


class TestTvDistance:
    def test_identical(self):
        assert tv_distance({"a": 2, "b": 2}, {"a": 0.5, "b": 0.5}) == 0.0

    def test_disjoint(self):
        assert tv_distance({"a": 1}, {"b": 1}) == 1.0

    def test_half(self):
        assert tv_distance({"a": 1, "b": 1}, {"a": 1}) == 0.5

    @given(st.dictionaries(st.sampled_from("abcdef"),
                           st.floats(0.01, 10), min_size=1),
           st.dictionaries(st.sampled_from("abcdef"),
                           st.floats(0.01, 10), min_size=1),
           st.dictionaries(st.sampled_from("abcdef"),
                           st.floats(0.01, 10), min_size=1))
    @settings(max_examples=60, deadline=None)
    def test_metric_axioms(self, p, q, r):
        assert tv_distance(p, p) == pytest.approx(0.0, abs=1e-12)
        assert tv_distance(p, q) == pytest.approx(tv_distance(q, p))
        assert 0.0 <= tv_distance(p, q) <= 1.0
        assert (tv_distance(p, r)
                <= tv_distance(p, q) + tv_distance(q, r) + 1e-9)


class TestNovelty:
    def test_member_of_reference(self):
        samples = make_samples([("CCO", 1.0)])
        sims = max_similarity_to_reference(samples,
                                           [parse_smiles("CCO"), parse_smiles("CN")],
                                           radius=2, nbits=512)
        assert sims[0] == 1.0

    def test_matches_brute_force_scan(self, tiny):
        # the vectorized bit-matrix path against a direct pairwise loop
        samples = make_samples([(s, 1.0) for s in
                                ["CCO", "CNC(C)=O", "CC(=O)OCC(=O)O", "CN"]])
        reference = [parse_smiles(s) for s in ["CC(=O)O", "CCN", "C(C(=O)O)O"]]
        fast = max_similarity_to_reference(samples, reference, 2, 512)
        for idx, mol in enumerate(samples.mols):
            fp = morgan_fingerprint(mol, 2, 512)
            slow = max(tanimoto(fp, morgan_fingerprint(r, 2, 512))
                       for r in reference)
            assert math.isclose(fast[idx], slow)

    def test_empty_reference_rejected(self):
        with pytest.raises(MetricsError):
            max_similarity_to_reference(make_samples([("C", 1.0)]), [])


class TestSamplers:
    def test_random_sampler_stays_in_space(self, tiny):
        rng = np.random.default_rng(1)
        space = enumerate_space(tiny)
        terminals = random_sampler_terminals(tiny, 100, rng)
        counts = empirical_distribution(terminals)
        assert set(counts) <= space
