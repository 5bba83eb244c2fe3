import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synflow.chemgraph import morgan_fingerprint, parse_smiles
from synflow.rewards import (ConstantReward, ProductReward, RediscoveryReward,
                             RewardError, ScaledAffinityReward, apply_exponent,
                             product_reward, read_score_table, rediscovery_reward,
                             scale_affinity, size_penalty)


class TestRediscovery:
    def test_identity_target(self):
        mol = parse_smiles("CNC(C)=O")
        target = morgan_fingerprint(mol, 2, 2048)
        assert rediscovery_reward(mol, target) == 1.0

    def test_unrelated_scaffolds_near_zero(self):
        target = morgan_fingerprint(parse_smiles("c1ccc2ccccc2c1"), 2, 2048)
        value = rediscovery_reward(parse_smiles("OCC(=O)O"), target)
        assert value < 0.1

    def test_bounded(self):
        target = morgan_fingerprint(parse_smiles("CCO"), 2, 2048)
        for smiles in ["CCO", "CCN", "c1ccccc1", "CC(=O)O"]:
            assert 0.0 <= rediscovery_reward(parse_smiles(smiles), target) <= 1.0


class TestScaleAffinity:
    def test_best_default_affinity_maps_to_zero(self):
        # the published formula maps affinity -10 to 0 with default bounds;
        # preserved verbatim, anomaly and all
        assert math.isclose(scale_affinity(-10.0), 0.0)

    def test_printed_formula_substitution(self):
        assert math.isclose(scale_affinity(-1.0), (-2.0) / (-11.0) - 1.0)
        assert math.isclose(scale_affinity(-1.0), -0.81818181, abs_tol=1e-6)

    def test_equal_bounds(self):
        assert math.isclose(scale_affinity(-1.0, -1.0, -1.0), 0.0)

    def test_zero_denominator(self):
        with pytest.raises(RewardError):
            scale_affinity(-5.0, 1.0, -1.0)


class TestSizePenalty:
    def test_boundary_inclusive(self):
        mol = parse_smiles("C" * 11)  # 11 heavy atoms
        assert size_penalty(mol, ref_heavy_atoms=3, allowance=8) == 0.0

    def test_one_over_boundary(self):
        mol = parse_smiles("C" * 12)
        assert size_penalty(mol, ref_heavy_atoms=3, allowance=8) == -0.4

    def test_empty_mol(self):
        from synflow.chemgraph import EMPTY_MOL
        assert size_penalty(EMPTY_MOL, ref_heavy_atoms=0) == 0.0


class TestExponent:
    def test_unit_reward_fixed_point(self):
        for beta in (1.0, 4.0, 32.0, 64.0):
            assert apply_exponent(1.0, beta) == 1.0

    def test_identity_at_beta_one(self):
        assert apply_exponent(0.37, 1.0) == 0.37

    def test_half_to_the_32(self):
        assert math.isclose(apply_exponent(0.5, 32.0), 2.3283064365386963e-10)

    def test_validation(self):
        with pytest.raises(RewardError):
            apply_exponent(-0.1, 2.0)
        with pytest.raises(RewardError):
            apply_exponent(0.5, 0.5)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0),
           st.sampled_from([1.0, 2.0, 8.0, 32.0]))
    @settings(max_examples=80, deadline=None)
    def test_monotone_order_preserving(self, r1, r2, beta):
        if r1 <= r2:
            assert apply_exponent(r1, beta) <= apply_exponent(r2, beta)


class TestProduct:
    def test_single_factor(self):
        mol = parse_smiles("CCO")
        assert product_reward([ConstantReward()], mol) == 1.0

    def test_zero_factor_annihilates(self):
        mol = parse_smiles("CCO")
        assert product_reward([ConstantReward(), lambda m: 0.0], mol) == 0.0

    def test_square_of_similarity(self):
        mol = parse_smiles("CCN")
        factor = RediscoveryReward(parse_smiles("CCO"))
        single = factor(mol)
        assert math.isclose(ProductReward([factor, factor])(mol), single ** 2)

    def test_empty_factors_rejected(self):
        with pytest.raises(RewardError):
            ProductReward([])


class TestConstantAndTable:
    def test_constant_is_one_everywhere(self):
        reward = ConstantReward()
        for smiles in ["C", "CCO", "c1ccccc1", "CNC(C)=O"]:
            assert reward(parse_smiles(smiles)) == 1.0

    def test_score_table_lookup(self, tmp_path):
        path = tmp_path / "scores.txt"
        path.write_text("# scores\nCCO\t-6.5\nCN\t-4.0\n")
        table = read_score_table(path)
        reward = ScaledAffinityReward(table)
        assert math.isclose(reward(parse_smiles("OCC")),
                            scale_affinity(-6.5))

    def test_missing_entry(self, tmp_path):
        path = tmp_path / "scores.txt"
        path.write_text("CCO\t-6.5\n")
        reward = ScaledAffinityReward(read_score_table(path))
        with pytest.raises(RewardError):
            reward(parse_smiles("CN"))
        lax = ScaledAffinityReward(read_score_table(path), default_affinity=-1.0)
        assert math.isclose(lax(parse_smiles("CN")), scale_affinity(-1.0))

    def test_size_penalty_composition(self, tmp_path):
        path = tmp_path / "scores.txt"
        long_chain = "C" * 15
        from synflow.chemgraph import write_canonical_smiles
        canon = write_canonical_smiles(parse_smiles(long_chain))
        path.write_text(f"{canon}\t-10.0\n")
        reward = ScaledAffinityReward(read_score_table(path), ref_heavy_atoms=3,
                                      allowance=8)
        assert math.isclose(reward(parse_smiles(long_chain)),
                            scale_affinity(-10.0) - 0.4)
