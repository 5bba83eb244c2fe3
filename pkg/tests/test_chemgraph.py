import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CORPUS_SMILES, graphs_isomorphic, random_permutation_of
from synflow.chemgraph import (ChemError, MultiFragmentError, SmilesError,
                               bemis_murcko_scaffold, heavy_atom_count,
                               morgan_fingerprint, parse_smiles, tanimoto,
                               write_canonical_smiles, read_building_blocks)


class TestParse:
    def test_minimal_chain(self):
        mol = parse_smiles("CCO")
        assert [a.element for a in mol.atoms] == ["C", "C", "O"]
        assert len(mol.bonds) == 2
        assert mol.hydrogens == (3, 2, 1)

    def test_benzene(self):
        mol = parse_smiles("c1ccccc1")
        assert len(mol.atoms) == 6
        assert all(a.aromatic for a in mol.atoms)
        assert all(b.order.name == "AROMATIC" for b in mol.bonds)
        assert mol.hydrogens == (1,) * 6

    def test_unbalanced_branch(self):
        with pytest.raises(SmilesError) as err:
            parse_smiles("C(")
        assert err.value.offset == 1

    @pytest.mark.parametrize("bad", ["C(O", "CC)", "C1CC", "C=", "C=(O)C",
                                     "[Si]", "[*]", "C.*", "CC.CO", "[13C]",
                                     "C%1C", "O=C=O=C", "[OH5]C"])
    def test_rejects(self, bad):
        with pytest.raises(ChemError):
            parse_smiles(bad)

    def test_valence_violation_is_parse_error(self):
        with pytest.raises(SmilesError):
            parse_smiles("C(C)(C)(C)(C)C")

    def test_stereo_stripped_with_flag(self):
        for text in ["C/C=C/C", "N[C@@H](C)C(=O)O"]:
            mol = parse_smiles(text)
            assert mol.stereo_stripped
        assert not parse_smiles("CCO").stereo_stripped

    def test_bracket_atoms(self):
        mol = parse_smiles("[NH4+]")
        assert mol.atoms[0].formal_charge == 1
        assert mol.total_h(0) == 4
        anion = parse_smiles("CC(=O)[O-]")
        assert anion.atoms[3].formal_charge == -1
        assert anion.total_h(3) == 0

    def test_charged_nitro_group(self):
        mol = parse_smiles("O=[N+]([O-])c1ccccc1")
        charges = sorted(a.formal_charge for a in mol.atoms)
        assert charges[0] == -1 and charges[-1] == 1

    def test_ring_closure_percent(self):
        assert graphs_isomorphic(parse_smiles("C%12CC%12"), parse_smiles("C1CC1"))

    def test_aromatic_atom_must_be_in_ring(self):
        with pytest.raises(ChemError):
            parse_smiles("cc")

    def test_building_block_file(self, tmp_path):
        path = tmp_path / "bbs.txt"
        path.write_text("# comment\nCCO\tethanol\nCN\n\n")
        records = read_building_blocks(path)
        assert [label for label, _ in records] == ["ethanol", "CN"]
        path.write_text("C(\n")
        with pytest.raises(ChemError):
            read_building_blocks(path)


class TestCanonical:
    def test_permutation_symmetry_example(self):
        assert (write_canonical_smiles(parse_smiles("OCC"))
                == write_canonical_smiles(parse_smiles("CCO")))

    def test_ring_rotation_symmetry(self):
        variants = ["c1ccccc1", "c1ccccc1"]
        forms = {write_canonical_smiles(parse_smiles(s)) for s in variants}
        assert len(forms) == 1

    def test_permutation_invariance_corpus(self, corpus):
        rng = np.random.default_rng(20240817)
        for mol in corpus:
            reference = write_canonical_smiles(mol)
            for _ in range(10):
                shuffled = random_permutation_of(mol, rng)
                assert write_canonical_smiles(shuffled) == reference

    def test_round_trip_isomorphism(self, corpus):
        for mol in corpus:
            reparsed = parse_smiles(write_canonical_smiles(mol))
            assert graphs_isomorphic(mol, reparsed)

    def test_round_trip_random_permutations(self, corpus):
        # [DERIVED] oracle: independent isomorphism check over 1000 parses
        rng = np.random.default_rng(7)
        trials = 0
        while trials < 1000:
            mol = corpus[int(rng.integers(0, len(corpus)))]
            shuffled = random_permutation_of(mol, rng)
            assert graphs_isomorphic(parse_smiles(write_canonical_smiles(shuffled)),
                                     mol)
            trials += 1

    def test_multifragment_rejected(self):
        from synflow.chemgraph import Atom, MolGraph
        two = MolGraph([Atom("C"), Atom("O")], [])
        with pytest.raises(MultiFragmentError):
            write_canonical_smiles(two)

    def test_hydrogen_spelling_does_not_change_identity(self):
        assert (write_canonical_smiles(parse_smiles("C[NH2]"))
                == write_canonical_smiles(parse_smiles("CN")))


class TestFingerprint:
    def test_order_independence(self, corpus):
        rng = np.random.default_rng(11)
        for mol in corpus[:20]:
            fp = morgan_fingerprint(mol, 2, 512)
            shuffled = random_permutation_of(mol, rng)
            assert fp == morgan_fingerprint(shuffled, 2, 512)

    def test_empty_graph_is_zero_vector(self):
        from synflow.chemgraph import EMPTY_MOL
        assert morgan_fingerprint(EMPTY_MOL, 2, 128).popcount() == 0

    def test_radius_zero_separates_heteroatoms(self):
        fp_o = morgan_fingerprint(parse_smiles("CCO"), 0, 2048)
        fp_n = morgan_fingerprint(parse_smiles("CCN"), 0, 2048)
        assert np.any(fp_o.bits != fp_n.bits)

    def test_nonempty_popcount(self, corpus):
        for mol in corpus:
            assert morgan_fingerprint(mol, 2, 2048).popcount() >= 1

    def test_parameter_validation(self):
        mol = parse_smiles("CC")
        with pytest.raises(ChemError):
            morgan_fingerprint(mol, -1, 128)
        with pytest.raises(ChemError):
            morgan_fingerprint(mol, 2, 100)

    def test_determinism_across_calls(self):
        a = morgan_fingerprint(parse_smiles("CNC(C)=O"), 3, 1024)
        b = morgan_fingerprint(parse_smiles("O=C(C)NC"), 3, 1024)
        assert a == b


class TestTanimoto:
    def test_identity(self):
        fp = morgan_fingerprint(parse_smiles("CCO"), 2, 512)
        assert tanimoto(fp, fp) == 1.0

    def test_disjoint_sets(self):
        from synflow.chemgraph import Fingerprint
        a = Fingerprint(np.zeros(64, np.uint8), 64, 2)
        b = Fingerprint(np.zeros(64, np.uint8), 64, 2)
        a.bits[:2] = 1
        b.bits[2:4] = 1
        assert tanimoto(a, b) == 0.0

    def test_half_overlap(self):
        # |a AND b| = 2, |a OR b| = 4 -> 0.5
        from synflow.chemgraph import Fingerprint
        a = Fingerprint(np.zeros(64, np.uint8), 64, 2)
        b = Fingerprint(np.zeros(64, np.uint8), 64, 2)
        a.bits[[0, 1]] = 1
        b.bits[[0, 1, 2, 3]] = 1
        assert tanimoto(a, b) == 0.5

    def test_both_empty_is_one(self):
        from synflow.chemgraph import Fingerprint
        empty = Fingerprint(np.zeros(64, np.uint8), 64, 2)
        assert tanimoto(empty, empty) == 1.0

    def test_mismatched_lengths(self):
        a = morgan_fingerprint(parse_smiles("C"), 2, 128)
        b = morgan_fingerprint(parse_smiles("C"), 2, 256)
        with pytest.raises(ChemError):
            tanimoto(a, b)

    @given(st.integers(0, len(CORPUS_SMILES) - 1),
           st.integers(0, len(CORPUS_SMILES) - 1))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_bounds(self, i, j):
        a = morgan_fingerprint(parse_smiles(CORPUS_SMILES[i]), 2, 512)
        b = morgan_fingerprint(parse_smiles(CORPUS_SMILES[j]), 2, 512)
        s = tanimoto(a, b)
        assert 0.0 <= s <= 1.0
        assert s == tanimoto(b, a)


class TestScaffold:
    def test_benzene_fixpoint(self):
        benzene = parse_smiles("c1ccccc1")
        assert (write_canonical_smiles(bemis_murcko_scaffold(benzene))
                == write_canonical_smiles(benzene))

    def test_toluene_to_benzene(self):
        scaffold = bemis_murcko_scaffold(parse_smiles("Cc1ccccc1"))
        assert (write_canonical_smiles(scaffold)
                == write_canonical_smiles(parse_smiles("c1ccccc1")))

    def test_acyclic_gives_empty(self):
        assert bemis_murcko_scaffold(parse_smiles("CCCC")).is_empty

    def test_exocyclic_double_bond_retained(self):
        scaffold = bemis_murcko_scaffold(parse_smiles("O=C1CCCCC1"))
        assert heavy_atom_count(scaffold) == 7

    def test_idempotent(self, corpus):
        for mol in corpus:
            once = bemis_murcko_scaffold(mol)
            if once.is_empty:
                continue
            twice = bemis_murcko_scaffold(once)
            assert write_canonical_smiles(once) == write_canonical_smiles(twice)


class TestHeavyAtoms:
    @pytest.mark.parametrize("smiles,count", [("CCO", 3), ("c1ccccc1", 6)])
    def test_counts(self, smiles, count):
        assert heavy_atom_count(parse_smiles(smiles)) == count

    def test_empty(self):
        from synflow.chemgraph import EMPTY_MOL
        assert heavy_atom_count(EMPTY_MOL) == 0
