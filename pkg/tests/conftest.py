"""Shared fixtures and independent test oracles.

The graph-isomorphism checker here is deliberately independent of the
package's canonicalization code: it does plain backtracking over atom
attributes and bonds, so canonical-form tests are checked against a second
opinion rather than against themselves.
"""

import itertools

import numpy as np
import pytest

from synflow.chemgraph import BondOrder, MolGraph, parse_smiles

# molecules covering chains, branches, rings, fused rings, aromatics,
# heteroatoms, charges and multiple bonds
CORPUS_SMILES = [
    "C", "CC", "CCO", "OCC", "CC(C)C", "CC(C)(C)C", "C=C", "C#N", "CC=O",
    "CC(=O)O", "OCC(=O)O", "CN", "CCN", "CNC", "C1CC1", "C1CCCCC1",
    "c1ccccc1", "Cc1ccccc1", "c1ccncc1", "c1cc[nH]c1", "c1ccoc1", "c1ccsc1",
    "c1ccc2ccccc2c1", "Nc1ccccc1", "Oc1ccccc1", "Brc1ccccc1",
    "O=[N+]([O-])c1ccccc1", "CS(=O)(=O)Cl", "OB(O)c1ccccc1", "CCBr",
    "BrCCBr", "NCc1ccccc1", "CNC(C)=O", "CCOC(C)=O", "CC(C)(C)OC(=O)NC",
    "C1CCC2(CC1)CCCCC2", "c1ccc(-c2ccccc2)cc1", "OC1CCCCC1", "O=C1CCCCC1",
    "FC(F)(F)c1ccccc1", "CCOC(COC(C)=O)=O", "CNC(COC(CO)=O)=O",
    "C(C(=O)OCC(=O)O)O", "CC(NC)=O", "C1COCCN1", "ClCc1ccccc1",
]


@pytest.fixture(scope="session")
def corpus():
    return [parse_smiles(s) for s in CORPUS_SMILES]


def atom_key(mol: MolGraph, idx: int):
    atom = mol.atoms[idx]
    return (atom.element, atom.aromatic, atom.formal_charge, mol.total_h(idx))


def graphs_isomorphic(a: MolGraph, b: MolGraph) -> bool:
    """Attribute-preserving graph isomorphism by plain backtracking."""
    if len(a.atoms) != len(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    keys_a = sorted(atom_key(a, i) for i in range(len(a.atoms)))
    keys_b = sorted(atom_key(b, i) for i in range(len(b.atoms)))
    if keys_a != keys_b:
        return False
    n = len(a.atoms)
    candidates = [[j for j in range(n) if atom_key(a, i) == atom_key(b, j)
                   and a.degree(i) == b.degree(j)] for i in range(n)]
    assignment = {}
    used = [False] * n

    def extend(i):
        if i == n:
            return True
        for j in candidates[i]:
            if used[j]:
                continue
            ok = True
            for nbr, bi in a.neighbors(i):
                if nbr in assignment:
                    other = b.bond_between(j, assignment[nbr])
                    if other is None or other.order is not a.bonds[bi].order:
                        ok = False
                        break
            if ok:
                assignment[i] = j
                used[j] = True
                if extend(i + 1):
                    return True
                used[j] = False
                del assignment[i]
        return False

    return extend(0)


def brute_force_embeddings(pattern, mol):
    """All injective constraint-satisfying maps, by exhaustive enumeration."""
    from synflow.templates import PatternBond

    np_atoms = len(pattern.atoms)
    results = []
    for combo in itertools.permutations(range(len(mol.atoms)), np_atoms):
        ok = True
        for p_idx, m_idx in enumerate(combo):
            if not pattern.atoms[p_idx].matches(mol, m_idx):
                ok = False
                break
        if not ok:
            continue
        for bond in pattern.bonds:
            mol_bond = mol.bond_between(combo[bond.a], combo[bond.b])
            if mol_bond is None or not bond.matches(mol_bond.order):
                ok = False
                break
        if ok:
            results.append(tuple(combo))
    return sorted(results)


def random_permutation_of(mol: MolGraph, rng: np.random.Generator) -> MolGraph:
    order = list(rng.permutation(len(mol.atoms)))
    return mol.permuted(order)
