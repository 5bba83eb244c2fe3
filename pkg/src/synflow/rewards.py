"""Terminal-state reward functions and reward-shaping formulas.

Learned bioactivity oracles and live docking are out of scope; the
scaled-affinity reward replays pre-computed scores from a
`canonical_smiles<TAB>score` table instead. The affinity scaling formula is
implemented exactly as published; note that with the default bounds the
best affinity (-10) maps to reward 0, an anomaly preserved on purpose
rather than second-guessed.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

from .chemgraph import (Fingerprint, MolGraph, heavy_atom_count,
                        morgan_fingerprint, tanimoto, write_canonical_smiles)


class RewardError(ValueError):
    pass


def rediscovery_reward(mol: MolGraph, target_fp: Fingerprint) -> float:
    """Tanimoto similarity between mol's fingerprint and the target's."""
    fp = morgan_fingerprint(mol, target_fp.radius, target_fp.nbits)
    return tanimoto(fp, target_fp)


def scale_affinity(affinity: float, scale_min: float = -1.0,
                   scale_max: float = -10.0) -> float:
    """Affinity-to-reward scaling, verbatim from the published formula:
    (affinity + scale_min) / (scale_min + scale_max) - 1."""
    if scale_min + scale_max == 0:
        raise RewardError("scale_min + scale_max must not be zero")
    return (affinity + scale_min) / (scale_min + scale_max) - 1.0


def size_penalty(mol: MolGraph, ref_heavy_atoms: int, allowance: int = 8) -> float:
    """-0.4 for molecules exceeding the reference size plus allowance."""
    if ref_heavy_atoms < 0:
        raise RewardError("ref_heavy_atoms must be >= 0")
    return -0.4 if heavy_atom_count(mol) > ref_heavy_atoms + allowance else 0.0


def apply_exponent(reward: float, beta: float) -> float:
    """Training-time reward sharpening R^beta."""
    if reward < 0:
        raise RewardError("apply_exponent needs a non-negative reward")
    if beta < 1:
        raise RewardError("beta must be >= 1")
    return reward ** beta


def product_reward(factors: Sequence[Callable[[MolGraph], float]],
                   mol: MolGraph) -> float:
    """Product of component rewards (multi-objective composition)."""
    if not factors:
        raise RewardError("product_reward needs at least one factor")
    value = 1.0
    for factor in factors:
        value *= factor(mol)
    return value


def read_score_table(path) -> dict[str, float]:
    """Read a `canonical_smiles<TAB>score` table; '#' comments ignored."""
    table: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise RewardError(f"{path}:{lineno}: expected 'smiles<TAB>score'")
            table[parts[0].strip()] = float(parts[1])
    return table


class ConstantReward:
    """R = 1 for every molecule; turns log Z into a state counter."""

    kind = "constant"

    def __call__(self, mol: MolGraph) -> float:
        return 1.0


class RediscoveryReward:
    kind = "rediscovery"

    def __init__(self, target: MolGraph, radius: int = 2, nbits: int = 2048):
        self.target_fp = morgan_fingerprint(target, radius, nbits)

    def __call__(self, mol: MolGraph) -> float:
        return rediscovery_reward(mol, self.target_fp)


class ScaledAffinityReward:
    """Replay scored molecules through the published affinity scaling.

    Scores come from an external table keyed by canonical SMILES; a missing
    molecule yields `default_affinity` when given, otherwise an error.
    """

    kind = "scaled_affinity"

    def __init__(self, table: dict[str, float], scale_min: float = -1.0,
                 scale_max: float = -10.0, ref_heavy_atoms: Optional[int] = None,
                 allowance: int = 8, default_affinity: Optional[float] = None):
        self.table = dict(table)
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.ref_heavy_atoms = ref_heavy_atoms
        self.allowance = allowance
        self.default_affinity = default_affinity

    def __call__(self, mol: MolGraph) -> float:
        canon = write_canonical_smiles(mol)
        affinity = self.table.get(canon, self.default_affinity)
        if affinity is None:
            raise RewardError(f"no score table entry for {canon!r}")
        value = scale_affinity(affinity, self.scale_min, self.scale_max)
        if self.ref_heavy_atoms is not None:
            value += size_penalty(mol, self.ref_heavy_atoms, self.allowance)
        return value


class ProductReward:
    kind = "product"

    def __init__(self, factors: Sequence[Callable[[MolGraph], float]]):
        if not factors:
            raise RewardError("product reward needs at least one factor")
        self.factors = list(factors)

    def __call__(self, mol: MolGraph) -> float:
        return product_reward(self.factors, mol)
