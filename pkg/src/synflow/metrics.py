"""Metrics and oracles: enumeration, diversity, modes, solved routes.

`enumerate_space` is the ground-truth oracle for tiny environments: a
budgeted breadth-first closure of the forward action space. Everything the
sampler produces must fall inside it, and with R=1 the trained partition
function should approximate its size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .chemgraph import (Fingerprint, MolGraph, bemis_murcko_scaffold,
                        morgan_fingerprint, tanimoto, write_canonical_smiles)
from .mdp import (Action, ActionKind, EnvConfig, State, StateKind, Trajectory,
                  forward_mask, rollout_backward, rollout_forward)

NO_SCAFFOLD = ""  # shared mode key for acyclic molecules


class MetricsError(ValueError):
    pass


class EnumerationBudgetError(MetricsError):
    """Breadth-first closure exceeded its node budget; carries partial data."""

    def __init__(self, message: str, partial: set):
        super().__init__(message)
        self.partial = partial


@dataclass
class SampleSet:
    """Terminal molecules with rewards and optional source trajectories."""

    mols: list
    rewards: list
    trajectories: Optional[list] = None

    def __post_init__(self):
        if len(self.mols) != len(self.rewards):
            raise MetricsError("mols and rewards must align")
        for reward in self.rewards:
            if not math.isfinite(reward):
                raise MetricsError("rewards must be finite")
        self._dedup: dict[str, int] = {}
        for idx, mol in enumerate(self.mols):
            self._dedup.setdefault(write_canonical_smiles(mol), idx)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "SampleSet":
        return cls(mols=[t.terminal_mol for t in trajectories],
                   rewards=[t.reward if t.reward is not None else 0.0
                            for t in trajectories],
                   trajectories=list(trajectories))

    def __len__(self):
        return len(self.mols)

    def unique_canonicals(self) -> list[str]:
        return sorted(self._dedup)

    def fingerprints(self, radius: int = 2, nbits: int = 2048) -> list[Fingerprint]:
        return [morgan_fingerprint(m, radius, nbits) for m in self.mols]


def diversity(samples: SampleSet, radius: int = 2, nbits: int = 2048) -> float:
    """Mean pairwise Tanimoto distance (1 - similarity) over the sample list."""
    if len(samples) < 2:
        raise MetricsError("diversity needs at least two samples")
    fps = samples.fingerprints(radius, nbits)
    total = 0.0
    pairs = 0
    for i in range(len(fps)):
        for j in range(i + 1, len(fps)):
            total += 1.0 - tanimoto(fps[i], fps[j])
            pairs += 1
    return total / pairs


def count_modes(samples: SampleSet, reward_threshold: float = 0.9) -> int:
    """Distinct Bemis-Murcko scaffolds among samples above the reward
    threshold; all acyclic molecules share one no-scaffold mode."""
    scaffolds = set()
    for mol, reward in zip(samples.mols, samples.rewards):
        if reward <= reward_threshold:
            continue
        scaffold = bemis_murcko_scaffold(mol)
        scaffolds.add(NO_SCAFFOLD if scaffold.is_empty
                      else write_canonical_smiles(scaffold))
    return len(scaffolds)


def solved_routes_rate(backward_policy, terminals: Sequence[MolGraph],
                       env: EnvConfig, rollouts_per_mol: int,
                       rng: np.random.Generator,
                       max_backsteps: Optional[int] = None) -> float:
    """Percentage of terminals with at least one backward rollout (out of
    `rollouts_per_mol`) that reaches the empty state."""
    if not terminals:
        raise MetricsError("no terminals given")
    solved = 0
    for mol in terminals:
        for _ in range(rollouts_per_mol):
            _, reached = rollout_backward(backward_policy, mol, env, rng,
                                          max_backsteps=max_backsteps)
            if reached:
                solved += 1
                break
    return 100.0 * solved / len(terminals)


def _expansions(env: EnvConfig, mol: MolGraph) -> list[MolGraph]:
    products: dict[str, MolGraph] = {}
    for t_idx in range(env.n_uni):
        product = env.uni_product(mol, t_idx)
        if product is not None:
            products.setdefault(write_canonical_smiles(product), product)
    for t_idx in range(env.n_bi):
        for product in env.bi_products(mol, t_idx).values():
            products.setdefault(write_canonical_smiles(product), product)
    return [products[key] for key in sorted(products)]


def enumerate_levels(env: EnvConfig, max_len: Optional[int] = None,
                     node_budget: int = 200_000) -> list[dict[str, MolGraph]]:
    """Molecules reachable with exactly t reactions, for t = 0..max_len."""
    if max_len is None:
        max_len = env.max_len
    levels: list[dict[str, MolGraph]] = [
        {write_canonical_smiles(m): m for m in env.building_blocks}]
    expanded = 0
    for _ in range(max_len):
        frontier: dict[str, MolGraph] = {}
        for mol in levels[-1].values():
            for product in _expansions(env, mol):
                frontier.setdefault(write_canonical_smiles(product), product)
                expanded += 1
                if expanded > node_budget:
                    partial = set()
                    for level in levels:
                        partial |= set(level)
                    raise EnumerationBudgetError(
                        f"enumeration exceeded budget of {node_budget} expansions",
                        partial)
        levels.append(frontier)
    return levels


def enumerate_space(env: EnvConfig, max_len: Optional[int] = None,
                    node_budget: int = 200_000) -> set[str]:
    """Exhaustive set of canonical terminal forms under the masked MDP."""
    levels = enumerate_levels(env, max_len, node_budget)
    start = 0 if env.allow_bb_terminals else 1
    terminals: set[str] = set()
    for level in levels[start:]:
        terminals |= set(level)
    return terminals


def logz_vs_count(log_z: float, env: EnvConfig,
                  exact_count: Optional[int] = None) -> float:
    """Relative error between exp(log Z) and the enumerated terminal count."""
    if exact_count is None:
        exact_count = len(enumerate_space(env))
    if exact_count <= 0:
        raise MetricsError("empty terminal space")
    return abs(math.exp(log_z) - exact_count) / exact_count


def tv_distance(empirical: dict, target: dict) -> float:
    """Total variation distance 1/2 sum |p - q| over the union support.

    Both maps are normalized by their totals, so raw frequency counts are
    accepted on the empirical side.
    """
    total_e = sum(empirical.values())
    total_t = sum(target.values())
    if total_e <= 0 or total_t <= 0:
        raise MetricsError("distributions must have positive mass")
    keys = set(empirical) | set(target)
    return 0.5 * sum(abs(empirical.get(k, 0.0) / total_e - target.get(k, 0.0) / total_t)
                     for k in keys)


def max_similarity_to_reference(samples: SampleSet,
                                reference: Sequence[MolGraph],
                                radius: int = 2, nbits: int = 2048) -> np.ndarray:
    """Per-sample maximum Tanimoto similarity against a reference set.

    Vectorized bit-matrix computation; the tests cross-check it against a
    direct pairwise scan.
    """
    if not reference:
        raise MetricsError("reference set must be nonempty")
    sample_bits = np.stack([morgan_fingerprint(m, radius, nbits).bits
                            for m in samples.mols]).astype(np.int64)
    ref_bits = np.stack([morgan_fingerprint(m, radius, nbits).bits
                         for m in reference]).astype(np.int64)
    inter = sample_bits @ ref_bits.T
    pop_s = sample_bits.sum(axis=1, keepdims=True)
    pop_r = ref_bits.sum(axis=1, keepdims=True).T
    union = pop_s + pop_r - inter
    sims = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return sims.max(axis=1)


# -- samplers used for evaluation sets --------------------------------------------


class RandomForwardPolicy:
    """Uniform-random sampler over unmasked forward actions (test-set maker)."""

    def sample_forward(self, state: State, mask, env: EnvConfig,
                       rng: np.random.Generator, temperature: float = 1.0):
        entries: list[Action] = []
        if state.kind is StateKind.EMPTY:
            for bb in np.flatnonzero(mask.add_first):
                entries.append(Action(ActionKind.ADD_FIRST_REACTANT, bb_index=int(bb)))
        else:
            if mask.stop:
                entries.append(Action(ActionKind.STOP))
            for t in np.flatnonzero(mask.react_uni):
                entries.append(Action(ActionKind.REACT_UNI, template_index=int(t)))
            for t in np.flatnonzero(mask.react_bi):
                from .mdp import addreactant_mask
                for bb in np.flatnonzero(addreactant_mask(state, int(t), env)):
                    entries.append(Action(ActionKind.REACT_BI, template_index=int(t),
                                          bb_index=int(bb)))
        pick = int(rng.integers(0, len(entries)))
        return entries[pick], -math.log(len(entries))


def random_sampler_terminals(env: EnvConfig, n: int,
                             rng: np.random.Generator) -> list[MolGraph]:
    """Terminal molecules from the uniform-random forward sampler."""
    sampler = RandomForwardPolicy()
    return [rollout_forward(sampler, env, rng).terminal_mol for _ in range(n)]


def empirical_distribution(mols: Sequence[MolGraph]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for mol in mols:
        key = write_canonical_smiles(mol)
        counts[key] = counts.get(key, 0) + 1
    return counts


def reward_distribution(env: EnvConfig, reward_fn: Callable[[MolGraph], float],
                        beta: float = 1.0,
                        terminals: Optional[set] = None) -> dict[str, float]:
    """Target distribution R(x)^beta / Z over the enumerated terminal set."""
    from .chemgraph import parse_smiles

    if terminals is None:
        terminals = enumerate_space(env)
    weights = {}
    for canon in sorted(terminals):
        weights[canon] = float(reward_fn(parse_smiles(canon))) ** beta
    total = sum(weights.values())
    if total <= 0:
        raise MetricsError("all-zero reward over the terminal set")
    return {k: v / total for k, v in weights.items()}
