"""Bundled environments and design-time consistency checks.

The bundled data ships small, fully-enumerable environments:

- ``tiny``: acids/amines/alcohols with amide + ester couplings; verified
  leak-free (every backward action from a reachable state stays inside the
  reachable space), so exact reward-proportional sampling is attainable
  even with a uniform backward policy.
- ``trap``: one usable coupling plus three backward-only decoy templates
  whose parents cannot decompose further; the motivating case for trained
  backward policies.
- ``count1`` / ``count3``: trivially countable spaces for partition-function
  checks.
- ``demo``: one building block per bundled template class, for round-trip
  coverage.
"""

from __future__ import annotations

from importlib import resources
from typing import Optional

from .chemgraph import read_building_blocks, write_canonical_smiles
from .mdp import (Action, ActionKind, EnvConfig, State, StateKind,
                  backward_mask, backward_parent_probs, reverse_action)
from .metrics import enumerate_levels
from .templates import read_templates


def data_path(kind: str, name: str):
    return resources.files("synflow").joinpath("data", kind, f"{name}.txt")


def load_env(building_blocks_path, templates_path, max_len: int,
             allow_bb_terminals: bool = True, require_reversible: bool = False,
             nbits: int = 2048, fp_radius: int = 2) -> EnvConfig:
    return EnvConfig(read_building_blocks(building_blocks_path),
                     read_templates(templates_path), max_len=max_len,
                     allow_bb_terminals=allow_bb_terminals,
                     require_reversible=require_reversible,
                     nbits=nbits, fp_radius=fp_radius)


_BUNDLED = {
    # name: (bb file, template file, max_len, allow_bb_terminals)
    "tiny": ("tiny", "tiny", 2, True),
    "trap": ("trap", "trap", 2, False),
    "count1": ("count1", "tiny", 1, True),
    "count3": ("count3", "tiny", 1, True),
    "demo": ("demo", "core", 2, True),
}


def bundled_env(name: str, max_len: Optional[int] = None,
                allow_bb_terminals: Optional[bool] = None,
                require_reversible: bool = False, nbits: int = 2048,
                fp_radius: int = 2) -> EnvConfig:
    if name not in _BUNDLED:
        raise ValueError(f"unknown bundled env {name!r}; have {sorted(_BUNDLED)}")
    bb_name, tmpl_name, default_len, default_bbt = _BUNDLED[name]
    with resources.as_file(data_path("building_blocks", bb_name)) as bb_path, \
            resources.as_file(data_path("templates", tmpl_name)) as tmpl_path:
        return load_env(
            bb_path, tmpl_path,
            max_len=default_len if max_len is None else max_len,
            allow_bb_terminals=default_bbt if allow_bb_terminals is None
            else allow_bb_terminals,
            require_reversible=require_reversible,
            nbits=nbits, fp_radius=fp_radius)


# -- design-time verification -------------------------------------------------


def depth_collisions(env: EnvConfig) -> set[str]:
    """Molecules reachable at more than one reaction depth (should be empty
    for environments used in exact distribution tests)."""
    levels = enumerate_levels(env)
    seen: dict[str, int] = {}
    collisions = set()
    for depth, level in enumerate(levels):
        for canon in level:
            if canon in seen and seen[canon] != depth:
                collisions.add(canon)
            seen.setdefault(canon, depth)
    return collisions


def find_backward_leaks(env: EnvConfig) -> list[str]:
    """Backward actions from reachable states that exit the reachable space.

    Returns human-readable problem descriptions; an empty list certifies
    that uniform backward flow stays inside the DAG, which makes exact
    reward-proportional sampling attainable.
    """
    levels = enumerate_levels(env)
    reachable: dict[str, int] = {}
    for depth, level in enumerate(levels):
        for canon in level:
            reachable.setdefault(canon, depth)
    problems: list[str] = []
    for depth, level in enumerate(levels):
        for canon, mol in sorted(level.items()):
            if reachable[canon] != depth:
                continue  # reported via depth_collisions
            state = State(StateKind.MOL, env.intern(mol), depth)
            mask = backward_mask(state, env)
            if depth > 0 and not mask.any():
                problems.append(f"{canon} at depth {depth} has no backward action")
                continue
            actions = []
            if mask.remove_first:
                actions.append(Action(ActionKind.BCK_REMOVE_FIRST_REACTANT))
            for t in mask.bck_react_uni.nonzero()[0]:
                actions.append(Action(ActionKind.BCK_REACT_UNI, template_index=int(t)))
            for t in mask.bck_react_bi.nonzero()[0]:
                actions.append(Action(ActionKind.BCK_REACT_BI, template_index=int(t)))
            for action in actions:
                if action.kind is ActionKind.BCK_REMOVE_FIRST_REACTANT:
                    if depth != 0:
                        problems.append(
                            f"{canon}: remove-first available at depth {depth}")
                    continue
                for prev_canon, (_, prob) in backward_parent_probs(
                        state, action, env).items():
                    prev_depth = reachable.get(prev_canon)
                    if prev_depth is None:
                        problems.append(
                            f"{canon}: {action.kind.value}[{action.template_index}] "
                            f"leads outside the space ({prev_canon}, p={prob:.3f})")
                    elif prev_depth != depth - 1:
                        problems.append(
                            f"{canon}@{depth}: {action.kind.value}"
                            f"[{action.template_index}] reaches {prev_canon} at "
                            f"depth {prev_depth}, expected {depth - 1}")
    return problems


def find_irreversible_edges(env: EnvConfig) -> list[str]:
    """Forward edges whose reverse action is masked at the child state.

    Any hit would make the realized reverse transition of a forward
    trajectory impossible (log P_B = -inf), so training environments must
    return an empty list.
    """
    levels = enumerate_levels(env)
    problems: list[str] = []
    for depth in range(len(levels) - 1):
        for canon, mol in sorted(levels[depth].items()):
            state = State(StateKind.MOL, env.intern(mol), depth)
            edges: list[tuple[Action, str]] = []
            for t_idx in range(env.n_uni):
                product = env.uni_product(mol, t_idx)
                if product is not None:
                    edges.append((Action(ActionKind.REACT_UNI, template_index=t_idx),
                                  write_canonical_smiles(product)))
            for t_idx in range(env.n_bi):
                for bb_idx, product in sorted(env.bi_products(mol, t_idx).items()):
                    edges.append((Action(ActionKind.REACT_BI, template_index=t_idx,
                                         bb_index=bb_idx),
                                  write_canonical_smiles(product)))
            for action, product_canon in edges:
                child = State(StateKind.MOL, env.intern(levels[depth + 1][product_canon]),
                              depth + 1)
                rev = reverse_action(action)
                mask = backward_mask(child, env)
                ok = ((rev.kind is ActionKind.BCK_REACT_UNI
                       and mask.bck_react_uni[rev.template_index])
                      or (rev.kind is ActionKind.BCK_REACT_BI
                          and mask.bck_react_bi[rev.template_index]))
                if ok:
                    # the realized parent must carry reverse probability mass
                    ok = canon in backward_parent_probs(child, rev, env)
                if not ok:
                    problems.append(
                        f"{canon} -{action.kind.value}[{action.template_index}]-> "
                        f"{product_canon}: reverse action masked or parent unreachable")
    return problems
