"""Synthesis MDP: states, hierarchical action spaces, masks and rollouts.

States hold the current molecule and a reaction counter; forward actions
build molecules from building blocks via reaction templates, backward
actions decompose them. Policies are duck-typed: a forward policy provides
``sample_forward(state, mask, env, rng, temperature)`` and a backward policy
provides ``action_logprob(state, action, env)`` plus
``sample_backward(state, mask, env, rng)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .chemgraph import MolGraph, morgan_fingerprint, write_canonical_smiles
from .templates import (ReactionTemplate, TemplateNotApplicable, apply_backward,
                        apply_forward, check_reversible, match_pattern)

LN_HALF = math.log(0.5)


class MdpError(ValueError):
    """Contract violation inside the synthesis MDP."""


class MaskViolationError(MdpError):
    """An action was applied although the mask forbids it."""


class DeadEndError(MdpError):
    """A state had no legal forward action while Stop was masked."""


class StateKind(enum.Enum):
    EMPTY = "empty"
    MOL = "mol"
    TERMINAL = "terminal"


class ActionKind(enum.Enum):
    STOP = "stop"
    ADD_FIRST_REACTANT = "add_first_reactant"
    REACT_UNI = "react_uni"
    REACT_BI = "react_bi"
    ADD_REACTANT = "add_reactant"
    BCK_REACT_UNI = "bck_react_uni"
    BCK_REACT_BI = "bck_react_bi"
    BCK_REMOVE_FIRST_REACTANT = "bck_remove_first_reactant"


FORWARD_KINDS = (ActionKind.STOP, ActionKind.ADD_FIRST_REACTANT,
                 ActionKind.REACT_UNI, ActionKind.REACT_BI, ActionKind.ADD_REACTANT)
BACKWARD_KINDS = (ActionKind.BCK_REACT_UNI, ActionKind.BCK_REACT_BI,
                  ActionKind.BCK_REMOVE_FIRST_REACTANT)


@dataclass(frozen=True)
class State:
    kind: StateKind
    mol: Optional[MolGraph] = None
    steps_taken: int = 0

    @property
    def is_terminal(self) -> bool:
        return self.kind is StateKind.TERMINAL


EMPTY_STATE = State(StateKind.EMPTY)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    template_index: Optional[int] = None
    bb_index: Optional[int] = None
    tie_choice: Optional[int] = None  # 0 or 1: fragment kept as previous state


@dataclass(frozen=True)
class ForwardMask:
    stop: bool
    add_first: np.ndarray  # over building blocks
    react_uni: np.ndarray  # over uni templates
    react_bi: np.ndarray  # over bi templates

    def any(self) -> bool:
        return bool(self.stop or self.add_first.any() or self.react_uni.any()
                    or self.react_bi.any())


@dataclass(frozen=True)
class BackwardMask:
    remove_first: bool
    bck_react_uni: np.ndarray
    bck_react_bi: np.ndarray

    def any(self) -> bool:
        return bool(self.remove_first or self.bck_react_uni.any()
                    or self.bck_react_bi.any())

    def action_count(self) -> int:
        return (int(self.remove_first) + int(self.bck_react_uni.sum())
                + int(self.bck_react_bi.sum()))


@dataclass
class Trajectory:
    """Forward-oriented trajectory; backward rollouts are stored reversed."""

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    fwd_logprobs: list = field(default_factory=list)
    bck_logprobs: list = field(default_factory=list)
    reward: Optional[float] = None

    @property
    def terminal_state(self) -> State:
        return self.states[-1]

    @property
    def terminal_mol(self) -> MolGraph:
        return self.states[-1].mol

    def check(self):
        if len(self.actions) != len(self.states) - 1:
            raise MdpError("trajectory has mismatched states/actions")


class EnvConfig:
    """Immutable synthesis environment: building blocks, templates, limits."""

    def __init__(self, building_blocks: Sequence[tuple[str, MolGraph]],
                 templates: Sequence[ReactionTemplate], max_len: int,
                 allow_bb_terminals: bool = True, require_reversible: bool = False,
                 nbits: int = 2048, fp_radius: int = 2):
        if max_len < 1:
            raise MdpError("max_len must be >= 1")
        if not building_blocks:
            raise MdpError("environment needs at least one building block")
        self.max_len = max_len
        self.allow_bb_terminals = allow_bb_terminals
        self.require_reversible = require_reversible
        self.nbits = nbits
        self.fp_radius = fp_radius

        self.bb_ids: list[str] = []
        self.building_blocks: list[MolGraph] = []
        self.bb_lookup: dict[str, int] = {}
        for label, mol in building_blocks:
            if not mol.is_single_fragment():
                raise MdpError(f"building block {label!r} is not a single fragment")
            canon = write_canonical_smiles(mol)
            if canon in self.bb_lookup:
                raise MdpError(f"duplicate building block {canon!r}")
            self.bb_lookup[canon] = len(self.building_blocks)
            self.bb_ids.append(label)
            self.building_blocks.append(mol)
        self.n_bbs = len(self.building_blocks)

        self.uni_templates = [t for t in templates if t.arity == 1]
        self.bi_templates = [t for t in templates if t.arity == 2]
        self.n_uni = len(self.uni_templates)
        self.n_bi = len(self.bi_templates)

        self.bb_fingerprints = np.stack(
            [morgan_fingerprint(m, fp_radius, nbits).bits for m in self.building_blocks]
        ).astype(np.float32) if self.n_bbs else np.zeros((0, nbits), np.float32)

        # building block x bi-template-side pattern compatibility
        self._bb_side_match = np.zeros((self.n_bi, 2, self.n_bbs), dtype=bool)
        for ti, template in enumerate(self.bi_templates):
            for side in (0, 1):
                pattern = template.reactant_patterns[side]
                for bi, mol in enumerate(self.building_blocks):
                    self._bb_side_match[ti, side, bi] = bool(match_pattern(pattern, mol))

        self._interned: dict[str, MolGraph] = {
            canon: mol for canon, mol in zip(self.bb_lookup, self.building_blocks)}
        self._uni_cache: dict = {}
        self._bi_cache: dict = {}
        self._bwd_cache: dict = {}

    # -- identity helpers ---------------------------------------------------

    def canonical(self, mol: MolGraph) -> str:
        return write_canonical_smiles(mol)

    def intern(self, mol: MolGraph) -> MolGraph:
        """Canonical-form instance dedup so caches hit across rollouts."""
        canon = write_canonical_smiles(mol)
        existing = self._interned.get(canon)
        if existing is None:
            self._interned[canon] = mol
            return mol
        return existing

    def bb_index_of(self, mol: MolGraph) -> Optional[int]:
        return self.bb_lookup.get(write_canonical_smiles(mol))

    def is_building_block(self, mol: MolGraph) -> bool:
        return self.bb_index_of(mol) is not None

    def fingerprint(self, mol: MolGraph) -> np.ndarray:
        return morgan_fingerprint(mol, self.fp_radius, self.nbits).bits

    def describe(self) -> dict:
        return {
            "n_building_blocks": self.n_bbs,
            "n_uni_templates": self.n_uni,
            "n_bi_templates": self.n_bi,
            "max_len": self.max_len,
            "allow_bb_terminals": self.allow_bb_terminals,
            "require_reversible": self.require_reversible,
            "nbits": self.nbits,
            "fp_radius": self.fp_radius,
        }

    def identity_hash(self) -> str:
        import hashlib
        digest = hashlib.sha256()
        for canon in self.bb_lookup:
            digest.update(canon.encode())
        for template in self.uni_templates + self.bi_templates:
            digest.update(template.id.encode())
        digest.update(json.dumps(self.describe(), sort_keys=True).encode())
        return digest.hexdigest()[:16]

    # -- applicability caches -------------------------------------------------

    def uni_product(self, mol: MolGraph, t_idx: int) -> Optional[MolGraph]:
        """First canonical product of uni template t on mol, or None."""
        key = (write_canonical_smiles(mol), t_idx)
        if key in self._uni_cache:
            return self._uni_cache[key]
        template = self.uni_templates[t_idx]
        product: Optional[MolGraph] = None
        try:
            products = apply_forward(template, [mol])
        except TemplateNotApplicable:
            products = []
        if products:
            if not self.require_reversible or check_reversible(template, [mol]):
                product = self.intern(products[0])
        self._uni_cache[key] = product
        return product

    def bi_products(self, mol: MolGraph, t_idx: int) -> dict[int, MolGraph]:
        """Per-building-block first product of bi template t with mol."""
        key = (write_canonical_smiles(mol), t_idx)
        if key in self._bi_cache:
            return self._bi_cache[key]
        template = self.bi_templates[t_idx]
        mol_matches = [bool(match_pattern(template.reactant_patterns[side], mol))
                       for side in (0, 1)]
        result: dict[int, MolGraph] = {}
        if any(mol_matches):
            for bb_idx in range(self.n_bbs):
                bb = self.building_blocks[bb_idx]
                candidates: list[str] = []
                keep: dict[str, MolGraph] = {}
                for side in (0, 1):
                    if not mol_matches[side] or not self._bb_side_match[t_idx, 1 - side, bb_idx]:
                        continue
                    pair = [None, None]
                    pair[side] = mol
                    pair[1 - side] = bb
                    try:
                        products = apply_forward(template, pair)
                    except TemplateNotApplicable:
                        continue
                    if products and self.require_reversible and \
                            not check_reversible(template, pair):
                        continue
                    for product in products:
                        canon = write_canonical_smiles(product)
                        if canon not in keep:
                            keep[canon] = product
                            candidates.append(canon)
                if candidates:
                    result[bb_idx] = self.intern(keep[min(candidates)])
        self._bi_cache[key] = result
        return result

    def backward_sets(self, mol: MolGraph, template: ReactionTemplate,
                      t_idx: int, is_uni: bool) -> list[list[MolGraph]]:
        key = (write_canonical_smiles(mol), is_uni, t_idx)
        if key in self._bwd_cache:
            return self._bwd_cache[key]
        sets = [[self.intern(m) for m in rset]
                for rset in apply_backward(template, mol)]
        self._bwd_cache[key] = sets
        return sets


# -- masks ---------------------------------------------------------------------


def forward_mask(state: State, env: EnvConfig) -> ForwardMask:
    """Legal forward actions at `state`; raises DeadEndError when empty."""
    if state.is_terminal:
        raise MdpError("terminal states have no forward actions")
    add_first = np.zeros(env.n_bbs, dtype=bool)
    react_uni = np.zeros(env.n_uni, dtype=bool)
    react_bi = np.zeros(env.n_bi, dtype=bool)
    if state.kind is StateKind.EMPTY:
        add_first[:] = True
        return ForwardMask(stop=False, add_first=add_first,
                           react_uni=react_uni, react_bi=react_bi)
    if state.steps_taken >= env.max_len:
        return ForwardMask(stop=True, add_first=add_first,
                           react_uni=react_uni, react_bi=react_bi)
    stop = env.allow_bb_terminals or state.steps_taken >= 1
    for t_idx in range(env.n_uni):
        react_uni[t_idx] = env.uni_product(state.mol, t_idx) is not None
    for t_idx in range(env.n_bi):
        react_bi[t_idx] = bool(env.bi_products(state.mol, t_idx))
    mask = ForwardMask(stop=stop, add_first=add_first,
                       react_uni=react_uni, react_bi=react_bi)
    if not mask.any():
        raise DeadEndError(
            f"no legal action at {env.canonical(state.mol)!r} with Stop masked")
    return mask


def addreactant_mask(state: State, template_index: int, env: EnvConfig) -> np.ndarray:
    """Building blocks usable as the second reactant of an unmasked ReactBi."""
    products = env.bi_products(state.mol, template_index)
    mask = np.zeros(env.n_bbs, dtype=bool)
    for bb_idx in products:
        mask[bb_idx] = True
    if not mask.any():
        raise MaskViolationError(
            f"addreactant mask empty for template {template_index}; "
            "ReactBi should have been masked upstream")
    return mask


def backward_mask(state: State, env: EnvConfig) -> BackwardMask:
    """Legal backward actions; all-false is a reportable (non-error) outcome."""
    if state.mol is None:
        raise MdpError("backward actions need a molecule state")
    mol = state.mol
    bck_uni = np.zeros(env.n_uni, dtype=bool)
    bck_bi = np.zeros(env.n_bi, dtype=bool)
    for t_idx, template in enumerate(env.uni_templates):
        bck_uni[t_idx] = bool(env.backward_sets(mol, template, t_idx, True))
    for t_idx, template in enumerate(env.bi_templates):
        for rset in env.backward_sets(mol, template, t_idx, False):
            if any(env.is_building_block(m) for m in rset):
                bck_bi[t_idx] = True
                break
    return BackwardMask(remove_first=env.is_building_block(mol),
                        bck_react_uni=bck_uni, bck_react_bi=bck_bi)


# -- transitions -----------------------------------------------------------------


def step_forward(state: State, action: Action, env: EnvConfig) -> State:
    """Apply an unmasked forward action; composite ReactBi carries bb_index."""
    mask = forward_mask(state, env)
    if action.kind is ActionKind.STOP:
        if not mask.stop:
            raise MaskViolationError("Stop is masked here")
        return State(StateKind.TERMINAL, state.mol, state.steps_taken)
    if action.kind is ActionKind.ADD_FIRST_REACTANT:
        if not mask.add_first[action.bb_index]:
            raise MaskViolationError(f"AddFirstReactant {action.bb_index} is masked")
        return State(StateKind.MOL, env.building_blocks[action.bb_index], 0)
    if action.kind is ActionKind.REACT_UNI:
        if not mask.react_uni[action.template_index]:
            raise MaskViolationError(f"ReactUni {action.template_index} is masked")
        product = env.uni_product(state.mol, action.template_index)
        return State(StateKind.MOL, product, state.steps_taken + 1)
    if action.kind is ActionKind.REACT_BI:
        if action.bb_index is None:
            raise MdpError("ReactBi transition needs its AddReactant bb_index")
        if not mask.react_bi[action.template_index]:
            raise MaskViolationError(f"ReactBi {action.template_index} is masked")
        products = env.bi_products(state.mol, action.template_index)
        if action.bb_index not in products:
            raise MaskViolationError(
                f"building block {action.bb_index} is masked for template "
                f"{action.template_index}")
        return State(StateKind.MOL, products[action.bb_index], state.steps_taken + 1)
    raise MdpError(f"not a forward action: {action.kind}")


def _qualifying_sets(state: State, action: Action, env: EnvConfig) -> list:
    """Reactant sets an unmasked backward reaction may undo (mask re-checked)."""
    mask = backward_mask(state, env)
    if action.kind is ActionKind.BCK_REACT_UNI:
        if not mask.bck_react_uni[action.template_index]:
            raise MaskViolationError(f"BckReactUni {action.template_index} is masked")
        template = env.uni_templates[action.template_index]
        return env.backward_sets(state.mol, template, action.template_index, True)
    if action.kind is ActionKind.BCK_REACT_BI:
        if not mask.bck_react_bi[action.template_index]:
            raise MaskViolationError(f"BckReactBi {action.template_index} is masked")
        template = env.bi_templates[action.template_index]
        sets = [rset for rset
                in env.backward_sets(state.mol, template, action.template_index, False)
                if any(env.is_building_block(m) for m in rset)]
        if not sets:
            raise MaskViolationError("no backward reactant set contains a building block")
        return sets
    raise MdpError(f"not a backward reaction: {action.kind}")


def backward_parent_probs(state: State, action: Action,
                          env: EnvConfig) -> dict[str, tuple[MolGraph, float]]:
    """Previous-state distribution of one backward reaction action.

    Each qualifying reactant set carries weight 1/k (k sets); within a set
    the non-building-block fragment continues the trajectory, and when both
    fragments are distinct building blocks the continuation is picked with
    p=1/2 from the two. Keys are canonical forms, sorted; values are
    (molecule, probability).
    """
    sets = _qualifying_sets(state, action, env)
    weights: dict[str, float] = {}
    mols: dict[str, MolGraph] = {}

    def put(mol: MolGraph, weight: float):
        canon = write_canonical_smiles(mol)
        weights[canon] = weights.get(canon, 0.0) + weight
        mols.setdefault(canon, mol)

    for rset in sets:
        if action.kind is ActionKind.BCK_REACT_UNI:
            put(rset[0], 1.0)
            continue
        flags = [env.is_building_block(m) for m in rset]
        if all(flags):
            first, second = (write_canonical_smiles(m) for m in rset)
            if first == second:
                put(rset[0], 1.0)
            else:
                put(rset[0], 0.5)
                put(rset[1], 0.5)
        else:
            put(next(m for m, f in zip(rset, flags) if not f), 1.0)
    k = len(sets)
    return {canon: (mols[canon], weights[canon] / k) for canon in sorted(weights)}


def step_backward(state: State, action: Action, env: EnvConfig,
                  rng: np.random.Generator) -> tuple[State, float]:
    """Apply a backward action; returns the previous state and the extra
    log-probability of the parent selection (ln 1/2 ties and uniform choice
    among multiple matched linkages)."""
    prev_steps = max(state.steps_taken - 1, 0)
    if action.kind is ActionKind.BCK_REMOVE_FIRST_REACTANT:
        if not backward_mask(state, env).remove_first:
            raise MaskViolationError("molecule is not a building block")
        return EMPTY_STATE, 0.0
    probs = backward_parent_probs(state, action, env)
    options = list(probs.values())
    if action.tie_choice is not None:
        if not 0 <= action.tie_choice < len(options):
            raise MdpError(f"tie_choice {action.tie_choice} out of range")
        pick = action.tie_choice
    elif len(options) == 1:
        pick = 0
    else:
        weights = np.array([p for _, p in options])
        pick = int(rng.choice(len(options), p=weights / weights.sum()))
    mol, prob = options[pick]
    return State(StateKind.MOL, env.intern(mol), prev_steps), math.log(prob)


def reverse_action(action: Action) -> Action:
    """Backward action undoing a forward action (for P_B factorization)."""
    if action.kind is ActionKind.ADD_FIRST_REACTANT:
        return Action(ActionKind.BCK_REMOVE_FIRST_REACTANT)
    if action.kind is ActionKind.REACT_UNI:
        return Action(ActionKind.BCK_REACT_UNI, template_index=action.template_index)
    if action.kind is ActionKind.REACT_BI:
        return Action(ActionKind.BCK_REACT_BI, template_index=action.template_index)
    raise MdpError(f"{action.kind} has no backward counterpart")


def reverse_extra_logprob(prev_state: State, action: Action, next_state: State,
                          env: EnvConfig) -> float:
    """Parent-selection log-probability of the realized reverse transition.

    Zero for unambiguous reversals; ln(1/2) for both-building-block ties and
    ln(1/k) factors when several matched linkages could be undone by the
    same backward action.
    """
    if action.kind is ActionKind.ADD_FIRST_REACTANT:
        return 0.0
    probs = backward_parent_probs(next_state, reverse_action(action), env)
    if prev_state.kind is StateKind.EMPTY:
        raise MdpError("reverse of a reaction cannot come from the empty state")
    canon = write_canonical_smiles(prev_state.mol)
    if canon not in probs:
        raise MdpError(
            f"realized parent {canon!r} unreachable by reversing "
            f"{action.kind.value}[{action.template_index}]")
    return math.log(probs[canon][1])


# -- rollouts --------------------------------------------------------------------


def rollout_forward(policy, env: EnvConfig, rng: np.random.Generator,
                    temperature: float = 1.0, backward_policy=None) -> Trajectory:
    """Sample a trajectory from the empty state to a terminal molecule.

    Records forward log-probabilities under `policy` and backward
    log-probabilities of the realized reverse transitions under
    `backward_policy` (uniform over unmasked actions when None).
    """
    from .policy import UniformBackwardPolicy  # local import to avoid cycle

    if backward_policy is None:
        backward_policy = UniformBackwardPolicy()
    traj = Trajectory()
    state = EMPTY_STATE
    traj.states.append(state)
    while not state.is_terminal:
        mask = forward_mask(state, env)
        action, logprob = policy.sample_forward(state, mask, env, rng, temperature)
        next_state = step_forward(state, action, env)
        next_state = State(next_state.kind, next_state.mol and env.intern(next_state.mol),
                           next_state.steps_taken)
        if action.kind is ActionKind.STOP:
            blp = 0.0
        else:
            blp = backward_policy.action_logprob(next_state, reverse_action(action), env)
            blp += reverse_extra_logprob(state, action, next_state, env)
        traj.actions.append(action)
        traj.fwd_logprobs.append(float(logprob))
        traj.bck_logprobs.append(float(blp))
        traj.states.append(next_state)
        state = next_state
    traj.check()
    return traj


def rollout_backward(backward_policy, terminal: MolGraph, env: EnvConfig,
                     rng: np.random.Generator, max_backsteps: Optional[int] = None,
                     steps_taken: Optional[int] = None) -> tuple[Trajectory, bool]:
    """Decompose `terminal` by sampling backward actions until the empty
    state, an all-false mask, or the step budget.

    The returned trajectory is stored in forward orientation (states from
    the earliest reached molecule to the terminal, actions as their forward
    counterparts). `reached_s0` reports success; failed rollouts simply do
    not begin at the empty state.
    """
    if max_backsteps is None:
        max_backsteps = env.max_len + 1
    if steps_taken is None:
        steps_taken = env.max_len
    state = State(StateKind.MOL, env.intern(terminal), steps_taken)
    rev_states = [State(StateKind.TERMINAL, state.mol, state.steps_taken), state]
    rev_actions: list[Action] = [Action(ActionKind.STOP)]
    rev_logprobs: list[float] = [0.0]
    reached = False
    for _ in range(max_backsteps):
        mask = backward_mask(state, env)
        if not mask.any():
            break
        action, logprob = backward_policy.sample_backward(state, mask, env, rng)
        prev_state, extra = step_backward(state, action, env, rng)
        if action.kind is ActionKind.BCK_REACT_BI:
            prev_canon = write_canonical_smiles(prev_state.mol)
            removed = None
            for rset in _qualifying_sets(state, action, env):
                canons = [write_canonical_smiles(m) for m in rset]
                for pos in (0, 1):
                    if canons[pos] == prev_canon and env.is_building_block(rset[1 - pos]):
                        removed = rset[1 - pos]
                        break
                if removed is not None:
                    break
            if removed is None:
                raise MdpError("backward split lost its building block")
            fwd = Action(ActionKind.REACT_BI, template_index=action.template_index,
                         bb_index=env.bb_index_of(removed))
        elif action.kind is ActionKind.BCK_REACT_UNI:
            fwd = Action(ActionKind.REACT_UNI, template_index=action.template_index)
        else:
            fwd = Action(ActionKind.ADD_FIRST_REACTANT,
                         bb_index=env.bb_index_of(state.mol))
        rev_states.append(prev_state)
        rev_actions.append(fwd)
        rev_logprobs.append(float(logprob) + float(extra))
        state = prev_state
        if state.kind is StateKind.EMPTY:
            reached = True
            break
    traj = Trajectory(states=list(reversed(rev_states)),
                      actions=list(reversed(rev_actions)),
                      fwd_logprobs=[float("nan")] * len(rev_actions),
                      bck_logprobs=list(reversed(rev_logprobs)))
    traj.check()
    return traj, reached


# -- route export ------------------------------------------------------------------


def route_record(traj: Trajectory, env: EnvConfig) -> dict:
    """JSON-serializable synthesis route for a terminal trajectory."""
    steps = []
    for state, action, next_state in zip(traj.states, traj.actions, traj.states[1:]):
        if action.kind is ActionKind.ADD_FIRST_REACTANT:
            steps.append({"bb_smiles": env.canonical(next_state.mol),
                          "product_smiles": env.canonical(next_state.mol)})
        elif action.kind is ActionKind.REACT_UNI:
            steps.append({"template_id": env.uni_templates[action.template_index].id,
                          "product_smiles": env.canonical(next_state.mol)})
        elif action.kind is ActionKind.REACT_BI:
            steps.append({"template_id": env.bi_templates[action.template_index].id,
                          "bb_smiles": env.canonical(env.building_blocks[action.bb_index])
                          if action.bb_index is not None else None,
                          "product_smiles": env.canonical(next_state.mol)})
    return {"reward": traj.reward,
            "terminal_smiles": env.canonical(traj.terminal_mol),
            "steps": steps}


def export_routes(trajectories: Sequence[Trajectory], env: EnvConfig, path):
    """Newline-delimited JSON route records with stable field order."""
    with open(path, "w", encoding="utf-8") as handle:
        for traj in trajectories:
            handle.write(json.dumps(route_record(traj, env), sort_keys=False))
            handle.write("\n")
