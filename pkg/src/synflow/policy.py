"""Hierarchical forward/backward policy networks over fingerprint features.

The state is encoded as its circular fingerprint plus the normalized
reaction count; an MLP trunk produces a shared embedding consumed by
per-action-type linear heads. Building blocks are chosen through a dot
product between a query head and the building-block matrix: either the
fixed fingerprint matrix or a learnable embedding matrix, scaled by
1/sqrt(nbits) (cosine normalization available via ``bb_kernel="cosine"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .mdp import (Action, ActionKind, BackwardMask, EnvConfig, ForwardMask,
                  MdpError, State, StateKind, Trajectory, addreactant_mask,
                  backward_mask, forward_mask, reverse_extra_logprob)
from .numerics import ParamStore, Tensor


class PolicyError(ValueError):
    pass


def state_features(state: State, env: EnvConfig, dtype=np.float32) -> np.ndarray:
    """Fingerprint bits of the current molecule (zeros at s0) plus the
    step count normalized by the maximum trajectory length."""
    feats = np.zeros(env.nbits + 1, dtype=dtype)
    if state.mol is not None and not state.mol.is_empty:
        feats[:env.nbits] = env.fingerprint(state.mol)
    feats[env.nbits] = state.steps_taken / env.max_len
    return feats


@dataclass(frozen=True)
class ForwardDistribution:
    """Joint log-probabilities of the hierarchical forward policy.

    `entries` orders the top level; `conditionals` maps an entry key
    ("first" or a bi-template index) to (bb log-probs, bb mask).
    """

    entries: tuple  # ((ActionKind, template_index|None), ...)
    top_logprobs: np.ndarray
    conditionals: dict

    def logprob_of(self, action: Action) -> float:
        for pos, (kind, t_idx) in enumerate(self.entries):
            if kind is action.kind and t_idx == action.template_index:
                lp = float(self.top_logprobs[pos])
                if kind is ActionKind.ADD_FIRST_REACTANT:
                    lp += float(self.conditionals["first"][0][action.bb_index])
                elif kind is ActionKind.REACT_BI:
                    lp += float(self.conditionals[action.template_index][0][action.bb_index])
                return lp
        raise PolicyError(f"action {action} not present in distribution")


@dataclass(frozen=True)
class BackwardDistribution:
    entries: tuple
    logprobs: np.ndarray

    def logprob_of(self, action: Action) -> float:
        for pos, (kind, t_idx) in enumerate(self.entries):
            if kind is action.kind and t_idx == action.template_index:
                return float(self.logprobs[pos])
        raise PolicyError(f"action {action} not present in distribution")


class PolicyNet:
    """MLP trunk plus per-action-type heads; usable as P_F or P_B."""

    HIDDEN = 128
    EMBED = 128

    def __init__(self, env: EnvConfig, bb_mode: str = "fingerprint",
                 bb_kernel: str = "scaled_dot", dtype=np.float32,
                 init: str = "normal", seed: int = 0):
        if bb_mode not in ("fingerprint", "embedding"):
            raise PolicyError(f"unknown bb_mode {bb_mode!r}")
        if bb_kernel not in ("scaled_dot", "cosine"):
            raise PolicyError(f"unknown bb_kernel {bb_kernel!r}")
        self.env = env
        self.bb_mode = bb_mode
        self.bb_kernel = bb_kernel
        self.n_uni = env.n_uni
        self.n_bi = env.n_bi
        self.n_bbs = env.n_bbs
        self.nbits = env.nbits
        self.in_dim = env.nbits + 1
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)

        def dense(name: str, fan_in: int, fan_out: int):
            if init == "zero":
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / math.sqrt(max(fan_in, 1)),
                               size=(fan_in, fan_out))
            self.store.add(f"{name}.w", w, group="policy")
            self.store.add(f"{name}.b", np.zeros(fan_out), group="policy")

        dense("trunk.l1", self.in_dim, self.HIDDEN)
        dense("trunk.l2", self.HIDDEN, self.HIDDEN)
        dense("trunk.l3", self.HIDDEN, self.EMBED)
        dense("head.stop", self.EMBED, 1)
        dense("head.react_uni", self.EMBED, self.n_uni)
        dense("head.react_bi", self.EMBED, self.n_bi)
        dense("head.bb_query", self.EMBED, self.nbits)
        dense("addreactant.l1", self.EMBED + self.n_bi, self.HIDDEN)
        dense("addreactant.l2", self.HIDDEN, self.nbits)
        dense("head.bck_react_uni", self.EMBED, self.n_uni)
        dense("head.bck_react_bi", self.EMBED, self.n_bi)
        dense("head.bck_remove", self.EMBED, 1)
        if bb_mode == "embedding":
            self.store.add("bb_embedding",
                           rng.normal(0.0, 1.0 / math.sqrt(self.nbits),
                                      size=(self.n_bbs, self.nbits)),
                           group="policy")
            self._bb_const = None
        else:
            # fixed fingerprint matrix: deliberately not a parameter
            self._bb_const = env.bb_fingerprints.astype(self.store.dtype)
        # distributions memoized per parameter version (states recur heavily)
        self._dist_cache: dict = {}
        self._dist_version = -1

    # -- building-block matrix -------------------------------------------------

    def bb_matrix(self) -> np.ndarray:
        if self.bb_mode == "fingerprint":
            return self._bb_const
        return self.store["bb_embedding"]

    def bb_matrix_hash(self) -> int:
        import hashlib
        digest = hashlib.sha256(np.ascontiguousarray(self.bb_matrix()).tobytes())
        return int.from_bytes(digest.digest()[:8], "little")

    # -- inference path (numpy only) --------------------------------------------

    def _dense_np(self, name: str, x: np.ndarray) -> np.ndarray:
        return x @ self.store[f"{name}.w"] + self.store[f"{name}.b"]

    def embed_np(self, feats: np.ndarray) -> np.ndarray:
        h = np.maximum(self._dense_np("trunk.l1", feats), 0)
        h = np.maximum(self._dense_np("trunk.l2", h), 0)
        return self._dense_np("trunk.l3", h)

    def _bb_logits_np(self, query: np.ndarray) -> np.ndarray:
        matrix = self.bb_matrix()
        if self.bb_kernel == "cosine":
            qn = query / np.maximum(np.sqrt((query * query).sum(axis=-1, keepdims=True)), 1e-8)
            mn = matrix / np.maximum(np.sqrt((matrix * matrix).sum(axis=-1, keepdims=True)), 1e-8)
            return qn @ mn.T
        return (query @ matrix.T) / np.asarray(math.sqrt(self.nbits), self.store.dtype)

    @staticmethod
    def _masked_log_softmax_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if not mask.any():
            raise nx.MaskError("all-masked softmax row")
        clipped = np.clip(logits, -nx.LOGIT_CLIP, nx.LOGIT_CLIP)
        shifted = clipped - clipped[mask].max()
        expd = np.where(mask, np.exp(np.where(mask, shifted, 0)), 0)
        out = np.where(mask, shifted - np.log(expd.sum()), -np.inf)
        return out.astype(logits.dtype, copy=False)

    def _onehot(self, t_idx: int) -> np.ndarray:
        onehot = np.zeros(self.n_bi, dtype=self.store.dtype)
        onehot[t_idx] = 1
        return onehot

    def _cache_lookup(self, tag: str, state: State, env: EnvConfig):
        if self.store.version != self._dist_version:
            self._dist_cache.clear()
            self._dist_version = self.store.version
        from .chemgraph import write_canonical_smiles
        key = (tag, write_canonical_smiles(state.mol) if state.mol is not None else "",
               state.steps_taken)
        return key, self._dist_cache.get(key)

    def forward_distribution(self, state: State, mask: ForwardMask,
                             env: EnvConfig) -> ForwardDistribution:
        key, cached = self._cache_lookup("fwd", state, env)
        if cached is not None:
            return cached
        dist = self._forward_distribution(state, mask, env)
        self._dist_cache[key] = dist
        return dist

    def _forward_distribution(self, state: State, mask: ForwardMask,
                              env: EnvConfig) -> ForwardDistribution:
        feats = state_features(state, env, self.store.dtype)
        emb = self.embed_np(feats[None, :])[0]
        if state.kind is StateKind.EMPTY:
            query = self._dense_np("head.bb_query", emb[None, :])
            bb_lp = self._masked_log_softmax_np(self._bb_logits_np(query)[0],
                                                mask.add_first)
            return ForwardDistribution(
                entries=((ActionKind.ADD_FIRST_REACTANT, None),),
                top_logprobs=np.zeros(1, dtype=self.store.dtype),
                conditionals={"first": (bb_lp, mask.add_first)})
        logits = np.concatenate([
            self._dense_np("head.stop", emb[None, :])[0],
            self._dense_np("head.react_uni", emb[None, :])[0],
            self._dense_np("head.react_bi", emb[None, :])[0]])
        top_mask = np.concatenate([[mask.stop], mask.react_uni, mask.react_bi])
        top_lp = self._masked_log_softmax_np(logits, top_mask)
        entries = [(ActionKind.STOP, None)]
        entries += [(ActionKind.REACT_UNI, t) for t in range(self.n_uni)]
        entries += [(ActionKind.REACT_BI, t) for t in range(self.n_bi)]
        conditionals = {}
        for t_idx in range(self.n_bi):
            if not mask.react_bi[t_idx]:
                continue
            bb_mask = addreactant_mask(state, t_idx, env)
            query_in = np.concatenate([emb, self._onehot(t_idx)])[None, :]
            h = np.maximum(self._dense_np("addreactant.l1", query_in), 0)
            query = self._dense_np("addreactant.l2", h)
            bb_lp = self._masked_log_softmax_np(self._bb_logits_np(query)[0], bb_mask)
            conditionals[t_idx] = (bb_lp, bb_mask)
        return ForwardDistribution(entries=tuple(entries), top_logprobs=top_lp,
                                   conditionals=conditionals)

    def backward_distribution(self, state: State, mask: BackwardMask,
                              env: EnvConfig) -> BackwardDistribution:
        key, cached = self._cache_lookup("bck", state, env)
        if cached is not None:
            return cached
        dist = self._backward_distribution(state, mask, env)
        self._dist_cache[key] = dist
        return dist

    def _backward_distribution(self, state: State, mask: BackwardMask,
                               env: EnvConfig) -> BackwardDistribution:
        feats = state_features(state, env, self.store.dtype)
        emb = self.embed_np(feats[None, :])
        logits = np.concatenate([
            self._dense_np("head.bck_remove", emb)[0],
            self._dense_np("head.bck_react_uni", emb)[0],
            self._dense_np("head.bck_react_bi", emb)[0]])
        full_mask = np.concatenate([[mask.remove_first], mask.bck_react_uni,
                                    mask.bck_react_bi])
        entries = [(ActionKind.BCK_REMOVE_FIRST_REACTANT, None)]
        entries += [(ActionKind.BCK_REACT_UNI, t) for t in range(self.n_uni)]
        entries += [(ActionKind.BCK_REACT_BI, t) for t in range(self.n_bi)]
        return BackwardDistribution(entries=tuple(entries),
                                    logprobs=self._masked_log_softmax_np(logits, full_mask))

    # -- sampling interface used by mdp rollouts ---------------------------------

    def sample_forward(self, state: State, mask: ForwardMask, env: EnvConfig,
                       rng: np.random.Generator, temperature: float = 1.0):
        dist = self.forward_distribution(state, mask, env)
        return sample_action(dist, rng, temperature)

    def sample_backward(self, state: State, mask: BackwardMask, env: EnvConfig,
                        rng: np.random.Generator):
        dist = self.backward_distribution(state, mask, env)
        pos = _categorical(dist.logprobs, rng)
        kind, t_idx = dist.entries[pos]
        return Action(kind, template_index=t_idx), float(dist.logprobs[pos])

    def action_logprob(self, state: State, action: Action, env: EnvConfig) -> float:
        dist = self.backward_distribution(state, backward_mask(state, env), env)
        return dist.logprob_of(action)


class UniformBackwardPolicy:
    """Fixed P_B: uniform over unmasked backward actions."""

    def action_logprob(self, state: State, action: Action, env: EnvConfig) -> float:
        mask = backward_mask(state, env)
        count = mask.action_count()
        if count == 0:
            raise MdpError("uniform backward policy asked for all-false mask")
        return -math.log(count)

    def sample_backward(self, state: State, mask: BackwardMask, env: EnvConfig,
                        rng: np.random.Generator):
        entries = []
        if mask.remove_first:
            entries.append(Action(ActionKind.BCK_REMOVE_FIRST_REACTANT))
        for t in np.flatnonzero(mask.bck_react_uni):
            entries.append(Action(ActionKind.BCK_REACT_UNI, template_index=int(t)))
        for t in np.flatnonzero(mask.bck_react_bi):
            entries.append(Action(ActionKind.BCK_REACT_BI, template_index=int(t)))
        if not entries:
            raise MdpError("uniform backward policy asked for all-false mask")
        pick = int(rng.integers(0, len(entries)))
        return entries[pick], -math.log(len(entries))


def _categorical(logprobs: np.ndarray, rng: np.random.Generator,
                 temperature: float = 1.0) -> int:
    finite = np.isfinite(logprobs)
    lp = np.where(finite, logprobs, -np.inf).astype(np.float64)
    if temperature != 1.0:
        lp = lp / temperature
        lp = lp - lp[finite].max()
    probs = np.exp(lp)
    probs[~finite] = 0.0
    cumulative = np.cumsum(probs)
    if cumulative[-1] <= 0:
        raise PolicyError("degenerate distribution: no finite entries")
    draw = rng.random() * cumulative[-1]
    return min(int(np.searchsorted(cumulative, draw, side="right")),
               len(probs) - 1)


def sample_action(dist: ForwardDistribution, rng: np.random.Generator,
                  temperature: float = 1.0) -> tuple[Action, float]:
    """Hierarchical categorical sample; the returned log-probability is the
    untempered model value (temperature shapes sampling only)."""
    pos = _categorical(dist.top_logprobs, rng, temperature)
    kind, t_idx = dist.entries[pos]
    logprob = float(dist.top_logprobs[pos])
    if kind is ActionKind.ADD_FIRST_REACTANT:
        bb_lp, _ = dist.conditionals["first"]
        bb = _categorical(bb_lp, rng, temperature)
        return Action(kind, bb_index=bb), logprob + float(bb_lp[bb])
    if kind is ActionKind.REACT_BI:
        bb_lp, _ = dist.conditionals[t_idx]
        bb = _categorical(bb_lp, rng, temperature)
        return Action(kind, template_index=t_idx, bb_index=bb), logprob + float(bb_lp[bb])
    if kind is ActionKind.REACT_UNI:
        return Action(kind, template_index=t_idx), logprob
    return Action(ActionKind.STOP), logprob


# -- batched graph evaluation (used by training updates) -------------------------


def _segment_sum(values: Tensor, segments: Sequence[int], n_segments: int,
                 dtype) -> Tensor:
    indicator = np.zeros((n_segments, values.values.shape[0]), dtype=dtype)
    for col, seg in enumerate(segments):
        indicator[seg, col] = 1
    return nx.matmul(nx.constant(indicator), values)


def _graph_dense(leaves: dict, name: str, x: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, leaves[f"{name}.w"]), leaves[f"{name}.b"])


def _graph_embed(leaves: dict, feats: np.ndarray) -> Tensor:
    h = nx.relu(_graph_dense(leaves, "trunk.l1", nx.constant(feats)))
    h = nx.relu(_graph_dense(leaves, "trunk.l2", h))
    return _graph_dense(leaves, "trunk.l3", h)


def _graph_bb_logits(net: PolicyNet, leaves: dict, query: Tensor) -> Tensor:
    if net.bb_mode == "embedding":
        matrix = leaves["bb_embedding"]
    else:
        matrix = nx.constant(net._bb_const)
    if net.bb_kernel == "cosine":
        return nx.matmul(nx.row_l2_normalize(query),
                         nx.transpose(nx.row_l2_normalize(matrix)))
    scaled = nx.matmul(query, nx.transpose(matrix))
    return nx.mul(scaled, nx.constant(np.asarray(1.0 / math.sqrt(net.nbits),
                                                 dtype=net.store.dtype)))


def forward_logprob_graph(net: PolicyNet, trajectories: Sequence[Trajectory],
                          env: EnvConfig, leaves: dict) -> Tensor:
    """Differentiable per-trajectory sums of log P_F."""
    dtype = net.store.dtype
    width = 1 + net.n_uni + net.n_bi
    top_feats, top_masks, top_cols, top_segs = [], [], [], []
    first_feats, first_cols, first_segs = [], [], []
    bi_feats, bi_masks, bi_cols, bi_segs = [], [], [], []
    for b, traj in enumerate(trajectories):
        for state, action in zip(traj.states[:-1], traj.actions):
            feats = state_features(state, env, dtype)
            if state.kind is StateKind.EMPTY:
                first_feats.append(feats)
                first_cols.append(action.bb_index)
                first_segs.append(b)
                continue
            mask = forward_mask(state, env)
            top_feats.append(feats)
            top_masks.append(np.concatenate([[mask.stop], mask.react_uni,
                                             mask.react_bi]))
            if action.kind is ActionKind.STOP:
                col = 0
            elif action.kind is ActionKind.REACT_UNI:
                col = 1 + action.template_index
            elif action.kind is ActionKind.REACT_BI:
                col = 1 + net.n_uni + action.template_index
            else:
                raise MdpError(f"unexpected forward action {action.kind}")
            top_cols.append(col)
            top_segs.append(b)
            if action.kind is ActionKind.REACT_BI:
                bi_feats.append(np.concatenate(
                    [feats, net._onehot(action.template_index)]))
                bi_masks.append(addreactant_mask(state, action.template_index, env))
                bi_cols.append(action.bb_index)
                bi_segs.append(b)
    total = nx.constant(np.zeros(len(trajectories), dtype=dtype))
    if top_feats:
        emb = _graph_embed(leaves, np.stack(top_feats))
        logits = nx.concat([_graph_dense(leaves, "head.stop", emb),
                            _graph_dense(leaves, "head.react_uni", emb),
                            _graph_dense(leaves, "head.react_bi", emb)], axis=1)
        assert logits.values.shape[1] == width
        lps = nx.masked_log_softmax(logits, np.stack(top_masks))
        picked = nx.gather_pairs(lps, np.arange(len(top_cols)), top_cols)
        total = nx.add(total, _segment_sum(picked, top_segs, len(trajectories), dtype))
    if first_feats:
        emb = _graph_embed(leaves, np.stack(first_feats))
        query = _graph_dense(leaves, "head.bb_query", emb)
        lps = nx.masked_log_softmax(_graph_bb_logits(net, leaves, query),
                                    np.ones((len(first_feats), net.n_bbs), dtype=bool))
        picked = nx.gather_pairs(lps, np.arange(len(first_cols)), first_cols)
        total = nx.add(total, _segment_sum(picked, first_segs, len(trajectories), dtype))
    if bi_feats:
        stacked = np.stack(bi_feats)
        emb = _graph_embed(leaves, stacked[:, :net.in_dim])
        query_in = nx.concat([emb, nx.constant(stacked[:, net.in_dim:])], axis=1)
        h = nx.relu(_graph_dense(leaves, "addreactant.l1", query_in))
        query = _graph_dense(leaves, "addreactant.l2", h)
        lps = nx.masked_log_softmax(_graph_bb_logits(net, leaves, query),
                                    np.stack(bi_masks))
        picked = nx.gather_pairs(lps, np.arange(len(bi_cols)), bi_cols)
        total = nx.add(total, _segment_sum(picked, bi_segs, len(trajectories), dtype))
    return total


def backward_logprob_graph(net: PolicyNet, trajectories: Sequence[Trajectory],
                           env: EnvConfig, leaves: dict) -> Tensor:
    """Differentiable per-trajectory sums of log P_B (tie terms are constants)."""
    dtype = net.store.dtype
    feats_rows, mask_rows, cols, segs = [], [], [], []
    ties = np.zeros(len(trajectories), dtype=dtype)
    for b, traj in enumerate(trajectories):
        for state, action, nxt in zip(traj.states[:-1], traj.actions,
                                      traj.states[1:]):
            if action.kind is ActionKind.STOP:
                continue
            mask = backward_mask(nxt, env)
            feats_rows.append(state_features(nxt, env, dtype))
            mask_rows.append(np.concatenate([[mask.remove_first],
                                             mask.bck_react_uni, mask.bck_react_bi]))
            if action.kind is ActionKind.ADD_FIRST_REACTANT:
                col = 0
            elif action.kind is ActionKind.REACT_UNI:
                col = 1 + action.template_index
                ties[b] += reverse_extra_logprob(state, action, nxt, env)
            else:
                col = 1 + net.n_uni + action.template_index
                ties[b] += reverse_extra_logprob(state, action, nxt, env)
            cols.append(col)
            segs.append(b)
    total = nx.constant(ties)
    if feats_rows:
        emb = _graph_embed(leaves, np.stack(feats_rows))
        logits = nx.concat([_graph_dense(leaves, "head.bck_remove", emb),
                            _graph_dense(leaves, "head.bck_react_uni", emb),
                            _graph_dense(leaves, "head.bck_react_bi", emb)], axis=1)
        lps = nx.masked_log_softmax(logits, np.stack(mask_rows))
        picked = nx.gather_pairs(lps, np.arange(len(cols)), cols)
        total = nx.add(total, _segment_sum(picked, segs, len(trajectories), dtype))
    return total


def trajectory_logprob(net_f: PolicyNet, net_b: Optional[PolicyNet],
                       traj: Trajectory, env: EnvConfig) -> tuple[float, float]:
    """Recompute (sum log P_F, sum log P_B) for a stored trajectory.

    P_B includes the ln(1/2) tie factors; with net_b None the backward side
    is the fixed uniform policy.
    """
    fwd = forward_logprob_graph(net_f, [traj], env, net_f.store.leaves())
    if net_b is not None:
        bck = backward_logprob_graph(net_b, [traj], env, net_b.store.leaves())
        bck_value = float(bck.values[0])
    else:
        uniform = UniformBackwardPolicy()
        bck_value = 0.0
        for state, action, nxt in zip(traj.states[:-1], traj.actions,
                                      traj.states[1:]):
            if action.kind is ActionKind.STOP:
                continue
            from .mdp import reverse_action
            bck_value += uniform.action_logprob(nxt, reverse_action(action), env)
            bck_value += reverse_extra_logprob(state, action, nxt, env)
    return float(fwd.values[0]), bck_value


# -- checkpoints ------------------------------------------------------------------


def save_policy(net: PolicyNet, path, extra_metadata: Optional[dict] = None):
    metadata = {
        "env_hash": net.env.identity_hash(),
        "nbits": str(net.nbits),
        "bb_mode": net.bb_mode,
        "bb_kernel": net.bb_kernel,
        "n_uni": str(net.n_uni),
        "n_bi": str(net.n_bi),
        "n_bbs": str(net.n_bbs),
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    nx.save_checkpoint(path, net.store.as_arrays(), metadata)


def load_policy(path, env: EnvConfig) -> tuple[PolicyNet, dict]:
    """Load a policy checkpoint, refusing environment mismatches."""
    arrays, metadata = nx.load_checkpoint(path)
    expected = {"env_hash": env.identity_hash(), "nbits": str(env.nbits),
                "n_uni": str(env.n_uni), "n_bi": str(env.n_bi),
                "n_bbs": str(env.n_bbs)}
    for key, value in expected.items():
        if metadata.get(key) != value:
            raise PolicyError(
                f"checkpoint mismatch for {key}: checkpoint has "
                f"{metadata.get(key)!r}, environment needs {value!r}")
    net = PolicyNet(env, bb_mode=metadata["bb_mode"],
                    bb_kernel=metadata.get("bb_kernel", "scaled_dot"))
    for name in net.store.names():
        if name not in arrays:
            raise PolicyError(f"checkpoint missing parameter {name!r}")
        net.store.set_values(name, arrays[name])
    return net, metadata
