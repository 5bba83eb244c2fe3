"""Trajectory-balance training with pluggable backward-policy regimes.

One training step samples a batch of forward trajectories, takes a TB step
on the forward policy and the learnable log-partition scalar, then updates
the backward policy per regime: `uniform` (fixed), `free` (trained by the
TB loss itself), `maxlikelihood` (maximum likelihood over the same batch)
or `reinforce` (policy gradient on backward rollouts from a replay buffer,
mixed 1:1 with forward trajectories, backward reward +1 for reaching the
empty state and -1 otherwise, plus an entropy bonus).
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .chemgraph import MolGraph, bemis_murcko_scaffold, write_canonical_smiles
from .mdp import (ActionKind, EnvConfig, Trajectory, backward_mask,
                  reverse_extra_logprob, rollout_backward, rollout_forward)
from .policy import (PolicyNet, UniformBackwardPolicy, backward_logprob_graph,
                     forward_logprob_graph)

BACKWARD_MODES = ("uniform", "free", "maxlikelihood", "reinforce")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr_pf: float = 1e-4
    lr_pb: float = 1e-4
    lr_z: float = 1e-3
    beta: float = 1.0
    backward_mode: str = "uniform"
    alpha: float = 1.0
    replay_capacity: int = 1000
    reward_floor: float = 1e-8
    temperature: float = 1.0
    backward_rollouts: int = 0  # 0: batch_size // 2 (1:1 mixing)
    probe_backward: int = 4
    mode_reward_threshold: float = 0.9
    bb_mode: str = "fingerprint"
    bb_kernel: str = "scaled_dot"
    reinforce_baseline: bool = True
    tb_updates_pb: bool = False  # let TB gradients reach P_B outside `free`
    checkpoint_interval: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"unknown backward_mode {self.backward_mode!r}")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size and steps must be positive")

    @property
    def k_backward(self) -> int:
        return self.backward_rollouts or max(self.batch_size // 2, 1)


class ReplayBuffer:
    """Bounded FIFO of terminal trajectories."""

    def __init__(self, capacity: int):
        self._items: collections.deque = collections.deque(maxlen=capacity)

    def add(self, traj: Trajectory):
        self._items.append(traj)

    def __len__(self):
        return len(self._items)

    def sample(self, k: int, rng: np.random.Generator) -> list[Trajectory]:
        if not self._items:
            return []
        picks = rng.integers(0, len(self._items), size=min(k, len(self._items)))
        return [self._items[int(i)] for i in picks]


def log_shaped_reward(reward: float, beta: float, reward_floor: float) -> float:
    """beta * ln(max(R, floor)): the log of the training reward R^beta."""
    return beta * math.log(max(reward, reward_floor))


def tb_loss(traj: Trajectory, reward: float, log_z: float, beta: float = 1.0,
            reward_floor: float = 1e-8) -> float:
    """Squared trajectory-balance residual from the recorded log-probs."""
    fwd = sum(traj.fwd_logprobs)
    bck = sum(traj.bck_logprobs)
    if not (math.isfinite(fwd) and math.isfinite(bck)):
        raise TrainingError(f"non-finite trajectory log-probs: {fwd}, {bck}")
    residual = log_z + fwd - log_shaped_reward(reward, beta, reward_floor) - bck
    return residual * residual


def uniform_backward_logprob(traj: Trajectory, env: EnvConfig) -> float:
    """Sum of -ln(#unmasked backward actions) plus ln(1/2) tie factors."""
    total = 0.0
    for state, action, nxt in zip(traj.states[:-1], traj.actions, traj.states[1:]):
        if action.kind is ActionKind.STOP:
            continue
        count = backward_mask(nxt, env).action_count()
        if count == 0:
            raise TrainingError(
                f"reverse transition masked at {env.canonical(nxt.mol)!r}")
        total += -math.log(count) + reverse_extra_logprob(state, action, nxt, env)
    return total


def _tb_graph(net_f: PolicyNet, net_b: Optional[PolicyNet],
              trajectories: Sequence[Trajectory], log_rewards: np.ndarray,
              env: EnvConfig, leaves_f: dict, leaves_b: Optional[dict]):
    dtype = net_f.store.dtype
    log_pf = forward_logprob_graph(net_f, trajectories, env, leaves_f)
    if net_b is None:
        log_pb = nx.constant(np.array([sum(t.bck_logprobs) for t in trajectories],
                                      dtype=dtype))
    else:
        source = leaves_b if leaves_b is not None else {
            name: nx.constant(net_b.store[name]) for name in net_b.store.names()}
        log_pb = backward_logprob_graph(net_b, trajectories, env, source)
    residual = nx.add(leaves_f["logZ"],
                      nx.sub(nx.sub(log_pf, nx.constant(log_rewards.astype(dtype))),
                             log_pb))
    return nx.mean(nx.square(residual))


def train_tb_step(net_f: PolicyNet, trajectories: Sequence[Trajectory],
                  rewards: Sequence[float], env: EnvConfig, config: TrainConfig,
                  net_b: Optional[PolicyNet] = None) -> float:
    """One Adam step on the mean TB loss w.r.t. P_F and log Z.

    P_B parameters receive TB gradients only in `free` mode (or when
    `tb_updates_pb` is set); otherwise its log-probabilities enter the loss
    as constants.
    """
    if not trajectories:
        raise TrainingError("empty batch")
    log_rewards = np.array([log_shaped_reward(r, config.beta, config.reward_floor)
                            for r in rewards])
    leaves_f = net_f.store.leaves()
    train_pb = net_b is not None and (config.backward_mode == "free"
                                      or config.tb_updates_pb)
    leaves_b = net_b.store.leaves() if train_pb else None
    loss = _tb_graph(net_f, net_b, trajectories, log_rewards, env, leaves_f, leaves_b)
    if not np.isfinite(loss.values):
        raise TrainingError(f"non-finite TB loss: {float(loss.values)}")
    nx.backward(loss)
    grads_f = {name: tensor.grad for name, tensor in leaves_f.items()
               if tensor.grad is not None}
    nx.adam_step(net_f.store, grads_f,
                 {"policy": config.lr_pf, "logz": config.lr_z})
    if train_pb:
        grads_b = {name: tensor.grad for name, tensor in leaves_b.items()
                   if tensor.grad is not None}
        if grads_b:
            nx.adam_step(net_b.store, grads_b, {"policy": config.lr_pb})
    return float(loss.values)


def mle_update(net_b: PolicyNet, trajectories: Sequence[Trajectory],
               env: EnvConfig, config: TrainConfig) -> float:
    """One Adam step minimizing mean(-log P_B) over forward trajectories."""
    if not trajectories:
        raise TrainingError("empty batch")
    leaves = net_b.store.leaves()
    log_pb = backward_logprob_graph(net_b, trajectories, env, leaves)
    loss = nx.mean(nx.neg(log_pb))
    if not np.isfinite(loss.values):
        raise TrainingError(f"non-finite MLE loss: {float(loss.values)}")
    nx.backward(loss)
    grads = {name: tensor.grad for name, tensor in leaves.items()
             if tensor.grad is not None}
    if grads:
        nx.adam_step(net_b.store, grads, {"policy": config.lr_pb})
    return float(loss.values)


def reinforce_update(net_b: PolicyNet, backward_trajs: Sequence[Trajectory],
                     backward_success: Sequence[bool],
                     forward_trajs: Sequence[Trajectory], env: EnvConfig,
                     config: TrainConfig) -> tuple[float, float]:
    """REINFORCE step on P_B over backward rollouts mixed with forward
    trajectories (which carry backward reward +1 by construction).

    Ascends (R_B - b) * grad log P_B plus alpha * grad of the sampled
    entropy estimate mean(-log P_B); b is the batch-mean baseline.
    Returns (loss, mean backward reward over the sampled rollouts).
    """
    mixed = list(backward_trajs) + list(forward_trajs)
    if not mixed:
        raise TrainingError("reinforce update with no trajectories")
    rewards = np.array([1.0 if ok else -1.0 for ok in backward_success]
                       + [1.0] * len(forward_trajs))
    baseline = rewards.mean() if config.reinforce_baseline else 0.0
    coeff = (config.alpha - (rewards - baseline)).astype(net_b.store.dtype)
    leaves = net_b.store.leaves()
    log_pb = backward_logprob_graph(net_b, mixed, env, leaves)
    loss = nx.mean(nx.mul(nx.constant(coeff), log_pb))
    if not np.isfinite(loss.values):
        raise TrainingError(f"non-finite REINFORCE loss: {float(loss.values)}")
    nx.backward(loss)
    grads = {name: tensor.grad for name, tensor in leaves.items()
             if tensor.grad is not None}
    if grads:
        nx.adam_step(net_b.store, grads, {"policy": config.lr_pb})
    mean_rb = float(np.mean([1.0 if ok else -1.0 for ok in backward_success])) \
        if backward_success else float("nan")
    return float(loss.values), mean_rb


@dataclass
class TrainResult:
    net_f: PolicyNet
    net_b: Optional[PolicyNet]
    config: TrainConfig
    metrics: list = field(default_factory=list)
    mode_scaffolds: set = field(default_factory=set)

    @property
    def log_z(self) -> float:
        return float(self.net_f.store["logZ"][0])


METRIC_COLUMNS = ("step", "tb_loss", "logZ", "mean_reward",
                  "backward_reward_mean", "solved_rate", "modes_count")


def run_training(env: EnvConfig, reward_fn: Callable[[MolGraph], float],
                 config: TrainConfig, rng: np.random.Generator,
                 checkpoint_sink: Optional[Callable] = None) -> TrainResult:
    """Full training loop; deterministic given (env, config, rng state).

    `checkpoint_sink(net_f, net_b, step)` is invoked per checkpoint interval
    and once at the end, and also right before aborting on a non-finite
    loss so the last consistent state is preserved.
    """
    seed_f = int(rng.integers(2 ** 31))
    seed_b = int(rng.integers(2 ** 31))
    net_f = PolicyNet(env, bb_mode=config.bb_mode, bb_kernel=config.bb_kernel,
                      seed=seed_f)
    net_f.store.add("logZ", np.zeros(1), group="logz")
    net_b: Optional[PolicyNet] = None
    if config.backward_mode != "uniform":
        net_b = PolicyNet(env, bb_mode=config.bb_mode, bb_kernel=config.bb_kernel,
                          seed=seed_b)
    recorder = net_b if net_b is not None else UniformBackwardPolicy()
    buffer = ReplayBuffer(config.replay_capacity)
    result = TrainResult(net_f=net_f, net_b=net_b, config=config)

    def emit_checkpoint(step: int):
        if checkpoint_sink is not None:
            checkpoint_sink(net_f, net_b, step)

    for step in range(1, config.steps + 1):
        trajectories = []
        rewards = []
        for _ in range(config.batch_size):
            traj = rollout_forward(net_f, env, rng, config.temperature,
                                   backward_policy=recorder)
            traj.reward = float(reward_fn(traj.terminal_mol))
            trajectories.append(traj)
            rewards.append(traj.reward)
        try:
            loss = train_tb_step(net_f, trajectories, rewards, env, config,
                                 net_b=net_b)
        except (TrainingError, nx.GradientError) as exc:
            emit_checkpoint(step - 1)
            raise TrainingError(f"aborted at step {step}: {exc}") from exc

        backward_reward_mean = math.nan
        solved_rate = math.nan
        if config.backward_mode == "maxlikelihood":
            mle_update(net_b, trajectories, env, config)
        elif config.backward_mode == "reinforce":
            for traj in trajectories:
                buffer.add(traj)
            picked = buffer.sample(config.k_backward, rng)
            rollouts, successes = [], []
            for source in picked:
                traj_b, reached = rollout_backward(
                    net_b, source.terminal_mol, env, rng,
                    steps_taken=source.terminal_state.steps_taken)
                rollouts.append(traj_b)
                successes.append(reached)
            if rollouts:
                forward_mix = buffer.sample(len(rollouts), rng)
                _, backward_reward_mean = reinforce_update(
                    net_b, rollouts, successes, forward_mix, env, config)
                solved_rate = float(np.mean(successes))
        if (math.isnan(solved_rate) and config.probe_backward > 0):
            probe_policy = net_b if net_b is not None else UniformBackwardPolicy()
            probes = trajectories[:config.probe_backward]
            outcomes = []
            for source in probes:
                _, reached = rollout_backward(
                    probe_policy, source.terminal_mol, env, rng,
                    steps_taken=source.terminal_state.steps_taken)
                outcomes.append(reached)
            if outcomes:
                solved_rate = float(np.mean(outcomes))
                backward_reward_mean = 2 * solved_rate - 1

        for traj in trajectories:
            if traj.reward > config.mode_reward_threshold:
                scaffold = bemis_murcko_scaffold(traj.terminal_mol)
                result.mode_scaffolds.add(
                    write_canonical_smiles(scaffold) if not scaffold.is_empty else "")
        result.metrics.append({
            "step": step,
            "tb_loss": loss,
            "logZ": result.log_z,
            "mean_reward": float(np.mean(rewards)),
            "backward_reward_mean": backward_reward_mean,
            "solved_rate": solved_rate,
            "modes_count": len(result.mode_scaffolds),
        })
        if config.checkpoint_interval and step % config.checkpoint_interval == 0:
            emit_checkpoint(step)
    emit_checkpoint(config.steps)
    return result


def tb_grad_check(seed: int, env: EnvConfig, n_trajectories: int = 4,
                  h: float = 1e-3) -> float:
    """Finite-difference check of the full TB loss in float64.

    Builds a randomly initialized forward policy (learnable building-block
    matrix so the kernel is exercised end to end) plus log Z, samples a few
    trajectories, freezes them, and compares backprop against central
    differences through the whole graph. Returns the max relative error.
    """
    rng = np.random.default_rng(seed)
    net_f = PolicyNet(env, bb_mode="embedding", dtype=np.float64,
                      seed=int(rng.integers(2 ** 31)))
    net_f.store.add("logZ", rng.normal(size=1) * 0.1, group="logz")
    recorder = UniformBackwardPolicy()
    trajectories = []
    for _ in range(n_trajectories):
        traj = rollout_forward(net_f, env, rng, backward_policy=recorder)
        traj.reward = 0.5 + 0.5 * float(rng.random())
        trajectories.append(traj)
    log_rewards = np.array([log_shaped_reward(t.reward, 1.0, 1e-8)
                            for t in trajectories])

    def fn(leaves):
        return _tb_graph(net_f, None, trajectories, log_rewards, env, leaves, None)

    return nx.grad_check(fn, net_f.store, h=h)


def sample_trajectories(net_f: PolicyNet, env: EnvConfig, n: int,
                        rng: np.random.Generator,
                        reward_fn: Optional[Callable[[MolGraph], float]] = None,
                        net_b: Optional[PolicyNet] = None,
                        temperature: float = 1.0) -> list[Trajectory]:
    """Sample terminal trajectories from a trained forward policy."""
    recorder = net_b if net_b is not None else UniformBackwardPolicy()
    out = []
    for _ in range(n):
        traj = rollout_forward(net_f, env, rng, temperature, backward_policy=recorder)
        if reward_fn is not None:
            traj.reward = float(reward_fn(traj.terminal_mol))
        out.append(traj)
    return out
