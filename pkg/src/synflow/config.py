"""TOML run configuration: environment paths, training knobs, reward spec.

Unknown keys are rejected so typos fail loudly. A minimal file only needs
the [env] section; every training field falls back to its default.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .chemgraph import parse_smiles, read_building_blocks
from .mdp import EnvConfig
from .rewards import (ConstantReward, ProductReward, RediscoveryReward,
                      ScaledAffinityReward, read_score_table)
from .templates import read_templates
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnvSpec:
    building_blocks: str = ""
    templates: str = ""
    bundled: str = ""  # alternative to the two paths above
    max_len: int = 3
    allow_bb_terminals: bool = True
    require_reversible: bool = False
    nbits: int = 2048
    fp_radius: int = 2


@dataclass
class RewardSpec:
    kind: str = "constant"
    target: str = ""  # rediscovery: target SMILES
    score_table: str = ""  # scaled_affinity: path to smiles<TAB>score
    scale_min: float = -1.0
    scale_max: float = -10.0
    ref_heavy_atoms: int = -1  # <0: no size penalty
    allowance: int = 8
    default_affinity: Optional[float] = None
    factors: tuple = ()  # product: list of reward tables


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    reward: RewardSpec = field(default_factory=RewardSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: str = "runs/out"
    num_samples: int = 1000
    rollouts_per_mol: int = 1
    eval_terminals: int = 50
    reference_file: str = ""


def _build_dataclass(cls, data: dict, context: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {context}.{key!r}")
        target_field = known[key]
        if dataclasses.is_dataclass(target_field.type) or target_field.name in (
                "env", "reward", "training"):
            raise ConfigError(f"{context}.{key} must be a table")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{context}] section: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as handle:
        try:
            data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    top_known = {"env", "reward", "training", "seed", "out", "num_samples",
                 "rollouts_per_mol", "eval_terminals", "reference_file"}
    for key in data:
        if key not in top_known:
            raise ConfigError(f"unknown key {key!r}")
    if "factors" in data.get("reward", {}):
        data["reward"]["factors"] = tuple(data["reward"]["factors"])
    config = RunConfig(
        env=_build_dataclass(EnvSpec, data.get("env", {}), "env"),
        reward=_build_dataclass(RewardSpec, data.get("reward", {}), "reward"),
        training=_build_dataclass(TrainConfig, data.get("training", {}), "training"),
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "runs/out")),
        num_samples=int(data.get("num_samples", 1000)),
        rollouts_per_mol=int(data.get("rollouts_per_mol", 1)),
        eval_terminals=int(data.get("eval_terminals", 50)),
        reference_file=str(data.get("reference_file", "")),
    )
    if config.reward.kind not in ("constant", "rediscovery", "scaled_affinity",
                                  "product"):
        raise ConfigError(f"unknown reward kind {config.reward.kind!r}")
    if config.reward.kind == "rediscovery" and not config.reward.target:
        raise ConfigError("rediscovery reward needs reward.target")
    if config.reward.kind == "scaled_affinity" and not config.reward.score_table:
        raise ConfigError("scaled_affinity reward needs reward.score_table")
    if not config.env.bundled and not (config.env.building_blocks
                                       and config.env.templates):
        raise ConfigError("env needs either bundled or building_blocks+templates")
    return config


def build_env(config: RunConfig) -> EnvConfig:
    spec = config.env
    require_reversible = spec.require_reversible
    if config.training.backward_mode == "reinforce":
        # on-policy backward sampling requires reversible forward reactions
        require_reversible = True
    if spec.bundled:
        from .envs import bundled_env
        return bundled_env(spec.bundled, max_len=spec.max_len,
                           allow_bb_terminals=spec.allow_bb_terminals,
                           require_reversible=require_reversible,
                           nbits=spec.nbits, fp_radius=spec.fp_radius)
    for name, value in (("building_blocks", spec.building_blocks),
                        ("templates", spec.templates)):
        if not Path(value).exists():
            raise ConfigError(f"env.{name} file not found: {value}")
    return EnvConfig(read_building_blocks(spec.building_blocks),
                     read_templates(spec.templates), max_len=spec.max_len,
                     allow_bb_terminals=spec.allow_bb_terminals,
                     require_reversible=require_reversible,
                     nbits=spec.nbits, fp_radius=spec.fp_radius)


def build_reward(config: RunConfig, env: EnvConfig):
    spec = config.reward
    if spec.kind == "constant":
        return ConstantReward()
    if spec.kind == "rediscovery":
        return RediscoveryReward(parse_smiles(spec.target), radius=env.fp_radius,
                                 nbits=env.nbits)
    if spec.kind == "scaled_affinity":
        table = read_score_table(spec.score_table)
        return ScaledAffinityReward(
            table, scale_min=spec.scale_min, scale_max=spec.scale_max,
            ref_heavy_atoms=spec.ref_heavy_atoms if spec.ref_heavy_atoms >= 0 else None,
            allowance=spec.allowance, default_affinity=spec.default_affinity)
    factors = []
    for factor_spec in spec.factors:
        sub = RunConfig(reward=_build_dataclass(RewardSpec, dict(factor_spec),
                                                "reward.factors"))
        factors.append(build_reward(sub, env))
    return ProductReward(factors)
