"""Command-line interface.

Verbs: train, sample, eval, enumerate, routes, estimate-space, gradcheck.
Every command is reproducible bit-for-bit given (config, seed, input files)
for its delimited outputs and checkpoints; figures are rendered alongside
each report. `SYNFLOW_LOG` sets the logging level.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chemgraph import ChemError, parse_smiles
from .config import ConfigError, RunConfig, build_env, build_reward, load_config
from .mdp import EnvConfig, export_routes
from .metrics import (SampleSet, count_modes, diversity, empirical_distribution,
                      enumerate_space, logz_vs_count, max_similarity_to_reference,
                      random_sampler_terminals, solved_routes_rate)
from .policy import PolicyNet, UniformBackwardPolicy, load_policy, save_policy
from .training import (METRIC_COLUMNS, TrainingError, run_training,
                       sample_trajectories, tb_grad_check)

log = logging.getLogger("synflow")

POLICY_F = "policy_f.ckpt"
POLICY_B = "policy_b.ckpt"


def _setup_logging():
    level = os.environ.get("SYNFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".8g")
    return str(value)


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _prepare(args) -> tuple[RunConfig, EnvConfig, Path, np.random.Generator]:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    env = build_env(config)
    log.info("environment: %s", env.describe())
    return config, env, out, np.random.default_rng(config.seed)


def _checkpoint_dir(args, config: RunConfig) -> Path:
    raw = Path(args.checkpoint if args.checkpoint else config.out)
    return raw.parent if raw.is_file() else raw


def _load_policies(args, config: RunConfig, env: EnvConfig,
                   need_backward: bool = False):
    ckpt_dir = _checkpoint_dir(args, config)
    f_path = ckpt_dir / POLICY_F
    if not f_path.exists():
        raise ConfigError(f"no forward-policy checkpoint at {f_path}")
    net_f, meta = load_policy(f_path, env)
    net_b = None
    b_path = ckpt_dir / POLICY_B
    if b_path.exists():
        net_b, _ = load_policy(b_path, env)
    elif need_backward:
        log.info("no backward checkpoint at %s; using the uniform policy", b_path)
    return net_f, net_b, meta


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    config, env, out, rng = _prepare(args)
    reward_fn = build_reward(config, env)

    def sink(net_f, net_b, step):
        save_policy(net_f, out / POLICY_F, {"role": "forward", "step": str(step)})
        if net_b is not None:
            save_policy(net_b, out / POLICY_B, {"role": "backward", "step": str(step)})

    result = run_training(env, reward_fn, config.training, rng,
                          checkpoint_sink=sink)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
    from . import plots
    plots.training_curves(result.metrics, out / "training_curves.png")
    print(f"trained {config.training.steps} steps: logZ={result.log_z:.4f}, "
          f"final tb_loss={result.metrics[-1]['tb_loss']:.6f}" if result.metrics
          else "trained 0 steps")
    print(f"outputs in {out}")
    return 0


def cmd_sample(args) -> int:
    config, env, out, rng = _prepare(args)
    reward_fn = build_reward(config, env)
    net_f, net_b, _ = _load_policies(args, config, env)
    trajectories = sample_trajectories(net_f, env, config.num_samples, rng,
                                       reward_fn=reward_fn, net_b=net_b,
                                       temperature=config.training.temperature)
    export_routes(trajectories, env, out / "routes.jsonl")
    from . import plots
    plots.reward_histogram([t.reward for t in trajectories],
                           out / "sample_rewards.png")
    print(f"wrote {len(trajectories)} routes to {out / 'routes.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    config, env, out, rng = _prepare(args)
    reward_fn = build_reward(config, env)
    net_f, net_b, _ = _load_policies(args, config, env)
    trajectories = sample_trajectories(net_f, env, config.num_samples, rng,
                                       reward_fn=reward_fn, net_b=net_b,
                                       temperature=config.training.temperature)
    samples = SampleSet.from_trajectories(trajectories)
    row = {
        "n_samples": len(samples),
        "unique_terminals": len(samples.unique_canonicals()),
        "diversity": diversity(samples, env.fp_radius, env.nbits)
        if len(samples) >= 2 else math.nan,
        "modes": count_modes(samples),
        "mean_reward": float(np.mean(samples.rewards)),
        "mean_max_similarity": math.nan,
    }
    from . import plots
    plots.reward_histogram(samples.rewards, out / "eval_rewards.png")
    if config.reference_file:
        reference = [parse_smiles(line.split()[0]) for line
                     in Path(config.reference_file).read_text().splitlines()
                     if line.strip() and not line.startswith("#")]
        sims = max_similarity_to_reference(samples, reference,
                                           env.fp_radius, env.nbits)
        row["mean_max_similarity"] = float(sims.mean())
        plots.similarity_histogram(sims, out / "eval_novelty.png")
    _write_csv(out / "eval.csv", list(row), [row])
    print(f"eval over {len(samples)} samples: diversity={row['diversity']:.4f}, "
          f"modes={row['modes']}, mean_reward={row['mean_reward']:.4f}")
    return 0


def cmd_enumerate(args) -> int:
    config, env, out, _ = _prepare(args)
    terminals = sorted(enumerate_space(env))
    (out / "terminals.txt").write_text("\n".join(terminals) + "\n", encoding="utf-8")
    (out / "count.txt").write_text(f"{len(terminals)}\n", encoding="utf-8")
    print(f"enumerated {len(terminals)} terminal molecules -> {out / 'terminals.txt'}")
    return 0


def cmd_routes(args) -> int:
    config, env, out, rng = _prepare(args)
    net_f, net_b, _ = _load_policies(args, config, env, need_backward=True)
    train_terminals = [t.terminal_mol for t in sample_trajectories(
        net_f, env, config.eval_terminals, rng)]
    test_terminals = random_sampler_terminals(env, config.eval_terminals, rng)
    policies = [("uniform", UniformBackwardPolicy())]
    if net_b is not None:
        policies.insert(0, ("trained", net_b))
    rows = []
    for name, policy in policies:
        for split, terminals in (("train", train_terminals),
                                 ("test", test_terminals)):
            rate = solved_routes_rate(policy, terminals, env,
                                      config.rollouts_per_mol, rng)
            rows.append({"policy": name, "split": split, "solved_rate_pct": rate})
    _write_csv(out / "routes_report.csv", ("policy", "split", "solved_rate_pct"),
               rows)
    from . import plots
    plots.solved_routes_bars(rows, out / "routes_report.png")
    for row in rows:
        print(f"{row['policy']:>8} {row['split']:>5}: {row['solved_rate_pct']:.1f}%")
    return 0


def cmd_estimate_space(args) -> int:
    config, env, out, rng = _prepare(args)
    if args.checkpoint:
        net_f, _, _ = _load_policies(args, config, env)
        if "logZ" not in net_f.store:
            raise ConfigError("checkpoint has no logZ parameter")
        log_z = float(net_f.store["logZ"][0])
    else:
        from .rewards import ConstantReward
        result = run_training(env, ConstantReward(), config.training, rng)
        log_z = result.log_z
    exact = len(enumerate_space(env))
    rel_error = logz_vs_count(log_z, env, exact_count=exact)
    row = {"logZ": log_z, "exp_logZ": math.exp(log_z), "exact_count": exact,
           "rel_error": rel_error}
    _write_csv(out / "space_estimate.csv", list(row), [row])
    from . import plots
    plots.space_estimate_bar(math.exp(log_z), exact, out / "space_estimate.png")
    print(f"exp(logZ)={math.exp(log_z):.2f} vs exact {exact} "
          f"(rel err {rel_error:.3f})")
    return 0


def cmd_gradcheck(args) -> int:
    config, env, out, rng = _prepare(args)
    seeds = list(range(args.gradcheck_seeds))
    rows = []
    worst = 0.0
    for seed in seeds:
        err = tb_grad_check(seed, env)
        rows.append({"seed": seed, "max_rel_error": err})
        worst = max(worst, err)
    _write_csv(out / "gradcheck.csv", ("seed", "max_rel_error"), rows)
    print(f"gradcheck over {len(seeds)} seeds: max rel error {worst:.3e} "
          f"({'OK' if worst <= 1e-4 else 'FAIL'})")
    return 0 if worst <= 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synflow",
        description="Reaction-template GFlowNet engine for molecule generation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": cmd_train,
        "sample": cmd_sample,
        "eval": cmd_eval,
        "enumerate": cmd_enumerate,
        "routes": cmd_routes,
        "estimate-space": cmd_estimate_space,
        "gradcheck": cmd_gradcheck,
    }
    for name, handler in commands.items():
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="TOML run configuration")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--threads", type=int, default=1,
                         help="cap on rollout fan-out (evaluation is sequential "
                              "in this implementation; accepted for interface "
                              "compatibility)")
        if name in ("sample", "eval", "routes", "estimate-space"):
            cmd.add_argument("--checkpoint", default=None,
                             help="checkpoint directory (defaults to the "
                                  "config output directory)")
        if name == "gradcheck":
            cmd.add_argument("--gradcheck-seeds", type=int, default=20)
        cmd.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ChemError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
