"""Command-line entry point: train, sweep, eval and oracle commands.

Exit codes: 0 ok, 1 user error (config, missing file, dimension mismatch),
2 run fault (non-finite values or any unexpected failure during a run).
"""

import argparse
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from modules.agents import GreedyPolicy, ScriptedAgent, load_checkpoint
from modules.experiment import ExperimentConfig
from modules.gridworld import CMOTPEnv, LayoutParseError, RewardSpec, load_layout
from modules.harness import TrainingHarness, classify_policy
from modules.network import NonFiniteError
from modules.oracles import ONE_SHOT_ALGORITHMS, bfs_plan, one_shot_game
from utils import ConfigError, get_logger, load_state_from_json, setup_logging

logger = get_logger("main")

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_RUN_FAULT = 2

ROOT = Path(__file__).resolve().parent
DEFAULTS_PATH = ROOT / "config.yaml"

SWEEP_GRID = {
    "leniency_k": (1.0, 2.0, 3.0),
    "tds_d": (0.9, 0.95, 0.99),
    "xi": (0.25, 0.5, 1.0),
}

USER_ERRORS = (ConfigError, FileNotFoundError, LayoutParseError, ValueError)


def _init_logging(config: Optional[ExperimentConfig] = None) -> None:
    settings = config.logging if config is not None else {}
    setup_logging(settings.get("log_dir", "logs"), settings.get("level", "INFO"),
                  settings.get("console_enabled", True))


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Config file layered over the root defaults, then command-line overrides."""
    config_path = args.config or str(DEFAULTS_PATH)
    config = ExperimentConfig.load(config_path, defaults_path=str(DEFAULTS_PATH))
    return config.with_overrides(
        env__layout=getattr(args, "layout", None),
        agent__algorithm=getattr(args, "algo", None),
        agent__exploration=getattr(args, "exploration", None),
        agent__xi=getattr(args, "xi", None),
        agent__leniency_k=getattr(args, "k", None),
        agent__tds_d=getattr(args, "d", None),
        run__episodes=getattr(args, "episodes", None),
        run__seed=getattr(args, "seed", None),
        run__output_dir=getattr(args, "output_dir", None),
    )


def cmd_train(args: argparse.Namespace) -> int:
    try:
        config = load_experiment(args)
        _init_logging(config)
        harness = TrainingHarness(config)
    except USER_ERRORS as e:
        _init_logging()
        logger.error(f"Cannot start run: {e}")
        return EXIT_USER_ERROR

    try:
        result = harness.run()
    except NonFiniteError as e:
        logger.error(f"Run fault: {e}")
        return EXIT_RUN_FAULT
    except Exception as e:
        logger.exception(f"Run failed: {e}")
        return EXIT_RUN_FAULT

    print(f"run={result.run_id} episodes={len(result.records)} spe={result.spe} csp={result.csp} "
          f"spr={result.spr} policy={result.converged_policy} dir={result.run_dir}")
    return EXIT_OK


def _sweep_job(config_data: Dict[str, Any], resume: bool) -> Dict[str, Any]:
    config = ExperimentConfig.from_dict(config_data)
    agent = config.agent
    outcome = {"K": agent.leniency_k, "d": agent.tds_d, "xi": agent.xi, "seed": config.run.seed,
               "run_id": f"{config.digest()}-s{config.run.seed}", "policy": None, "spe": None, "csp": None,
               "delivery_rate": None, "error": None}
    summary_path = Path(config.run.output_dir) / outcome["run_id"] / "summary.csv"
    if resume and summary_path.exists():
        summary = pd.read_csv(summary_path).iloc[0]
        outcome["policy"] = str(summary["converged_policy"])
        for name in ("spe", "csp", "delivery_rate"):
            value = summary.get(name)
            outcome[name] = None if value is None or pd.isna(value) else float(value)
        outcome["resumed"] = True
        return outcome
    try:
        result = TrainingHarness(config).run()
        outcome.update(policy=result.converged_policy, spe=result.spe, csp=result.csp,
                       delivery_rate=result.delivery_rate)
    except Exception as e:
        outcome["error"] = f"{type(e).__name__}: {e}"
    return outcome


def sweep_configs(base: ExperimentConfig, runs: int, output_dir: str) -> List[ExperimentConfig]:
    """One config per (K, d, xi, run index); seeds are base seed + run index."""
    configs = []
    for k, d, xi in itertools.product(*SWEEP_GRID.values()):
        for index in range(runs):
            configs.append(base.with_overrides(agent__leniency_k=k, agent__tds_d=d, agent__xi=xi,
                                               run__seed=base.run.seed + index,
                                               run__output_dir=output_dir))
    return configs


def heatmap_frame(outcomes: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(outcomes)
    rows = []
    for (k, d, xi), cell in frame.groupby(["K", "d", "xi"], sort=True):
        finished = cell[cell["error"].isna()]
        optimal = int((finished["policy"] == "optimal").sum())
        rows.append({
            "K": k, "d": d, "xi": xi,
            "optimal_rate": optimal / len(finished) if len(finished) else float("nan"),
            "runs": len(finished),
            "failures": int(cell["error"].notna().sum()),
        })
    return pd.DataFrame(rows, columns=["K", "d", "xi", "optimal_rate", "runs", "failures"])


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        base = load_experiment(args)
        _init_logging(base)
        load_layout(base.env.layout)
    except USER_ERRORS as e:
        _init_logging()
        logger.error(f"Cannot start sweep: {e}")
        return EXIT_USER_ERROR

    sweep_dir = Path(args.sweep_dir or Path(base.run.output_dir) / "sweep")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    configs = sweep_configs(base, args.runs, str(sweep_dir))
    logger.info(f"Sweep: {len(configs)} runs over {len(configs) // max(args.runs, 1)} cells, "
                f"{args.jobs} job(s), output {sweep_dir}")

    outcomes: List[Dict[str, Any]] = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_job, c.to_dict(), args.resume) for c in configs]
            for future in as_completed(futures):
                outcomes.append(future.result())
    else:
        outcomes = [_sweep_job(c.to_dict(), args.resume) for c in configs]

    for outcome in outcomes:
        if outcome["error"]:
            logger.warning(f"Sweep run {outcome['run_id']} failed: {outcome['error']}")

    runs_frame = pd.DataFrame(outcomes).sort_values(["K", "d", "xi", "seed"])
    runs_frame.to_csv(sweep_dir / "runs.csv", index=False)
    heatmap = heatmap_frame(outcomes)
    heatmap.to_csv(sweep_dir / "heatmap.csv", index=False)
    failures = int(heatmap["failures"].sum())
    print(f"sweep cells={len(heatmap)} runs={len(outcomes)} failures={failures} "
          f"heatmap={sweep_dir / 'heatmap.csv'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _init_logging()
    try:
        checkpoint_dir = Path(args.checkpoints)
        config_path = checkpoint_dir.parent / "config.yaml"
        config = ExperimentConfig.load(str(config_path)) if config_path.exists() else ExperimentConfig()
        metadata = load_state_from_json(str(checkpoint_dir.parent / "metadata.json"))
        if metadata:
            logger.info(f"Evaluating run {metadata['run_id']} ({metadata['algorithm']}, trained on {metadata['layout']})")
        layout = load_layout(args.layout or config.env.layout)
        agents = [load_checkpoint(str(checkpoint_dir / f"agent{i}")) for i in (1, 2)]
        for agent in agents:
            if isinstance(agent, GreedyPolicy) and agent.obs_shape != layout.shape:
                raise ValueError(f"dimension mismatch: checkpoint expects {agent.obs_shape}, "
                                 f"layout {layout.name} is {layout.shape}")
    except USER_ERRORS as e:
        logger.error(f"Cannot evaluate: {e}")
        return EXIT_USER_ERROR

    env = CMOTPEnv(layout, slippery=config.env.slippery, slip_probability=config.env.slip_probability,
                   noisy=config.env.noisy, step_limit=config.env.step_limit)
    try:
        verdict = classify_policy(agents, env, args.trials, seed=args.seed)
    except Exception as e:
        logger.exception(f"Evaluation failed: {e}")
        return EXIT_RUN_FAULT

    for trial, (steps, zone) in enumerate(verdict.rollouts, start=1):
        print(f"trial={trial} steps={steps} dropzone={zone or '-'}")
    print(f"verdict={verdict.verdict} mean_steps={verdict.mean_steps} "
          f"optimal_steps={verdict.optimal_steps} cap={verdict.step_cap}")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    _init_logging()
    if args.oracle == "bfs":
        try:
            layout = load_layout(args.layout)
        except USER_ERRORS as e:
            logger.error(f"Cannot load layout: {e}")
            return EXIT_USER_ERROR
        plan = bfs_plan(layout, args.zone)
        if plan is None:
            print("unsolvable")
            return EXIT_OK
        if args.save_checkpoint:
            for index in (0, 1):
                ScriptedAgent(plan, index).save_checkpoint(str(Path(args.save_checkpoint) / f"agent{index + 1}"))
        print(len(plan))
        return EXIT_OK

    specs = [RewardSpec(((0.8, 1.0),)), RewardSpec(((1.0, 0.6), (0.4, 0.4)))]
    result = one_shot_game(specs, args.algorithm, runs=args.runs, seed=args.seed, episodes=args.episodes,
                          hysteretic_beta=args.hysteretic_beta)
    print(f"algorithm={args.algorithm} optimal_rate={result.optimal_rate:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Lenient and hysteretic multi-agent DQN experiments on CMOTP")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config layered over the root config.yaml")
        p.add_argument("--layout", help="layout file overriding env.layout")
        p.add_argument("--algo", choices=["ddqn", "hdqn", "shdqn", "ldqn"])
        p.add_argument("--exploration", choices=["egreedy", "tbar"])
        p.add_argument("--xi", type=float)
        p.add_argument("--k", type=float, help="leniency moderation factor K")
        p.add_argument("--d", type=float, help="TDS decay rate d")
        p.add_argument("--episodes", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")

    train = sub.add_parser("train", help="run one training run")
    run_flags(train)
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="K x d x xi grid of lenient runs")
    run_flags(sweep)
    sweep.add_argument("--runs", type=int, default=40, help="seeds per grid cell")
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--resume", action="store_true", help="skip runs whose summary already exists")
    sweep.add_argument("--sweep-dir", dest="sweep_dir")
    sweep.set_defaults(func=cmd_sweep)

    evaluate = sub.add_parser("eval", help="greedy rollouts of saved checkpoints")
    evaluate.add_argument("--checkpoints", required=True, help="directory holding agent1/ and agent2/")
    evaluate.add_argument("--layout")
    evaluate.add_argument("--trials", type=int, default=20)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.set_defaults(func=cmd_eval)

    oracle = sub.add_parser("oracle", help="reference solvers")
    oracle_sub = oracle.add_subparsers(dest="oracle", required=True)
    bfs = oracle_sub.add_parser("bfs", help="optimal joint step count of a layout")
    bfs.add_argument("--layout", required=True)
    bfs.add_argument("--zone", help="only count deliveries into this dropzone")
    bfs.add_argument("--save-checkpoint", dest="save_checkpoint",
                     help="write scripted agents replaying the plan")
    one_shot = oracle_sub.add_parser("one-shot", help="two-dropzone coordination game")
    one_shot.add_argument("--algorithm", choices=ONE_SHOT_ALGORITHMS, default="lenient")
    one_shot.add_argument("--runs", type=int, default=100)
    one_shot.add_argument("--episodes", type=int, default=20000)
    one_shot.add_argument("--seed", type=int, default=0)
    one_shot.add_argument("--hysteretic-beta", dest="hysteretic_beta", type=float, default=0.4,
                          help="negative-update ratio of the hysteretic learners")
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
