"""Runs two independent learners on a CMOTP layout and records their metrics."""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules.agents import Agent, LenientAgent, make_agent
from modules.experiment import ExperimentConfig
from modules.gridworld import CMOTPEnv, Layout, load_layout
from modules.network import NetworkSpec, NonFiniteError, qnet_spec, tiny_spec
from modules.oracles import bfs_optimal_steps
from modules.state_hashing import SIMHASH, StateHasher
from utils import CODE_VERSION, calculate_percentage, get_logger, save_state_to_json

logger = get_logger("harness")

EPISODE_COLUMNS = ["run_id", "episode", "steps", "reward", "coordinated_pct", "explore_level", "wall_ms"]
TEMPERATURE_COLUMNS = ["run_id", "episode", "agent", "search_mean", "transport_mean", "nu"]
OPTIMAL, SUBOPTIMAL, NONE = "optimal", "suboptimal", "none"
VERDICT_THRESHOLD = 0.9


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    reward: float
    coordinated_steps: int
    attached_steps: int
    explore_level: float
    delivered_to: Optional[str] = None
    timed_out: bool = False
    wall_ms: float = 0.0

    @property
    def coordinated_pct(self) -> Optional[float]:
        return coordinated_step_fraction(self)


def coordinated_step_fraction(record: EpisodeRecord) -> Optional[float]:
    """Share of attached-phase steps that moved the goods; None without an attached phase."""
    if record.attached_steps == 0:
        return None
    return calculate_percentage(record.coordinated_steps, record.attached_steps)


@dataclass
class PolicyVerdict:
    verdict: str
    trials: int
    step_cap: int
    optimal_steps: Optional[int]
    rollouts: List[Tuple[int, Optional[str]]] = field(default_factory=list)

    @property
    def mean_steps(self) -> Optional[float]:
        if not self.rollouts:
            return None
        return float(np.mean([steps for steps, _ in self.rollouts]))


@dataclass
class RunResult:
    run_id: str
    seed: int
    records: List[EpisodeRecord] = field(default_factory=list)
    spe: Optional[float] = None
    csp: Optional[float] = None
    spr: int = 0
    delivery_rate: Optional[float] = None
    converged_policy: str = NONE
    policy: Optional[PolicyVerdict] = None
    sync_steps: List[List[int]] = field(default_factory=list)
    temperature_rows: List[Dict[str, Any]] = field(default_factory=list)
    run_dir: Optional[str] = None


def records_frame(run_id: str, records: Sequence[EpisodeRecord], record_wall_time: bool = False) -> pd.DataFrame:
    rows = [{
        "run_id": run_id,
        "episode": r.episode,
        "steps": r.steps,
        "reward": r.reward,
        "coordinated_pct": r.coordinated_pct,
        "explore_level": r.explore_level,
        "wall_ms": r.wall_ms if record_wall_time else 0,
    } for r in records]
    return pd.DataFrame(rows, columns=EPISODE_COLUMNS)


def metrics_from_frame(frame: pd.DataFrame, window: int = 100) -> Dict[str, Any]:
    """SPE and CSP over the final `window` episodes, SPR over the whole run."""
    if frame.empty:
        return {"spe": None, "csp": None, "spr": 0}
    tail = frame.tail(window)
    coordinated = pd.to_numeric(tail["coordinated_pct"], errors="coerce").dropna()
    return {
        "spe": float(tail["steps"].mean()),
        "csp": float(coordinated.mean()) if len(coordinated) else None,
        "spr": int(frame["steps"].sum()),
    }


def recompute_metrics(episodes_csv: str, window: int = 100) -> Dict[str, Any]:
    frame = pd.read_csv(episodes_csv, float_precision="round_trip")
    return metrics_from_frame(frame, window)


def network_spec_for(config: ExperimentConfig, obs_shape: Tuple[int, int], n_actions: int = 5) -> NetworkSpec:
    net = config.network
    if net.kind == "tiny":
        return tiny_spec(obs_shape, n_actions, hidden=net.tiny_hidden)
    return qnet_spec(obs_shape, n_actions, conv_channels=tuple(net.conv_channels), dense=net.dense)


def _child_seeds(seed: int, count: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def classify_policy(agents: Sequence[Agent], env: CMOTPEnv, trials: int,
                    optimal_steps: Optional[int] = None, seed: int = 0) -> PolicyVerdict:
    """Greedy rollouts capped at twice the optimal solution length.

    optimal: at least 90% of rollouts deliver to the best-expectation dropzone.
    suboptimal: at least 90% deliver somewhere, but not optimal.
    """
    if optimal_steps is None:
        optimal_steps = bfs_optimal_steps(env.layout)
    cap = env.step_limit if optimal_steps is None else min(env.step_limit, 2 * optimal_steps)
    best_zone = env.layout.best_zone()
    dynamics_seed, noise_seed = _child_seeds(seed, 2)
    rng = np.random.default_rng(dynamics_seed)
    noise_rng = np.random.default_rng(noise_seed)

    rollouts: List[Tuple[int, Optional[str]]] = []
    for _ in range(trials):
        for agent in agents:
            agent.begin_episode()
        state = env.reset()
        while not state.terminal and state.steps_taken < cap:
            obs = env.render(state, rng=noise_rng).tensor
            a1 = agents[0].select_action(obs, greedy=True)
            a2 = agents[1].select_action(obs, greedy=True)
            state, _, _ = env.step(state, a1, a2, rng=rng)
        rollouts.append((state.steps_taken, state.delivered_to))

    if trials == 0:
        return PolicyVerdict(NONE, 0, cap, optimal_steps)
    best = sum(1 for _, zone in rollouts if zone == best_zone) / trials
    delivered = sum(1 for _, zone in rollouts if zone is not None) / trials
    if best >= VERDICT_THRESHOLD:
        verdict = OPTIMAL
    elif delivered >= VERDICT_THRESHOLD:
        verdict = SUBOPTIMAL
    else:
        verdict = NONE
    return PolicyVerdict(verdict, trials, cap, optimal_steps, rollouts)


class TrainingHarness:
    """One seeded run: two learners, one environment, one shared state hasher."""

    def __init__(self, config: ExperimentConfig, layout: Optional[Layout] = None,
                 agents: Optional[Sequence[Agent]] = None):
        config.validate()
        self.config = config
        self.layout = layout if layout is not None else load_layout(config.env.layout)
        self.seed = config.run.seed
        self.run_id = f"{config.digest()}-s{self.seed}"
        env_seed, agent1_seed, agent2_seed, hash_seed, self.eval_seed = _child_seeds(self.seed, 5)

        env_cfg = config.env
        self.env = CMOTPEnv(self.layout, slippery=env_cfg.slippery,
                            slip_probability=env_cfg.slip_probability, noisy=env_cfg.noisy,
                            step_limit=env_cfg.step_limit, seed=env_seed)
        obs_shape = self.layout.shape

        if agents is None:
            spec = network_spec_for(config, obs_shape)
            agents = [make_agent(config.agent, spec, index=i, seed=s, step_limit=env_cfg.step_limit)
                      for i, s in enumerate((agent1_seed, agent2_seed))]
        self.agents = list(agents)

        self.hasher: Optional[StateHasher] = None
        if any(isinstance(agent, LenientAgent) for agent in self.agents):
            h = config.hashing
            self.hasher = StateHasher(
                h.scheme, obs_shape=obs_shape, bits=h.bits, code_size=h.code_size,
                projection_seed=h.projection_seed, warmup_states=h.autoencoder_warmup_states,
                epochs=h.autoencoder_epochs, batch_size=h.autoencoder_batch_size,
                learning_rate=h.autoencoder_learning_rate, binarization_noise=h.binarization_noise,
                conv_channels=tuple(h.conv_channels), dense=h.dense, seed=hash_seed)

    def _key(self, obs: np.ndarray):
        if self.hasher is None or not self.hasher.ready:
            return None
        return self.hasher.key(obs)

    def _warm_up(self, obs: np.ndarray) -> None:
        if self.hasher is not None and not self.hasher.ready and self.hasher.record(obs):
            self.hasher.fit_and_freeze()

    def run_episode(self, episode: int) -> EpisodeRecord:
        env = self.env
        started = time.perf_counter()
        for agent in self.agents:
            agent.begin_episode()

        state = env.reset()
        obs = env.render(state).tensor
        self._warm_up(obs)
        key = self._key(obs)
        reward = 0.0
        attached_steps = coordinated_steps = 0

        while not state.terminal:
            a1 = self.agents[0].select_action(obs, key)
            a2 = self.agents[1].select_action(obs, key)
            next_state, reward, _ = env.step(state, a1, a2)
            next_obs = env.render(next_state).tensor
            self._warm_up(next_obs)
            next_key = self._key(next_obs)

            if state.attached:
                attached_steps += 1
                coordinated_steps += int(next_state.goods_moved)

            delivered = next_state.delivered_to is not None
            for agent, action in zip(self.agents, (a1, a2)):
                agent.observe(obs, action, reward, next_obs, delivered, key=key,
                              next_key=next_key, attached=state.attached)
            for agent in self.agents:
                agent.learn_step()

            state, obs, key = next_state, next_obs, next_key

        completed = state.delivered_to is not None
        for agent in self.agents:
            agent.end_episode(completed)

        return EpisodeRecord(
            episode=episode,
            steps=state.steps_taken,
            reward=float(reward),
            coordinated_steps=coordinated_steps,
            attached_steps=attached_steps,
            explore_level=float(np.mean([a.episode_explore_level() for a in self.agents])),
            delivered_to=state.delivered_to,
            timed_out=state.timed_out,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )

    def _temperature_rows(self, episode: int) -> List[Dict[str, Any]]:
        rows = []
        for agent in self.agents:
            if isinstance(agent, LenientAgent):
                search, transport = agent.phase_temperatures()
                rows.append({"run_id": self.run_id, "episode": episode, "agent": agent.index + 1,
                             "search_mean": search, "transport_mean": transport, "nu": agent.table.nu})
        return rows

    def run(self) -> RunResult:
        """Train for the configured episode budget, evaluate greedily and write the run directory."""
        cfg = self.config.run
        result = RunResult(run_id=self.run_id, seed=self.seed)
        logger.info(f"Run {self.run_id}: {self.config.agent.algorithm} on {self.layout.name}, "
                    f"{cfg.episodes} episodes")

        for episode in range(cfg.episodes):
            try:
                record = self.run_episode(episode)
            except NonFiniteError as e:
                logger.error(f"Run {self.run_id} aborted in episode {episode}: {e}")
                raise
            result.records.append(record)
            result.temperature_rows.extend(self._temperature_rows(episode))
            logger.debug(f"Episode {episode}: {record.steps} steps, reward {record.reward}, "
                         f"explore {record.explore_level:.3f}")
            if cfg.log_every and (episode + 1) % cfg.log_every == 0:
                window = result.records[-cfg.log_every:]
                delivered = sum(1 for r in window if r.delivered_to is not None)
                logger.info(f"Run {self.run_id}: episode {episode + 1}/{cfg.episodes}, "
                            f"mean steps {np.mean([r.steps for r in window]):.1f}, "
                            f"delivered {delivered}/{len(window)}")

        frame = records_frame(self.run_id, result.records, cfg.record_wall_time)
        metrics = metrics_from_frame(frame, cfg.metrics_window)
        result.spe, result.csp, result.spr = metrics["spe"], metrics["csp"], metrics["spr"]
        tail = result.records[-cfg.metrics_window:]
        if tail:
            result.delivery_rate = sum(1 for r in tail if r.delivered_to is not None) / len(tail)
        result.sync_steps = [list(getattr(agent, "sync_steps", [])) for agent in self.agents]

        if cfg.eval_trials > 0 and result.records:
            result.policy = classify_policy(self.agents, self.env, cfg.eval_trials, seed=self.eval_seed)
            result.converged_policy = result.policy.verdict

        if cfg.output_dir:
            self.write_outputs(result, frame)
        logger.info(f"Run {self.run_id} finished: SPE={result.spe}, CSP={result.csp}, "
                    f"SPR={result.spr}, policy={result.converged_policy}")
        return result

    def write_outputs(self, result: RunResult, frame: pd.DataFrame) -> str:
        run_dir = Path(self.config.run.output_dir) / self.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(str(run_dir / "config.yaml"))
        save_state_to_json({
            "run_id": self.run_id,
            "seed": self.seed,
            "config_digest": self.config.digest(),
            "code_version": CODE_VERSION,
            "layout": self.layout.name,
            "obs_shape": list(self.layout.shape),
            "hashing": self.hasher.describe() if self.hasher else None,
            "algorithm": self.config.agent.algorithm,
        }, str(run_dir / "metadata.json"))

        frame.to_csv(run_dir / "episodes.csv", index=False)
        if result.temperature_rows:
            pd.DataFrame(result.temperature_rows, columns=TEMPERATURE_COLUMNS).to_csv(
                run_dir / "temperatures.csv", index=False)

        if self.config.run.save_checkpoints:
            for agent in self.agents:
                agent.save_checkpoint(str(run_dir / "checkpoints" / f"agent{agent.index + 1}"))

        policy = result.policy
        pd.DataFrame([{
            "run_id": self.run_id,
            "seed": self.seed,
            "algorithm": self.config.agent.algorithm,
            "episodes": len(result.records),
            "spe": result.spe,
            "csp": result.csp,
            "spr": result.spr,
            "delivery_rate": result.delivery_rate,
            "converged_policy": result.converged_policy,
            "eval_trials": policy.trials if policy else 0,
            "eval_mean_steps": policy.mean_steps if policy else None,
            "target_syncs": sum(len(s) for s in result.sync_steps),
        }]).to_csv(run_dir / "summary.csv", index=False)

        result.run_dir = str(run_dir)
        logger.info(f"Run outputs written to {run_dir}")
        return str(run_dir)


def run(config: ExperimentConfig, layout: Optional[Layout] = None,
        agents: Optional[Sequence[Agent]] = None) -> RunResult:
    return TrainingHarness(config, layout=layout, agents=agents).run()
