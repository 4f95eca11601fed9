"""Independent learners: Double-DQN and its optimistic variants.

All learners share the Double-DQN target and differ only in how a sampled
transition with a negative TD error is weighted:

    ddqn   full weight
    hdqn   constant hysteretic ratio beta
    shdqn  per-transition beta stored when the episode is flushed
    ldqn   kept iff a fresh uniform draw exceeds the stored leniency
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.leniency import EpisodeTrace, TemperatureTable, build_tds, lenient_weights
from modules.network import Network, NetworkSpec, make_optimizer
from modules.replay import (META_BETA, META_LENIENCY, META_NONE, EpisodeQueue, ReplayBatch, ReplayMemory,
                            Transition, flush_episode, shdqn_schedule)
from modules.state_hashing import StateKey
from utils import ConfigError, get_logger

logger = get_logger("agents")

ALGORITHMS = ("ddqn", "hdqn", "shdqn", "ldqn")
EXPLORATIONS = ("egreedy", "tbar")
TEMPERATURE_DECAYS = ("tds", "atf")


@dataclass
class AgentConfig:
    algorithm: str = "ldqn"
    gamma: float = 0.95
    learning_rate: float = 0.0001
    optimizer: str = "adam"
    batch_size: int = 32
    replay_capacity: int = 250000
    replay_warmup: int = 5000
    sync_period: int = 5000
    learn_every: int = 1
    hysteretic_beta: float = 0.5
    exploration: str = "egreedy"
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.999
    epsilon_min: float = 0.05
    xi: float = 0.5
    max_temperature: float = 1.0
    leniency_k: float = 2.0
    temperature_decay: str = "tds"
    tds_rho: float = -0.01
    tds_d: float = 0.95
    nu: float = 1.0
    mu: float = 0.999
    atf_upsilon: float = 0.4
    atf_beta: float = 0.9
    shdqn_beta_n: float = 0.9
    shdqn_decay: float = 0.99
    shdqn_floor: float = 0.4

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("agent.algorithm", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.exploration not in EXPLORATIONS:
            raise ConfigError("agent.exploration", f"must be one of {EXPLORATIONS}")
        if self.exploration == "tbar" and self.algorithm != "ldqn":
            raise ConfigError("agent.exploration", "tbar exploration reads temperatures and needs ldqn")
        if self.temperature_decay not in TEMPERATURE_DECAYS:
            raise ConfigError("agent.temperature_decay", f"must be one of {TEMPERATURE_DECAYS}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("agent.gamma", "must be in (0, 1]")
        if not 0 < self.hysteretic_beta <= 1:
            raise ConfigError("agent.hysteretic_beta", "is a ratio of the learning rate and must be in (0, 1]")
        if self.xi <= 0:
            raise ConfigError("agent.xi", "must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("agent.learning_rate", "must be positive")
        for name in ("batch_size", "replay_capacity", "sync_period", "learn_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"agent.{name}", "must be at least 1")
        if not 0 < self.epsilon_min <= self.epsilon_start <= 1:
            raise ConfigError("agent.epsilon_start", "need 0 < epsilon_min <= epsilon_start <= 1")
        if not 0 <= self.atf_upsilon <= 1:
            raise ConfigError("agent.atf_upsilon", "must be in [0, 1]")
        if not 0 < self.shdqn_floor <= self.shdqn_beta_n <= 1:
            raise ConfigError("agent.shdqn_floor", "need 0 < floor <= beta_n <= 1")


class Agent:
    """Behaviour shared by learners and scripted players."""

    kind = "agent"

    def __init__(self, index: int = 0):
        self.index = index
        self.last_explore_level = 0.0

    def begin_episode(self) -> None:
        pass

    def select_action(self, obs: np.ndarray, key: Optional[StateKey] = None, greedy: bool = False) -> int:
        raise NotImplementedError

    def observe(self, obs, action, reward, next_obs, terminal, key=None, next_key=None,
                attached: bool = False) -> None:
        pass

    def learn_step(self) -> Optional[float]:
        return None

    def end_episode(self, completed: bool) -> None:
        pass

    def episode_explore_level(self) -> float:
        return 0.0

    def save_checkpoint(self, directory: str) -> None:
        raise NotImplementedError


class ScriptedAgent(Agent):
    """Replays one side of a fixed joint plan, then stays put."""

    kind = "scripted"

    def __init__(self, plan: Sequence[Tuple[int, int]], index: int = 0):
        super().__init__(index)
        self.plan = [tuple(int(a) for a in joint) for joint in plan]
        self._cursor = 0

    def begin_episode(self) -> None:
        self._cursor = 0

    def select_action(self, obs, key=None, greedy=False) -> int:
        if self._cursor >= len(self.plan):
            return 0
        action = self.plan[self._cursor][self.index]
        self._cursor += 1
        return action

    def save_checkpoint(self, directory: str) -> None:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "agent.json", "w") as f:
            json.dump({"kind": self.kind, "index": self.index, "plan": self.plan}, f, indent=2)


class DDQNAgent(Agent):
    kind = "ddqn"
    meta_kind = META_NONE

    def __init__(self, config: AgentConfig, spec: NetworkSpec, index: int = 0,
                 seed: Optional[int] = None, step_limit: int = 10000):
        super().__init__(index)
        config.validate()
        self.config = config
        self.step_limit = step_limit
        policy_seed, replay_seed, net_seed = np.random.SeedSequence(seed).spawn(3)
        self.rng = np.random.default_rng(policy_seed)
        self.net = Network(spec, seed=int(net_seed.generate_state(1)[0]))
        self.n_actions = int(self.net.output_shape[-1])
        self.optimizer = make_optimizer(config.optimizer, self.net.size, config.learning_rate)
        self.memory = ReplayMemory(config.replay_capacity, self.meta_kind, seed=replay_seed)
        self.epsilon = config.epsilon_start
        self.learn_steps = 0
        self.env_steps = 0
        self.sync_steps: List[int] = []
        self.empty_batches = 0
        self.skipped_updates = 0
        self._explore_total = 0.0
        self._explore_count = 0

    def begin_episode(self) -> None:
        self._explore_total = 0.0
        self._explore_count = 0

    def explore_probability(self, key: Optional[StateKey]) -> float:
        return self.epsilon

    def select_action(self, obs: np.ndarray, key: Optional[StateKey] = None, greedy: bool = False) -> int:
        """Greedy argmax (lowest index on ties) or a uniformly random action."""
        if not greedy:
            p = self.explore_probability(key)
            self.last_explore_level = p
            self._explore_total += p
            self._explore_count += 1
            if self.rng.random() < p:
                return int(self.rng.integers(self.n_actions))
        return int(np.argmax(self.net.q_values(obs)[0]))

    def episode_explore_level(self) -> float:
        if not self._explore_count:
            return self.epsilon
        return self._explore_total / self._explore_count

    def _transition(self, obs, action, reward, next_obs, terminal, key) -> Transition:
        return Transition(obs, int(action), float(reward), next_obs, bool(terminal))

    def observe(self, obs, action, reward, next_obs, terminal, key=None, next_key=None,
                attached: bool = False) -> None:
        self.env_steps += 1
        self.memory.insert(self._transition(obs, action, reward, next_obs, terminal, key))

    def compute_targets(self, rewards: np.ndarray, next_states: np.ndarray,
                        terminals: np.ndarray) -> np.ndarray:
        """r + gamma * Q_target(s', argmax_a Q_online(s', a)); r alone for terminal transitions."""
        online = self.net.q_values(next_states)
        best = np.argmax(online, axis=1)
        bootstrap = self.net.q_values(next_states, target=True)[np.arange(len(best)), best]
        return np.where(terminals, rewards, rewards + self.config.gamma * bootstrap)

    def compute_target(self, transition: Transition) -> float:
        targets = self.compute_targets(np.array([transition.reward]),
                                       np.asarray(transition.next_state)[None],
                                       np.array([transition.terminal]))
        return float(targets[0])

    def sample_weights(self, delta: np.ndarray, batch: ReplayBatch) -> np.ndarray:
        return np.ones_like(delta)

    def train_on(self, batch: ReplayBatch) -> float:
        """One gradient step on a batch; returns the loss (0.0 for a fully masked batch)."""
        targets = self.compute_targets(batch.rewards, batch.next_states, batch.terminals)
        result = self.net.masked_loss_and_grad(batch.states, batch.actions, targets,
                                               lambda delta: self.sample_weights(delta, batch))
        if result.empty:
            self.empty_batches += 1
            logger.debug(f"Agent {self.index}: every sample masked at learn step {self.learn_steps + 1}")
        elif not self.optimizer.step(self.net.theta, result.grad):
            self.skipped_updates += 1
        self.learn_steps += 1
        self.net.train_steps = self.learn_steps
        if self.learn_steps % self.config.sync_period == 0:
            self.net.sync_target()
            self.sync_steps.append(self.learn_steps)
            logger.debug(f"Agent {self.index}: target synced at learn step {self.learn_steps}")
        return result.loss

    def learn_step(self) -> Optional[float]:
        """No-op until replay holds `replay_warmup` transitions."""
        if self.env_steps % self.config.learn_every:
            return None
        if len(self.memory) < max(self.config.replay_warmup, self.config.batch_size, 1):
            return None
        return self.train_on(self.memory.sample(self.config.batch_size))

    def end_episode(self, completed: bool) -> None:
        self.epsilon = max(self.config.epsilon_min, self.epsilon * self.config.epsilon_decay)

    def exploration_state(self) -> Dict[str, Any]:
        return {"epsilon": self.epsilon, "learn_steps": self.learn_steps, "env_steps": self.env_steps}

    def save_checkpoint(self, directory: str) -> None:
        """Network snapshot, exploration state and (for ldqn) the temperature dump."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        self.net.save(str(path / "network.bin"), extra={"algorithm": self.kind})
        meta = {
            "kind": "learner",
            "algorithm": self.kind,
            "index": self.index,
            "obs_shape": list(self.net.spec.input_shape[-2:]),
            "config": asdict(self.config),
            "exploration": self.exploration_state(),
        }
        with open(path / "agent.json", "w") as f:
            json.dump(meta, f, indent=2)


class HysteresticAgent(DDQNAgent):
    kind = "hdqn"

    def sample_weights(self, delta, batch):
        return np.where(delta > 0, 1.0, self.config.hysteretic_beta)


class ScheduledHysteresticAgent(DDQNAgent):
    """Episodes are queued and flushed at their end with rates growing towards the terminal step."""

    kind = "shdqn"
    meta_kind = META_BETA

    def __init__(self, config: AgentConfig, spec: NetworkSpec, index: int = 0,
                 seed: Optional[int] = None, step_limit: int = 10000):
        super().__init__(config, spec, index=index, seed=seed, step_limit=step_limit)
        self.schedule = shdqn_schedule(step_limit, config.shdqn_beta_n,
                                       config.shdqn_decay, config.shdqn_floor)
        self.queue = EpisodeQueue()

    def observe(self, obs, action, reward, next_obs, terminal, key=None, next_key=None,
                attached: bool = False) -> None:
        self.env_steps += 1
        self.queue.push(Transition(obs, int(action), float(reward), next_obs, bool(terminal)))

    def end_episode(self, completed: bool) -> None:
        flush_episode(self.queue, self.memory, self.schedule, floor=self.config.shdqn_floor)
        super().end_episode(completed)

    def sample_weights(self, delta, batch):
        return np.where(delta > 0, 1.0, batch.meta)


class LenientAgent(DDQNAgent):
    """Stores the leniency of each transition at insertion time; cools temperatures by TDS or ATF."""

    kind = "ldqn"
    meta_kind = META_LENIENCY

    def __init__(self, config: AgentConfig, spec: NetworkSpec, index: int = 0,
                 seed: Optional[int] = None, step_limit: int = 10000):
        super().__init__(config, spec, index=index, seed=seed, step_limit=step_limit)
        self.table = TemperatureTable(k=config.leniency_k, max_temperature=config.max_temperature,
                                      nu=config.nu, mu=config.mu)
        self.tds = build_tds(config.tds_rho, config.tds_d, step_limit)
        self.trace = EpisodeTrace()
        self.search_visits: List[Tuple[StateKey, int]] = []
        self.transport_visits: List[Tuple[StateKey, int]] = []

    def begin_episode(self) -> None:
        super().begin_episode()
        self.trace.clear()
        self.search_visits = []
        self.transport_visits = []

    def explore_probability(self, key: Optional[StateKey]) -> float:
        if self.config.exploration == "egreedy":
            return self.epsilon
        mean = self.config.max_temperature if key is None else self.table.mean_temperature(key, self.n_actions)
        return mean ** self.config.xi

    def _transition(self, obs, action, reward, next_obs, terminal, key) -> Transition:
        if key is None:
            leniency = self.table.fresh_leniency()
        else:
            leniency = self.table.leniency(key, action)
        return Transition(obs, int(action), float(reward), next_obs, bool(terminal),
                          meta=leniency, meta_kind=META_LENIENCY)

    def observe(self, obs, action, reward, next_obs, terminal, key=None, next_key=None,
                attached: bool = False) -> None:
        super().observe(obs, action, reward, next_obs, terminal, key=key)
        if key is None:
            return
        self.trace.append(key, action)
        (self.transport_visits if attached else self.search_visits).append((key, int(action)))
        if self.config.temperature_decay == "atf":
            successors = [] if next_key is None else [(next_key, a) for a in range(self.n_actions)]
            self.table.atf_decay(key, action, successors, terminal or next_key is None,
                                 self.config.atf_upsilon, self.config.atf_beta)

    def sample_weights(self, delta, batch):
        return lenient_weights(delta, batch.meta, self.rng)

    def end_episode(self, completed: bool) -> None:
        if self.config.temperature_decay == "tds":
            self.table.apply_tds(self.trace, self.tds, completed)
        else:
            self.table.close_episode()
        super().end_episode(completed)

    def phase_temperatures(self) -> Tuple[Optional[float], Optional[float]]:
        """Mean temperature of the pairs visited this episode before and after attachment."""
        return self.table.mean_of(self.search_visits), self.table.mean_of(self.transport_visits)

    def save_checkpoint(self, directory: str) -> None:
        super().save_checkpoint(directory)
        self.table.dump(str(Path(directory) / "temperatures.txt"))


AGENT_CLASSES = {
    "ddqn": DDQNAgent,
    "hdqn": HysteresticAgent,
    "shdqn": ScheduledHysteresticAgent,
    "ldqn": LenientAgent,
}


def make_agent(config: AgentConfig, spec: NetworkSpec, index: int = 0,
               seed: Optional[int] = None, step_limit: int = 10000) -> DDQNAgent:
    return AGENT_CLASSES[config.algorithm](config, spec, index=index, seed=seed, step_limit=step_limit)


class GreedyPolicy(Agent):
    """A restored learner network acting greedily."""

    kind = "learner"

    def __init__(self, net: Network, index: int = 0, meta: Optional[Dict[str, Any]] = None):
        super().__init__(index)
        self.net = net
        self.meta = meta or {}

    @property
    def obs_shape(self) -> Tuple[int, ...]:
        return tuple(self.net.spec.input_shape[-2:])

    def select_action(self, obs, key=None, greedy=True) -> int:
        return int(np.argmax(self.net.q_values(obs)[0]))


def load_checkpoint(directory: str) -> Agent:
    path = Path(directory)
    meta_path = path / "agent.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {meta_path}")
    with open(meta_path) as f:
        meta = json.load(f)
    if meta["kind"] == "scripted":
        return ScriptedAgent(meta["plan"], index=meta["index"])
    net, _ = Network.load(str(path / "network.bin"))
    return GreedyPolicy(net, index=meta["index"], meta=meta)
