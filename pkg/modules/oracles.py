"""Reference solvers used to check the learners and the environment.

- breadth-first search over joint CMOTP states, driven by the real step()
- a tabular learner with the same four update rules as the deep agents
- a one-shot stochastic coordination game mirroring the two-dropzone choice
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from modules.gridworld import ACTION_COUNT, CMOTPEnv, EnvState, Layout, RewardSpec
from modules.leniency import EpisodeTrace, TemperatureTable, build_tds, lenient_accept
from modules.replay import shdqn_schedule
from modules.state_hashing import EXACT, StateKey
from utils import get_logger

logger = get_logger("oracles")

JointState = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int], bool]
JointAction = Tuple[int, int]

TABULAR_ALGORITHMS = ("ddqn", "hdqn", "shdqn", "ldqn")
ONE_SHOT_ALGORITHMS = ("lenient", "hysteretic", "maximum", "average")


def joint_state(state: EnvState) -> JointState:
    return (state.agent1, state.agent2, state.goods, state.attached)


def bfs_plan(layout: Layout, target_zone: Optional[str] = None) -> Optional[List[JointAction]]:
    """Shortest joint-action sequence from reset to a delivery (into `target_zone` if given).

    Returns None when no dropzone (or not the requested one) can be reached.
    """
    env = CMOTPEnv(layout, slippery=False, step_limit=2 ** 31 - 1, seed=0)
    rng = np.random.default_rng(0)
    start = env.reset()
    start_key = joint_state(start)
    parents: Dict[JointState, Tuple[Optional[JointState], Optional[JointAction]]] = {start_key: (None, None)}
    frontier = deque([start_key])

    def unwind(last: JointState, final_action: JointAction) -> List[JointAction]:
        plan = [final_action]
        node = last
        while parents[node][0] is not None:
            prev, action = parents[node]
            plan.append(action)
            node = prev
        plan.reverse()
        return plan

    while frontier:
        current = frontier.popleft()
        a1_pos, a2_pos, goods, attached = current
        base = EnvState(agent1=a1_pos, agent2=a2_pos, goods=goods, attached=attached)
        for a1 in range(ACTION_COUNT):
            for a2 in range(ACTION_COUNT):
                nxt, _, terminal = env.step(base, a1, a2, rng=rng)
                if terminal:
                    if nxt.delivered_to is not None and target_zone in (None, nxt.delivered_to):
                        return unwind(current, (a1, a2))
                    continue
                key = joint_state(nxt)
                if key not in parents:
                    parents[key] = (current, (a1, a2))
                    frontier.append(key)
    logger.debug(f"Layout {layout.name}: no plan reaches {target_zone or 'any dropzone'} "
                 f"({len(parents)} joint states explored)")
    return None


def reachable_states(layout: Layout) -> Set[JointState]:
    """Every non-terminal joint state reachable from reset with slipping disabled."""
    env = CMOTPEnv(layout, slippery=False, step_limit=2 ** 31 - 1, seed=0)
    rng = np.random.default_rng(0)
    start = joint_state(env.reset())
    seen = {start}
    frontier = deque([start])
    while frontier:
        a1_pos, a2_pos, goods, attached = frontier.popleft()
        base = EnvState(agent1=a1_pos, agent2=a2_pos, goods=goods, attached=attached)
        for a1 in range(ACTION_COUNT):
            for a2 in range(ACTION_COUNT):
                nxt, _, terminal = env.step(base, a1, a2, rng=rng)
                key = joint_state(nxt)
                if not terminal and key not in seen:
                    seen.add(key)
                    frontier.append(key)
    return seen


_optimum_cache: Dict[Tuple[Any, ...], Optional[int]] = {}


def _layout_signature(layout: Layout) -> Tuple[Any, ...]:
    return (layout.shape, layout.cells.tobytes(), layout.agent1_start, layout.agent2_start,
            layout.goods_start, tuple(sorted(layout.zone_ids.items())))


def bfs_optimal_steps(layout: Layout, target_zone: Optional[str] = None) -> Optional[int]:
    """Minimum joint steps to deliver, or None if the layout is unsolvable.

    Memoized on the grid contents.
    """
    key = (_layout_signature(layout), target_zone)
    if key not in _optimum_cache:
        plan = bfs_plan(layout, target_zone)
        _optimum_cache[key] = None if plan is None else len(plan)
    return _optimum_cache[key]


@dataclass
class ChainGame:
    """Deterministic chain: state i moves to i+1 on every action; the last step pays `rewards[a]`."""
    rewards: Tuple[float, ...] = (1.0, 0.5)
    length: int = 2

    @property
    def n_actions(self) -> int:
        return len(self.rewards)

    def step(self, state: int, action: int) -> Tuple[int, float, bool]:
        if state == self.length - 1:
            return state, float(self.rewards[action]), True
        return state + 1, 0.0, False

    def closed_form(self, gamma: float) -> np.ndarray:
        """Optimal Q-values: the final reward discounted back along the chain."""
        best = max(self.rewards)
        q = np.zeros((self.length, self.n_actions))
        q[-1] = self.rewards
        for s in range(self.length - 2, -1, -1):
            q[s] = gamma ** (self.length - 1 - s) * best
        return q


class TabularLearner:
    """Q-table updated with the same weighting rules the deep agents apply to negative errors."""

    def __init__(self, n_states: int, n_actions: int, algorithm: str = "ddqn", alpha: float = 0.1,
                 gamma: float = 0.95, hysteretic_beta: float = 0.5, k: float = 2.0,
                 tds_rho: float = -0.01, tds_d: float = 0.95, mu: float = 0.999,
                 step_limit: int = 100, rng: Optional[np.random.Generator] = None):
        if algorithm not in TABULAR_ALGORITHMS:
            raise ValueError(f"unknown tabular algorithm {algorithm!r}")
        self.algorithm = algorithm
        self.alpha = alpha
        self.gamma = gamma
        self.hysteretic_beta = hysteretic_beta
        self.q = np.zeros((n_states, n_actions))
        self.rng = rng if rng is not None else np.random.default_rng()
        self.table = TemperatureTable(k=k, mu=mu)
        self.tds = build_tds(tds_rho, tds_d, step_limit)
        self.trace = EpisodeTrace()

    @staticmethod
    def key(state: int) -> StateKey:
        return StateKey(int(state), EXACT)

    def leniency(self, state: int, action: int) -> float:
        return self.table.leniency(self.key(state), action)

    def weight(self, delta: float, meta: Optional[float]) -> float:
        if delta > 0 or self.algorithm == "ddqn":
            return 1.0
        if self.algorithm == "hdqn":
            return self.hysteretic_beta
        if self.algorithm == "shdqn":
            return float(meta)
        return float(lenient_accept(delta, meta, self.rng))

    def update(self, state: int, action: int, reward: float, next_state: int,
               terminal: bool, meta: Optional[float] = None) -> float:
        """Apply one update and return the TD error it was based on."""
        target = reward if terminal else reward + self.gamma * self.q[next_state, int(np.argmax(self.q[next_state]))]
        delta = target - self.q[state, action]
        self.q[state, action] += self.alpha * (self.weight(delta, meta) * delta)
        return delta

    def end_episode(self, completed: bool = True) -> None:
        if self.algorithm == "ldqn":
            self.table.apply_tds(self.trace, self.tds, completed)
        self.trace.clear()


def tabular_reference(game: ChainGame, algorithm: str, episodes: int, seed: int,
                      alpha: float = 0.1, gamma: float = 0.95, **learner_args) -> np.ndarray:
    """Learned Q-table of a tabular learner acting uniformly at random on the chain.

    Actions and leniency draws come from separate streams, so algorithms that
    never block an update follow the exact same trajectory.
    """
    action_seed, accept_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(action_seed)
    learner = TabularLearner(game.length, game.n_actions, algorithm, alpha=alpha, gamma=gamma,
                             rng=np.random.default_rng(accept_seed), step_limit=game.length, **learner_args)
    schedule = shdqn_schedule(game.length)
    for _ in range(episodes):
        state, terminal, steps = 0, False, []
        while not terminal:
            action = int(rng.integers(game.n_actions))
            next_state, reward, terminal = game.step(state, action)
            steps.append((state, action, reward, next_state, terminal))
            if algorithm != "shdqn":
                meta = None
                if algorithm == "ldqn":
                    meta = learner.leniency(state, action)
                    learner.trace.append(learner.key(state), action)
                learner.update(state, action, reward, next_state, terminal, meta)
            state = next_state
        if algorithm == "shdqn":
            n = len(steps)
            for t, step in enumerate(steps):
                learner.update(*step, meta=float(schedule[min(n - 1 - t, len(schedule) - 1)]))
        learner.end_episode(completed=True)
    return learner.q


def _sample_rewards(spec: RewardSpec, u: np.ndarray) -> np.ndarray:
    rewards = np.full(u.shape, spec.outcomes[-1][0], dtype=np.float64)
    cumulative = 0.0
    assigned = np.zeros(u.shape, dtype=bool)
    for reward, probability in spec.outcomes:
        cumulative += probability
        hit = (~assigned) & (u < cumulative)
        rewards[hit] = reward
        assigned |= hit
    return rewards


@dataclass
class OneShotResult:
    optimal_rate: float
    final_q: np.ndarray = field(repr=False)
    choices: np.ndarray = field(repr=False)


def one_shot_game(reward_specs: Sequence[RewardSpec], algorithm: str, runs: int = 100, seed: int = 0,
                  episodes: int = 20000, alpha: float = 5e-4, hysteretic_beta: float = 0.4,
                  k: float = 2.0, temperature_decay: float = 0.999) -> OneShotResult:
    """Two independent learners repeatedly pick a dropzone; only matching picks pay out.

    Action i stands for dropzone i. Every run is simulated in parallel and the
    rate of runs whose greedy joint choice is the highest-expectation action
    is returned.

    With the stochastic layout's rewards the hysteretic learner settles on
    the safe dropzone for ratios above roughly 0.41 and on the risky one below.
    """
    if algorithm not in ONE_SHOT_ALGORITHMS:
        raise ValueError(f"unknown one-shot algorithm {algorithm!r}")
    specs = list(reward_specs)
    n_actions = len(specs)
    best = int(np.argmax([spec.expected for spec in specs]))
    rng = np.random.default_rng(seed)
    q = np.zeros((runs, 2, n_actions))
    temps = np.ones((runs, 2, n_actions))
    run_idx = np.arange(runs)

    for _ in range(episodes):
        actions = rng.integers(0, n_actions, size=(runs, 2))
        u = rng.random(runs)
        reward = np.zeros(runs)
        coordinated = actions[:, 0] == actions[:, 1]
        for a, spec in enumerate(specs):
            mask = coordinated & (actions[:, 0] == a)
            if mask.any():
                reward[mask] = _sample_rewards(spec, u[mask])

        for agent in range(2):
            chosen = actions[:, agent]
            delta = reward - q[run_idx, agent, chosen]
            positive = delta > 0
            if algorithm == "lenient":
                leniency = 1.0 - np.exp(-k * temps[run_idx, agent, chosen])
                rate = np.where(positive | (rng.random(runs) > leniency), alpha, 0.0)
                temps[run_idx, agent, chosen] *= temperature_decay
            elif algorithm == "hysteretic":
                rate = np.where(positive, alpha, hysteretic_beta * alpha)
            elif algorithm == "maximum":
                rate = np.where(positive, alpha, 0.0)
            else:
                rate = np.full(runs, alpha)
            q[run_idx, agent, chosen] += rate * delta

    choices = np.argmax(q, axis=2)
    optimal = np.all(choices == best, axis=1)
    rate = float(np.mean(optimal))
    logger.info(f"One-shot game ({algorithm}, {runs} runs): optimal joint choice in {rate:.1%} of runs")
    return OneShotResult(rate, q, choices)
