"""Experience replay with per-transition leniency or hysteretic-rate metadata."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from utils import get_logger

logger = get_logger("replay")

META_NONE = "none"
META_LENIENCY = "leniency"
META_BETA = "beta"
META_KINDS = (META_NONE, META_LENIENCY, META_BETA)


class ReplayError(ValueError):
    """Metadata kind mismatch or not enough stored transitions."""


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    meta: Optional[float] = None
    meta_kind: str = META_NONE


@dataclass
class ReplayBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    meta: np.ndarray
    seqs: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def shdqn_schedule(length: int, beta_n: float = 0.9, decay: float = 0.99,
                   floor: float = 0.4) -> np.ndarray:
    """Entry j is the rate of a transition j steps before the episode's last one."""
    j = np.arange(max(length, 1), dtype=np.float64)
    return np.maximum(floor, beta_n * np.power(decay, j))


class ReplayMemory:
    """Fixed-capacity ring buffer, sampled uniformly with replacement."""

    def __init__(self, capacity: int = 250000, meta_kind: str = META_NONE,
                 seed: Optional[int] = None):
        if capacity < 1:
            raise ValueError("replay capacity must be at least 1")
        if meta_kind not in META_KINDS:
            raise ValueError(f"unknown meta kind {meta_kind!r}")
        self.capacity = capacity
        self.meta_kind = meta_kind
        self.rng = np.random.default_rng(seed)
        self.inserted = 0
        self._cursor = 0
        self._size = 0
        self._obs_shape = None

    def __len__(self) -> int:
        return self._size

    def _allocate(self, obs_shape) -> None:
        self._obs_shape = tuple(obs_shape)
        self._states = np.zeros((self.capacity,) + self._obs_shape, dtype=np.float32)
        self._next_states = np.zeros((self.capacity,) + self._obs_shape, dtype=np.float32)
        self._actions = np.zeros(self.capacity, dtype=np.int64)
        self._rewards = np.zeros(self.capacity, dtype=np.float64)
        self._terminals = np.zeros(self.capacity, dtype=bool)
        self._meta = np.zeros(self.capacity, dtype=np.float64)
        self._seqs = np.zeros(self.capacity, dtype=np.int64)

    def insert(self, t: Transition) -> None:
        if t.meta_kind != self.meta_kind:
            raise ReplayError(f"{t.meta_kind} transition inserted into a {self.meta_kind} memory")
        if self.meta_kind != META_NONE and t.meta is None:
            raise ReplayError(f"{self.meta_kind} transition is missing its metadata value")
        state = np.asarray(t.state, dtype=np.float32)
        if self._obs_shape is None:
            self._allocate(state.shape)
        elif state.shape != self._obs_shape:
            raise ReplayError(f"state shape {state.shape} differs from stored {self._obs_shape}")

        i = self._cursor
        self._states[i] = state
        self._next_states[i] = t.next_state
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._terminals[i] = t.terminal
        self._meta[i] = 0.0 if t.meta is None else t.meta
        self._seqs[i] = self.inserted

        self.inserted += 1
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, n: int, rng: Optional[np.random.Generator] = None) -> ReplayBatch:
        if n < 1:
            raise ReplayError(f"sample size must be positive, got {n}")
        if self._size == 0:
            raise ReplayError("cannot sample from an empty memory")
        rng = rng if rng is not None else self.rng
        idx = rng.integers(0, self._size, size=n)
        return ReplayBatch(
            states=self._states[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx],
            terminals=self._terminals[idx],
            meta=self._meta[idx],
            seqs=self._seqs[idx],
        )

    def sequence_numbers(self) -> np.ndarray:
        """Insertion numbers of the stored transitions, oldest first."""
        if self._size < self.capacity:
            return self._seqs[:self._size].copy()
        return np.roll(self._seqs, -self._cursor)

    def dump(self, filepath: str) -> None:
        """Debug dump: a JSON header line followed by little-endian float64 columns."""
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        order = np.argsort(self._seqs[:self._size]) if self._size else np.array([], dtype=np.int64)
        header = {"capacity": self.capacity, "size": self._size, "meta_kind": self.meta_kind,
                  "obs_shape": list(self._obs_shape or ()), "dtype": "<f8",
                  "columns": ["seq", "action", "reward", "terminal", "meta", "state", "next_state"]}
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("utf-8"))
            if not self._size:
                return
            for column in (self._seqs, self._actions, self._rewards, self._terminals, self._meta):
                f.write(column[:self._size][order].astype("<f8").tobytes())
            f.write(self._states[:self._size][order].astype("<f8").tobytes())
            f.write(self._next_states[:self._size][order].astype("<f8").tobytes())


@dataclass
class EpisodeQueue:
    """Transitions of the episode in progress, held back until it ends."""
    transitions: List[Transition] = field(default_factory=list)
    flushes: int = 0

    def push(self, t: Transition) -> None:
        self.transitions.append(t)

    def __len__(self) -> int:
        return len(self.transitions)


def flush_episode(queue: EpisodeQueue, memory: ReplayMemory,
                  schedule: Optional[Sequence[float]] = None,
                  floor: Optional[float] = None) -> List[float]:
    """Move the queued episode into replay, tagging rates from the terminal end backwards.

    Returns the rates assigned (empty without a schedule).
    """
    n = len(queue.transitions)
    rates: List[float] = []
    if schedule is not None and len(schedule) == 0:
        raise ValueError("rate schedule must not be empty")
    for t, transition in enumerate(queue.transitions):
        if schedule is not None:
            distance = n - 1 - t
            if distance < len(schedule):
                rate = float(schedule[distance])
            else:
                rate = float(schedule[-1] if floor is None else floor)
            rates.append(rate)
            transition = replace(transition, meta=rate, meta_kind=META_BETA)
        memory.insert(transition)
    queue.transitions = []
    queue.flushes += 1
    return rates
