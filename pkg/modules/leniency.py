"""Temperature bookkeeping for lenient learners.

A TemperatureTable maps (state key, action) pairs to temperatures in
(0, max_temperature]. Leniency is derived from the temperature on demand and
the temperatures are cooled either retroactively at episode end (TDS) or on
every visit by folding in the successor state's average temperature (ATF).
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from modules.state_hashing import StateHashingError, StateKey
from utils import get_logger

logger = get_logger("leniency")

Pair = Tuple[StateKey, int]


def leniency_value(temperature: float, k: float) -> float:
    """l = 1 - exp(-K * T)."""
    return 1.0 - math.exp(-k * temperature)


def lenient_accept(delta: float, leniency: float, rng: np.random.Generator) -> int:
    """Weight of a sample under the lenient rule: positive errors always pass,
    negative ones pass iff a fresh uniform draw exceeds the leniency."""
    if delta > 0:
        return 1
    return 1 if rng.random() > leniency else 0


def lenient_weights(deltas: np.ndarray, leniencies: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batch form of lenient_accept; draws only for the non-positive errors, in order."""
    deltas = np.asarray(deltas, dtype=np.float64)
    weights = np.ones_like(deltas)
    negative = deltas <= 0
    count = int(np.count_nonzero(negative))
    if count:
        weights[negative] = rng.random(count) > np.asarray(leniencies, dtype=np.float64)[negative]
    return weights


@dataclass(frozen=True)
class TdsSchedule:
    rho: float
    d: float
    betas: np.ndarray

    def __len__(self) -> int:
        return len(self.betas)

    def at(self, index: int) -> float:
        """Multiplier for the step `index` positions before the terminal one."""
        return float(self.betas[min(index, len(self.betas) - 1)])


def build_tds(rho: float, d: float, n: int) -> TdsSchedule:
    """Precompute beta_t = exp(rho * d**t) for t = 0..n-1."""
    if not rho < 0:
        raise ValueError(f"tds rho must be negative, got {rho}")
    if not 0 < d <= 1:
        raise ValueError(f"tds decay d must be in (0, 1], got {d}")
    if n < 1:
        raise ValueError(f"tds length must be at least 1, got {n}")
    t = np.arange(n, dtype=np.float64)
    betas = np.exp(rho * np.power(d, t))
    betas.setflags(write=False)
    return TdsSchedule(rho=rho, d=d, betas=betas)


@dataclass
class EpisodeTrace:
    """Ordered (state key, action) visits of the current episode."""
    visits: List[Pair] = field(default_factory=list)

    def append(self, key: StateKey, action: int) -> None:
        self.visits.append((key, int(action)))

    def clear(self) -> None:
        self.visits.clear()

    def __len__(self) -> int:
        return len(self.visits)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.visits)


class TemperatureTable:
    def __init__(self, k: float = 2.0, max_temperature: float = 1.0,
                 nu: float = 1.0, mu: float = 0.999):
        if not 0 < nu <= max_temperature:
            raise ValueError(f"nu must be in (0, {max_temperature}], got {nu}")
        if not 0 < mu <= 1:
            raise ValueError(f"mu must be in (0, 1], got {mu}")
        self.k = k
        self.max_temperature = max_temperature
        self.nu = nu
        self.mu = mu
        self.scheme: Optional[str] = None
        self.episodes_closed = 0
        self._temps: Dict[Tuple[int, int], float] = {}

    def __len__(self) -> int:
        return len(self._temps)

    def _slot(self, key: StateKey, action: int) -> Tuple[int, int]:
        if self.scheme is None:
            self.scheme = key.scheme
        elif key.scheme != self.scheme:
            raise StateHashingError(
                f"{key.scheme} key used with a {self.scheme} temperature table")
        return (key.bits, int(action))

    def temperature(self, key: StateKey, action: int) -> float:
        """Current temperature, creating the entry at max_temperature on first touch."""
        slot = self._slot(key, action)
        if slot not in self._temps:
            self._temps[slot] = self.max_temperature
        return self._temps[slot]

    def peek(self, key: StateKey, action: int) -> float:
        """Current temperature without creating an entry."""
        return self._temps.get(self._slot(key, action), self.max_temperature)

    def set_temperature(self, key: StateKey, action: int, value: float) -> None:
        if not 0.0 <= value <= self.max_temperature:
            raise ValueError(f"temperature must be in [0, {self.max_temperature}], got {value}")
        self._temps[self._slot(key, action)] = float(value)

    def contains(self, key: StateKey, action: int) -> bool:
        return self._slot(key, action) in self._temps

    def leniency(self, key: StateKey, action: int) -> float:
        return leniency_value(self.temperature(key, action), self.k)

    def fresh_leniency(self) -> float:
        return leniency_value(self.max_temperature, self.k)

    def mean_temperature(self, key: StateKey, action_count: int = 5) -> float:
        bits = self._slot(key, 0)[0]
        get, default = self._temps.get, self.max_temperature
        return sum(get((bits, a), default) for a in range(action_count)) / action_count

    def mean_of(self, pairs: Iterable[Pair]) -> Optional[float]:
        values = [self.peek(key, action) for key, action in pairs]
        if not values:
            return None
        return float(np.mean(values))

    def apply_tds(self, trace: EpisodeTrace, schedule: TdsSchedule, completed: bool) -> None:
        """Retroactive decay from the last visit backwards, then decay nu.

        A timed-out episode only clamps the visited pairs to nu.
        """
        if completed:
            for n, (key, action) in enumerate(reversed(trace.visits)):
                slot = self._slot(key, action)
                current = self._temps.get(slot, self.max_temperature)
                decayed = schedule.at(n) * current
                self._temps[slot] = decayed if decayed < self.nu else self.nu
        else:
            for key, action in trace.visits:
                slot = self._slot(key, action)
                self._temps[slot] = min(self._temps.get(slot, self.max_temperature), self.nu)
        self.close_episode()

    def close_episode(self) -> None:
        self.nu *= self.mu
        self.episodes_closed += 1

    def atf_decay(self, key: StateKey, action: int, next_state_actions: Sequence[Pair],
                  terminal: bool, upsilon: float, beta: float) -> float:
        """Fold the successor's average temperature into the pair, then decay it."""
        if not 0.0 <= upsilon <= 1.0:
            raise ValueError(f"atf upsilon must be in [0, 1], got {upsilon}")
        current = self.temperature(key, action)
        if terminal or not next_state_actions:
            updated = beta * current
        else:
            folded = float(np.mean([self.peek(k, a) for k, a in next_state_actions]))
            updated = beta * ((1.0 - upsilon) * current + upsilon * folded)
        self._temps[self._slot(key, action)] = updated
        return updated

    def dump_lines(self) -> List[str]:
        lines = []
        for (bits, action), temp in sorted(self._temps.items()):
            lines.append(f"{bits:016x} {action} {temp!r}")
        return lines

    def dump(self, filepath: str) -> None:
        """Write `hexkey action temperature` lines under a one-line header."""
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = (f"# scheme={self.scheme or 'none'} k={self.k!r} max={self.max_temperature!r} "
                  f"nu={self.nu!r} mu={self.mu!r} episodes={self.episodes_closed}")
        path.write_text("\n".join([header] + self.dump_lines()) + "\n")

    @classmethod
    def load(cls, filepath: str) -> "TemperatureTable":
        lines = Path(filepath).read_text().splitlines()
        meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split())
        table = cls(k=float(meta["k"]), max_temperature=float(meta["max"]),
                    nu=float(meta["nu"]), mu=float(meta["mu"]))
        table.scheme = None if meta["scheme"] == "none" else meta["scheme"]
        table.episodes_closed = int(meta["episodes"])
        for line in lines[1:]:
            if not line.strip():
                continue
            hexkey, action, temp = line.split()
            table._temps[(int(hexkey, 16), int(action))] = float(temp)
        logger.debug(f"Loaded {len(table)} temperature entries from {filepath}")
        return table
