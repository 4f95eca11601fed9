"""Coordinated multi-agent object transportation (CMOTP) grid-worlds.

Two agents must walk to the cells flanking an item of goods, after which the
goods only moves when both agents pick the same direction. Delivering the
goods onto a dropzone ends the episode with a reward sampled from that
dropzone's reward spec.
"""

import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from utils import get_logger

logger = get_logger("gridworld")

Cell = Tuple[int, int]

FREE = 0
OBSTACLE = 1
DROPZONE = 2

AGENT1_CODE = 250.0
AGENT2_CODE = 200.0
GOODS_CODE = 150.0
OBSTACLE_CODE = 50.0
PIXEL_SCALE = 250.0
NOISE_STD = 0.01

DEFAULT_STEP_LIMIT = 10000
DEFAULT_SLIP_PROBABILITY = 0.10


class Action(IntEnum):
    STAY = 0
    LEFT = 1
    RIGHT = 2
    UP = 3
    DOWN = 4


ACTION_COUNT = len(Action)

DELTAS: Dict[int, Cell] = {
    Action.STAY: (0, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
}


class LayoutParseError(ValueError):
    """Malformed layout text; carries the offending line and column (1-based)."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        location = ""
        if line is not None:
            location = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(f"{location}{message}")
        self.line = line
        self.column = column


class ContractViolation(RuntimeError):
    """Raised when the environment is driven outside its contract."""


@dataclass(frozen=True)
class RewardSpec:
    """Discrete reward distribution of a dropzone as (reward, probability) pairs."""
    outcomes: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if not self.outcomes:
            raise ValueError("reward spec needs at least one outcome")
        for reward, probability in self.outcomes:
            if not math.isfinite(reward):
                raise ValueError(f"reward {reward} is not finite")
            if not 0.0 <= probability <= 1.0:
                raise ValueError(f"probability {probability} outside [0, 1]")
        total = sum(p for _, p in self.outcomes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, expected 1.0")

    @property
    def expected(self) -> float:
        return float(sum(r * p for r, p in self.outcomes))

    @property
    def maximum(self) -> float:
        return float(max(r for r, p in self.outcomes if p > 0))

    def sample(self, rng: np.random.Generator) -> float:
        u = rng.random()
        cumulative = 0.0
        for reward, probability in self.outcomes:
            cumulative += probability
            if u < cumulative:
                return float(reward)
        return float(self.outcomes[-1][0])


@dataclass
class Layout:
    """Static description of one CMOTP grid."""
    height: int
    width: int
    cells: np.ndarray
    zone_ids: Dict[Cell, str]
    agent1_start: Cell
    agent2_start: Cell
    goods_start: Cell
    dropzones: Dict[str, RewardSpec]
    name: str = "layout"
    blocked: FrozenSet[Cell] = field(init=False, repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        self.cells.setflags(write=False)
        rows, cols = np.nonzero(self.cells == OBSTACLE)
        self.blocked = frozenset(zip(rows.tolist(), cols.tolist()))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def is_obstacle(self, cell: Cell) -> bool:
        return cell in self.blocked or not self.in_bounds(cell)

    def zone_at(self, cell: Cell) -> Optional[str]:
        return self.zone_ids.get(cell)

    def best_zone(self) -> str:
        """Dropzone with the highest expected reward (ties resolved by id)."""
        return max(sorted(self.dropzones), key=lambda zid: self.dropzones[zid].expected)

    def validate(self) -> None:
        """Check the structural invariants every layout must satisfy."""
        for r in range(self.height):
            for c in range(self.width):
                on_border = r in (0, self.height - 1) or c in (0, self.width - 1)
                if on_border and self.cells[r, c] != OBSTACLE:
                    raise LayoutParseError("grid must be bounded by obstacles", r + 1, c + 1)
        if not self.dropzones:
            raise LayoutParseError("layout has no dropzone")
        for label, cell in (("agent 1", self.agent1_start), ("agent 2", self.agent2_start),
                            ("goods", self.goods_start)):
            if self.cells[cell] != FREE:
                raise LayoutParseError(f"{label} must start on a free cell", cell[0] + 1, cell[1] + 1)
        gr, gc = self.goods_start
        for flank in ((gr, gc - 1), (gr, gc + 1)):
            if self.cells[flank] != FREE:
                raise LayoutParseError("goods needs free cells on its left and right",
                                       gr + 1, gc + 1)


@dataclass(frozen=True)
class EnvState:
    agent1: Cell
    agent2: Cell
    goods: Cell
    attached: bool = False
    steps_taken: int = 0
    terminal: bool = False
    timed_out: bool = False
    delivered_to: Optional[str] = None
    last_joint_action: Optional[Tuple[int, int]] = None
    goods_moved: bool = False


@dataclass
class Observation:
    tensor: np.ndarray
    noisy: bool = False


_GRID_CHARS = {'#': OBSTACLE, '.': FREE, '1': FREE, '2': FREE, 'G': FREE}
_ZONE_LINE = re.compile(r"^([A-Z])\s*=\s*(.+)$")
_PAIR = re.compile(r"\(\s*([^(),]+?)\s*,\s*([^(),]+?)\s*\)")
_PAIR_LIST = re.compile(r"^\s*\([^()]*\)(\s*,\s*\([^()]*\))*\s*$")


def parse_layout(text: str, name: str = "layout") -> Layout:
    """Parse an ASCII layout followed by a `[dropzones]` reward section."""
    grid_lines: List[Tuple[int, str]] = []
    zone_lines: List[Tuple[int, str]] = []
    in_zones = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if line.strip().lower() == "[dropzones]":
            in_zones = True
            continue
        if in_zones:
            if line.strip() and not line.strip().startswith(";"):
                zone_lines.append((lineno, line.strip()))
        elif line.strip():
            grid_lines.append((lineno, line))

    if not grid_lines:
        raise LayoutParseError("layout has no grid rows")

    width = len(grid_lines[0][1])
    height = len(grid_lines)
    cells = np.zeros((height, width), dtype=np.uint8)
    zone_ids: Dict[Cell, str] = {}
    zone_first_seen: Dict[str, Tuple[int, int]] = {}
    entities: Dict[str, Cell] = {}

    for r, (lineno, line) in enumerate(grid_lines):
        if len(line) != width:
            raise LayoutParseError(f"row has {len(line)} cells, expected {width}", lineno)
        for c, ch in enumerate(line):
            if ch in _GRID_CHARS:
                cells[r, c] = _GRID_CHARS[ch]
                if ch in "12G":
                    if ch in entities:
                        raise LayoutParseError(f"duplicate '{ch}'", lineno, c + 1)
                    entities[ch] = (r, c)
            elif "A" <= ch <= "Z":
                cells[r, c] = DROPZONE
                zone_ids[(r, c)] = ch
                zone_first_seen.setdefault(ch, (lineno, c + 1))
            else:
                raise LayoutParseError(f"unknown cell character {ch!r}", lineno, c + 1)

    for ch, label in (("1", "agent 1 start"), ("2", "agent 2 start"), ("G", "goods")):
        if ch not in entities:
            raise LayoutParseError(f"missing {label} ('{ch}')")

    dropzones: Dict[str, RewardSpec] = {}
    for lineno, line in zone_lines:
        match = _ZONE_LINE.match(line)
        if not match or not _PAIR_LIST.match(match.group(2)):
            raise LayoutParseError(f"malformed dropzone line {line!r}", lineno)
        zone_id = match.group(1)
        try:
            outcomes = tuple((float(r), float(p)) for r, p in _PAIR.findall(match.group(2)))
            dropzones[zone_id] = RewardSpec(outcomes)
        except ValueError as e:
            raise LayoutParseError(f"dropzone {zone_id}: {e}", lineno) from e
        if zone_id not in zone_first_seen:
            raise LayoutParseError(f"dropzone {zone_id} is not on the grid", lineno)

    for zone_id, (lineno, column) in zone_first_seen.items():
        if zone_id not in dropzones:
            raise LayoutParseError(f"dropzone {zone_id} has no reward spec", lineno, column)

    layout = Layout(
        height=height,
        width=width,
        cells=cells,
        zone_ids=zone_ids,
        agent1_start=entities["1"],
        agent2_start=entities["2"],
        goods_start=entities["G"],
        dropzones=dropzones,
        name=name,
    )
    layout.validate()
    return layout


def load_layout(path: str) -> Layout:
    """Read and parse a layout file."""
    layout_path = Path(path)
    if not layout_path.exists():
        raise FileNotFoundError(f"Layout file not found: {path}")
    layout = parse_layout(layout_path.read_text(), name=layout_path.stem)
    logger.debug(f"Loaded layout {layout.name} ({layout.height}x{layout.width}, "
                 f"dropzones={sorted(layout.dropzones)})")
    return layout


def _shift(cell: Cell, action: int) -> Cell:
    dr, dc = DELTAS[action]
    return (cell[0] + dr, cell[1] + dc)


def flanks(goods: Cell) -> Tuple[Cell, Cell]:
    return (goods[0], goods[1] - 1), (goods[0], goods[1] + 1)


def is_flanking(p1: Cell, p2: Cell, goods: Cell) -> bool:
    left, right = flanks(goods)
    return (p1 == left and p2 == right) or (p1 == right and p2 == left)


class CMOTPEnv:
    """Two-agent transportation environment with optional slip and observation noise."""

    def __init__(self, layout: Layout, slippery: bool = False,
                 slip_probability: float = DEFAULT_SLIP_PROBABILITY, noisy: bool = False,
                 step_limit: int = DEFAULT_STEP_LIMIT, seed: Optional[int] = None):
        if step_limit < 1:
            raise ValueError("step_limit must be at least 1")
        self.layout = layout
        self.slippery = slippery
        self.slip_probability = slip_probability
        self.noisy = noisy
        self.step_limit = step_limit

        dynamics_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(dynamics_seed)
        self.noise_rng = np.random.default_rng(noise_seed)

        self._obstacle_codes = np.where(layout.cells == OBSTACLE, OBSTACLE_CODE, 0.0)

    @property
    def observation_shape(self) -> Tuple[int, int]:
        return self.layout.shape

    def reset(self) -> EnvState:
        lay = self.layout
        return EnvState(
            agent1=lay.agent1_start,
            agent2=lay.agent2_start,
            goods=lay.goods_start,
            attached=is_flanking(lay.agent1_start, lay.agent2_start, lay.goods_start),
        )

    def _slip(self, action: Action, rng: np.random.Generator) -> Action:
        if rng.random() < self.slip_probability:
            return Action(int(rng.integers(ACTION_COUNT)))
        return action

    def _resolve_moves(self, p1: Cell, p2: Cell, goods: Cell, a1: int, a2: int) -> Tuple[Cell, Cell]:
        t1 = _shift(p1, a1)
        t2 = _shift(p2, a2)
        if self.layout.is_obstacle(t1) or t1 == goods:
            t1 = p1
        if self.layout.is_obstacle(t2) or t2 == goods:
            t2 = p2

        # head-on swap
        if t1 == p2 and t2 == p1:
            return p1, p2

        changed = True
        while changed:
            changed = False
            if t1 == t2:
                if t1 != p1:
                    t1 = p1
                    changed = True
                if t2 != p2:
                    t2 = p2
                    changed = True
        return t1, t2

    def step(self, state: EnvState, a1: int, a2: int,
             rng: Optional[np.random.Generator] = None) -> Tuple[EnvState, float, bool]:
        """Advance one joint step; returns (next state, shared reward, terminal)."""
        if state.terminal:
            raise ContractViolation("step called on a terminal state; call reset() first")
        rng = rng if rng is not None else self.rng
        a1, a2 = Action(a1), Action(a2)
        if self.slippery:
            a1 = self._slip(a1, rng)
            a2 = self._slip(a2, rng)

        p1, p2, goods = state.agent1, state.agent2, state.goods
        attached = state.attached
        goods_moved = False

        if attached:
            if a1 == a2 and a1 != Action.STAY:
                n1, n2, ng = _shift(p1, a1), _shift(p2, a2), _shift(goods, a1)
                if not (self.layout.is_obstacle(n1) or self.layout.is_obstacle(n2)
                        or self.layout.is_obstacle(ng)):
                    p1, p2, goods = n1, n2, ng
                    goods_moved = True
        else:
            p1, p2 = self._resolve_moves(p1, p2, goods, a1, a2)
            attached = is_flanking(p1, p2, goods)

        steps = state.steps_taken + 1
        reward = 0.0
        terminal = False
        timed_out = False
        delivered_to = None

        zone = self.layout.zone_at(goods) if goods_moved else None
        if zone is not None:
            terminal = True
            delivered_to = zone
            reward = self.layout.dropzones[zone].sample(rng)
        elif steps >= self.step_limit:
            terminal = True
            timed_out = True

        next_state = EnvState(
            agent1=p1,
            agent2=p2,
            goods=goods,
            attached=attached,
            steps_taken=steps,
            terminal=terminal,
            timed_out=timed_out,
            delivered_to=delivered_to,
            last_joint_action=(int(a1), int(a2)),
            goods_moved=goods_moved,
        )
        return next_state, reward, terminal

    def render(self, state: EnvState, noisy: Optional[bool] = None,
               rng: Optional[np.random.Generator] = None) -> Observation:
        """Gray-scale image of the grid, normalized by the agent-1 pixel code."""
        noisy = self.noisy if noisy is None else noisy
        codes = self._obstacle_codes.copy()
        codes[state.goods] = GOODS_CODE
        codes[state.agent2] = AGENT2_CODE
        codes[state.agent1] = AGENT1_CODE

        if not noisy:
            return Observation((codes / PIXEL_SCALE).astype(np.float32), noisy=False)

        rng = rng if rng is not None else self.noise_rng
        image = np.where(codes == 0.0, 1.0, codes / PIXEL_SCALE)
        image = image * rng.normal(1.0, NOISE_STD, size=image.shape)
        return Observation(image.astype(np.float32), noisy=True)

    def with_state(self, state: EnvState, **changes) -> EnvState:
        return replace(state, **changes)
