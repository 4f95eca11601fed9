import json
import math
from pathlib import Path

import numpy as np
import pytest

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from modules.leniency import EpisodeTrace, TemperatureTable, build_tds
from modules.replay import (
    META_BETA, META_LENIENCY, META_NONE, EpisodeQueue, ReplayError, ReplayMemory, Transition,
    flush_episode, shdqn_schedule,
)
from modules.state_hashing import EXACT, StateKey


def transition(value: float, meta=None, meta_kind=META_NONE, terminal=False) -> Transition:
    return Transition(np.full(1, value), 0, 0.0, np.full(1, value + 1), terminal, meta, meta_kind)


class TestReplayMemory:
    """Ring buffer storage and sampling."""

    def test_overwrites_oldest(self):
        memory = ReplayMemory(capacity=5)
        for i in range(6):
            memory.insert(transition(i))
        assert len(memory) == 5
        assert memory.sequence_numbers().tolist() == [1, 2, 3, 4, 5]

    def test_default_capacity(self):
        memory = ReplayMemory()
        for i in range(250001):
            memory.insert(transition(i % 7))
        assert len(memory) == 250000
        assert memory.sequence_numbers()[0] == 1
        assert memory.inserted == 250001

    def test_sampling_with_replacement(self):
        memory = ReplayMemory(capacity=10, seed=0)
        memory.insert(transition(3.0))
        batch = memory.sample(3)
        assert batch.seqs.tolist() == [0, 0, 0]
        assert np.all(batch.states == 3.0)
        assert len(batch) == 3

    def test_empty_memory_or_empty_request(self):
        memory = ReplayMemory(capacity=10)
        with pytest.raises(ReplayError):
            memory.sample(1)
        memory.insert(transition(0))
        with pytest.raises(ReplayError):
            memory.sample(0)

    def test_request_larger_than_memory(self):
        memory = ReplayMemory(capacity=10, seed=2)
        for i in range(2):
            memory.insert(transition(i))
        batch = memory.sample(7)
        assert len(batch) == 7
        assert set(batch.seqs.tolist()) <= {0, 1}

    def test_meta_kind_mismatch(self):
        memory = ReplayMemory(capacity=10, meta_kind=META_LENIENCY)
        with pytest.raises(ReplayError):
            memory.insert(transition(0))
        with pytest.raises(ReplayError):
            memory.insert(transition(0, meta=None, meta_kind=META_LENIENCY))

    def test_state_shape_mismatch(self):
        memory = ReplayMemory(capacity=10)
        memory.insert(transition(0))
        with pytest.raises(ReplayError):
            memory.insert(Transition(np.zeros(2), 0, 0.0, np.zeros(2), False))

    def test_seeded_sampling(self):
        def draws(seed):
            memory = ReplayMemory(capacity=50, seed=seed)
            for i in range(50):
                memory.insert(transition(i))
            return memory.sample(20).seqs.tolist()

        assert draws(4) == draws(4)

    def test_uniform_sampling(self):
        memory = ReplayMemory(capacity=10, seed=1)
        for i in range(10):
            memory.insert(transition(i))
        counts = np.bincount(memory.sample(100000).seqs, minlength=10)
        sigma = math.sqrt(100000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10000) <= 4 * sigma)

    def test_leniency_is_a_snapshot(self):
        table = TemperatureTable()
        key = StateKey(1, EXACT)
        memory = ReplayMemory(capacity=10, seed=0, meta_kind=META_LENIENCY)
        stored = table.leniency(key, 0)
        memory.insert(transition(0, meta=stored, meta_kind=META_LENIENCY))

        trace = EpisodeTrace()
        for _ in range(30):
            trace.append(key, 0)
        table.apply_tds(trace, build_tds(-0.5, 0.9, 50), completed=True)
        assert table.leniency(key, 0) < stored
        assert memory.sample(1).meta[0] == stored

    def test_dump(self, tmp_path):
        memory = ReplayMemory(capacity=4, meta_kind=META_BETA)
        for i in range(6):
            memory.insert(transition(i, meta=0.5, meta_kind=META_BETA))
        path = tmp_path / "replay.bin"
        memory.dump(str(path))
        with open(path, "rb") as f:
            header = json.loads(f.readline())
            payload = np.frombuffer(f.read(), dtype="<f8")
        assert header["size"] == 4
        assert header["meta_kind"] == META_BETA
        assert payload[:4].tolist() == [2.0, 3.0, 4.0, 5.0]
        assert payload.size == 4 * 5 + 2 * 4


class TestScheduledRates:
    """Episode queue flushed with rates growing towards the terminal step."""

    def test_schedule_values(self):
        schedule = shdqn_schedule(200)
        assert schedule[0] == pytest.approx(0.9)
        assert schedule[1] == pytest.approx(0.891)
        assert schedule[82] == pytest.approx(0.4)
        assert schedule.min() == pytest.approx(0.4)

    @pytest.mark.parametrize("length", [1, 10, 82, 200])
    def test_flush_assigns_rates(self, length):
        queue = EpisodeQueue()
        memory = ReplayMemory(capacity=500, meta_kind=META_BETA)
        for t in range(length):
            queue.push(transition(t, terminal=t == length - 1))
        rates = flush_episode(queue, memory, shdqn_schedule(200), floor=0.4)

        expected = [max(0.4, 0.9 * 0.99 ** (length - 1 - t)) for t in range(length)]
        assert rates == pytest.approx(expected, rel=1e-12)
        assert all(a <= b for a, b in zip(rates, rates[1:]))
        assert all(0.4 <= r <= 0.9 for r in rates)
        assert len(memory) == length
        assert len(queue) == 0
        assert queue.flushes == 1

    def test_schedule_shorter_than_episode(self):
        queue = EpisodeQueue()
        memory = ReplayMemory(capacity=50, meta_kind=META_BETA)
        for t in range(12):
            queue.push(transition(t))
        rates = flush_episode(queue, memory, shdqn_schedule(5, floor=0.1), floor=0.1)
        assert rates[:7] == [0.1] * 7
        assert rates[-1] == pytest.approx(0.9)

    def test_flush_without_schedule(self):
        queue = EpisodeQueue()
        memory = ReplayMemory(capacity=10)
        queue.push(transition(0))
        assert flush_episode(queue, memory) == []
        assert len(memory) == 1
