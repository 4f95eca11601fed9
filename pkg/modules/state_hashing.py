"""State keys for the temperature tables.

Clean observations are keyed by a stable 64-bit byte hash. Noisy observations
are keyed by SimHash: the rounded centre activations of a frozen autoencoder
are projected onto fixed Gaussian hyperplanes and the signs become the key
bits.
"""

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.network import Adam, Network, autoencoder_spec
from utils import get_logger

logger = get_logger("state_hashing")

EXACT = "exact"
SIMHASH = "simhash"
SCHEMES = (EXACT, SIMHASH)


class StateHashingError(RuntimeError):
    """Encoder not ready, or keys of different schemes mixed."""


@dataclass(frozen=True)
class StateKey:
    bits: int
    scheme: str
    width: int = 64

    @property
    def hex(self) -> str:
        return f"{self.bits:0{(self.width + 3) // 4}x}"


def exact_key(obs: np.ndarray) -> StateKey:
    """64-bit blake2b digest of the observation bytes (shape included)."""
    tensor = np.ascontiguousarray(getattr(obs, "tensor", obs))
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(tensor.shape).encode("ascii"))
    digest.update(str(tensor.dtype).encode("ascii"))
    digest.update(tensor.tobytes())
    return StateKey(int.from_bytes(digest.digest(), "little"), EXACT, 64)


class ProjectionMatrix:
    """k x D i.i.d. standard Gaussian matrix, fixed by its seed."""

    def __init__(self, k: int = 64, dim: int = 512, seed: int = 0):
        if k < 1 or dim < 1:
            raise ValueError(f"projection needs positive sizes, got k={k}, D={dim}")
        self.k = k
        self.dim = dim
        self.seed = seed
        entries = np.random.default_rng(seed).standard_normal((k, dim))
        entries.setflags(write=False)
        self._entries = entries

    @property
    def entries(self) -> np.ndarray:
        return self._entries


def pack_bits(bits: np.ndarray) -> int:
    """Bit i of the result is bits[i]."""
    packed = np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little")
    return int.from_bytes(packed.tobytes(), "little")


def simhash_key(embedding: np.ndarray, projection: ProjectionMatrix) -> StateKey:
    """Bit i is 1 iff row i of A has a strictly positive dot product with the embedding."""
    vector = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if vector.shape[0] != projection.dim:
        raise ValueError(f"embedding has length {vector.shape[0]}, projection expects {projection.dim}")
    bits = projection.entries @ vector > 0
    return StateKey(pack_bits(bits), SIMHASH, projection.k)


def embed(obs: np.ndarray, encoder: Optional[Network]) -> np.ndarray:
    """Centre activations of the autoencoder rounded to {0, 1}."""
    if encoder is None:
        raise StateHashingError("autoencoder is not initialized")
    tensor = getattr(obs, "tensor", obs)
    return np.rint(encoder.embed(tensor)).reshape(-1)


class StateHasher:
    """The run-wide hashing scheme; in SimHash mode it also owns the autoencoder warm-up."""

    def __init__(self, scheme: str = EXACT, obs_shape: Optional[Tuple[int, int]] = None,
                 bits: int = 64, code_size: int = 512, projection_seed: int = 0,
                 warmup_states: int = 50000, epochs: int = 5, batch_size: int = 32,
                 learning_rate: float = 1e-4, binarization_noise: float = 0.3,
                 conv_channels: Sequence[int] = (32, 64), dense: int = 1024,
                 seed: Optional[int] = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown hashing scheme {scheme!r}")
        self.scheme = scheme
        self.frozen = scheme == EXACT
        self.encoder: Optional[Network] = None
        self.projection: Optional[ProjectionMatrix] = None
        self.warmup_states = warmup_states
        self.epochs = epochs
        self.batch_size = batch_size
        self.buffer: List[np.ndarray] = []
        self.losses: List[float] = []

        if scheme == SIMHASH:
            if obs_shape is None:
                raise ValueError("simhash hashing needs the observation shape")
            spec = autoencoder_spec(obs_shape, conv_channels=conv_channels, dense=dense,
                                    code_size=code_size, noise=binarization_noise)
            self.encoder = Network(spec, seed=seed)
            self.optimizer = Adam(self.encoder.size, lr=learning_rate)
            self.projection = ProjectionMatrix(bits, code_size, projection_seed)
            self._shuffle_rng = np.random.default_rng(seed)

    @property
    def ready(self) -> bool:
        return self.frozen

    def describe(self) -> dict:
        info = {"scheme": self.scheme}
        if self.projection is not None:
            info.update({"bits": self.projection.k, "code_size": self.projection.dim,
                         "projection_seed": self.projection.seed})
        return info

    def key(self, obs) -> StateKey:
        if self.scheme == EXACT:
            return exact_key(obs)
        if not self.frozen:
            raise StateHashingError("simhash keys requested before the autoencoder was frozen")
        return simhash_key(embed(obs, self.encoder), self.projection)

    def record(self, obs) -> bool:
        """Keep an observation for autoencoder training; True once the warm-up set is full."""
        if self.frozen:
            return False
        if len(self.buffer) < self.warmup_states:
            self.buffer.append(np.array(getattr(obs, "tensor", obs), dtype=np.float32))
        return len(self.buffer) >= self.warmup_states

    def fit_and_freeze(self) -> List[float]:
        """Train the autoencoder on the recorded states, then freeze it."""
        if self.frozen:
            return self.losses
        if not self.buffer:
            raise StateHashingError("no recorded states to train the autoencoder on")
        data = np.stack(self.buffer)
        for epoch in range(self.epochs):
            order = self._shuffle_rng.permutation(len(data))
            total, batches = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                batch = data[order[start:start + self.batch_size]]
                result = self.encoder.reconstruction_loss_and_grad(batch, training=True)
                self.optimizer.step(self.encoder.theta, result.grad)
                total += result.loss
                batches += 1
            self.losses.append(total / batches)
            logger.info(f"Autoencoder epoch {epoch + 1}/{self.epochs}: "
                        f"reconstruction loss {self.losses[-1]:.6f}")
        self.freeze()
        return self.losses

    def freeze(self) -> None:
        self.frozen = True
        self.buffer = []
        if self.encoder is not None:
            self.encoder.sync_target()
            logger.info(f"Autoencoder frozen after {self.epochs} epochs; simhash keys enabled")
