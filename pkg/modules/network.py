"""Pure-numpy function approximators: Q-networks and the hashing autoencoder.

Parameters of a network live in one flat float64 vector; every layer reads its
weights through reshaped views of that vector, so optimizers, target syncs and
snapshots all operate on plain arrays. Convolutions use an im2col window view
for the forward pass and an explicit scatter for the adjoint.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import get_logger

logger = get_logger("network")

SNAPSHOT_DTYPE = "<f8"


class NonFiniteError(ArithmeticError):
    """A forward pass or loss produced NaN/inf values."""

    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


def _windows(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """(N, C, H, W) -> (N, Ho, Wo, C, k, k) patch view."""
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _scatter(cols: np.ndarray, out_shape: Tuple[int, ...], k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of `_windows`: accumulate patches back onto an (N, C, H, W) grid."""
    n, c, h, w = out_shape
    ho, wo = cols.shape[1], cols.shape[2]
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return padded[:, :, p:p + h, p:p + w]


@dataclass
class LayerSpec:
    kind: str
    size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = True
    shape: Tuple[int, ...] = ()
    noise: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        data = dict(data)
        data["shape"] = tuple(data.get("shape", ()))
        return cls(**data)


@dataclass
class NetworkSpec:
    """Layer list plus input shape; `embedding_layer` marks the autoencoder centre."""
    name: str
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec]
    embedding_layer: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "embedding_layer": self.embedding_layer,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(
            name=data["name"],
            input_shape=tuple(data["input_shape"]),
            layers=[LayerSpec.from_dict(layer) for layer in data["layers"]],
            embedding_layer=data.get("embedding_layer"),
        )


def qnet_spec(input_shape: Tuple[int, int], n_actions: int = 5,
              conv_channels: Sequence[int] = (32, 64), dense: int = 1024) -> NetworkSpec:
    """Two 3x3 same-padded convolutions, one hidden dense layer, linear per-action outputs."""
    layers: List[LayerSpec] = []
    for channels in conv_channels:
        layers += [LayerSpec("conv", size=channels, kernel=3, stride=1, padding=1), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", size=dense), LayerSpec("relu"),
               LayerSpec("dense", size=n_actions)]
    return NetworkSpec("qnet", (1,) + tuple(input_shape), layers)


def tiny_spec(input_shape: Tuple[int, int], n_actions: int = 5, hidden: int = 64) -> NetworkSpec:
    """Dense-only Q-network for fast runs."""
    layers = [LayerSpec("flatten"), LayerSpec("dense", size=hidden), LayerSpec("relu"),
              LayerSpec("dense", size=n_actions)]
    return NetworkSpec("tiny", (1,) + tuple(input_shape), layers)


def tabular_spec(n_states: int, n_actions: int) -> NetworkSpec:
    """One weight per (state, action): fed one-hot states it is exactly a Q-table."""
    return NetworkSpec("tabular", (n_states,), [LayerSpec("dense", size=n_actions, bias=False)])


def autoencoder_spec(input_shape: Tuple[int, int], conv_channels: Sequence[int] = (32, 64),
                     dense: int = 1024, code_size: int = 512, noise: float = 0.3) -> NetworkSpec:
    h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"autoencoder needs input dims divisible by 4, got {h}x{w}")
    c1, c2 = conv_channels
    flat = c2 * (h // 4) * (w // 4)
    layers = [
        LayerSpec("conv", size=c1, kernel=4, stride=2, padding=1), LayerSpec("relu"),
        LayerSpec("conv", size=c2, kernel=4, stride=2, padding=1), LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", size=dense), LayerSpec("relu"),
        LayerSpec("dense", size=code_size), LayerSpec("sigmoid", noise=noise),
        LayerSpec("dense", size=flat), LayerSpec("relu"),
        LayerSpec("reshape", shape=(c2, h // 4, w // 4)),
        LayerSpec("convT", size=c1, kernel=4, stride=2, padding=1), LayerSpec("relu"),
        LayerSpec("convT", size=1, kernel=4, stride=2, padding=1),
    ]
    return NetworkSpec("autoencoder", (1, h, w), layers, embedding_layer=8)


class Layer:
    param_shapes: List[Tuple[int, ...]] = []

    def out_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return in_shape

    def init(self, params: List[np.ndarray], rng: np.random.Generator) -> None:
        pass

    def forward(self, x, params, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache, params):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_shape: Tuple[int, ...], spec: LayerSpec):
        if len(in_shape) != 1:
            raise ValueError(f"dense layer needs a flat input, got {in_shape}")
        self.n_in, self.n_out, self.bias = in_shape[0], spec.size, spec.bias
        self.param_shapes = [(self.n_in, self.n_out)] + ([(self.n_out,)] if self.bias else [])

    def out_shape(self, in_shape):
        return (self.n_out,)

    def init(self, params, rng):
        bound = 1.0 / np.sqrt(self.n_in)
        params[0][...] = rng.uniform(-bound, bound, size=params[0].shape)

    def forward(self, x, params, training=False, rng=None):
        y = x @ params[0]
        if self.bias:
            y = y + params[1]
        return y, x

    def backward(self, dy, x, params):
        grads = [x.T @ dy]
        if self.bias:
            grads.append(dy.sum(axis=0))
        return dy @ params[0].T, grads


class Conv2D(Layer):
    def __init__(self, in_shape: Tuple[int, ...], spec: LayerSpec):
        self.c_in, self.h, self.w = in_shape
        self.c_out, self.k, self.s, self.p = spec.size, spec.kernel, spec.stride, spec.padding
        self.ho = (self.h + 2 * self.p - self.k) // self.s + 1
        self.wo = (self.w + 2 * self.p - self.k) // self.s + 1
        if self.ho < 1 or self.wo < 1:
            raise ValueError(f"conv kernel {self.k} does not fit input {in_shape}")
        self.param_shapes = [(self.c_out, self.c_in, self.k, self.k), (self.c_out,)]

    def out_shape(self, in_shape):
        return (self.c_out, self.ho, self.wo)

    def init(self, params, rng):
        bound = 1.0 / np.sqrt(self.c_in * self.k * self.k)
        params[0][...] = rng.uniform(-bound, bound, size=params[0].shape)

    def forward(self, x, params, training=False, rng=None):
        cols = _windows(x, self.k, self.s, self.p)
        y = np.tensordot(cols, params[0], axes=([3, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + params[1][None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, cols)

    def backward(self, dy, cache, params):
        x_shape, cols = cache
        dyt = dy.transpose(0, 2, 3, 1)
        d_weight = np.tensordot(dyt, cols, axes=([0, 1, 2], [0, 1, 2]))
        d_bias = dy.sum(axis=(0, 2, 3))
        dcols = np.tensordot(dyt, params[0], axes=([3], [0]))
        dx = _scatter(dcols, x_shape, self.k, self.s, self.p)
        return dx, [d_weight, d_bias]


class ConvTranspose2D(Layer):
    def __init__(self, in_shape: Tuple[int, ...], spec: LayerSpec):
        self.c_in, self.h, self.w = in_shape
        self.c_out, self.k, self.s, self.p = spec.size, spec.kernel, spec.stride, spec.padding
        self.ho = (self.h - 1) * self.s + self.k - 2 * self.p
        self.wo = (self.w - 1) * self.s + self.k - 2 * self.p
        self.param_shapes = [(self.c_in, self.c_out, self.k, self.k), (self.c_out,)]

    def out_shape(self, in_shape):
        return (self.c_out, self.ho, self.wo)

    def init(self, params, rng):
        bound = 1.0 / np.sqrt(self.c_in * self.k * self.k)
        params[0][...] = rng.uniform(-bound, bound, size=params[0].shape)

    def forward(self, x, params, training=False, rng=None):
        xt = x.transpose(0, 2, 3, 1)
        cols = np.tensordot(xt, params[0], axes=([3], [0]))
        y = _scatter(cols, (x.shape[0], self.c_out, self.ho, self.wo), self.k, self.s, self.p)
        return y + params[1][None, :, None, None], xt

    def backward(self, dy, xt, params):
        dcols = _windows(dy, self.k, self.s, self.p)
        dx = np.tensordot(dcols, params[0], axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        d_weight = np.tensordot(xt, dcols, axes=([0, 1, 2], [0, 1, 2]))
        d_bias = dy.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx), [d_weight, d_bias]


class ReLU(Layer):
    def forward(self, x, params, training=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask, params):
        return dy * mask, []


class Sigmoid(Layer):
    """Saturating centre activation; optional uniform pre-activation noise while training."""

    def __init__(self, noise: float = 0.0):
        self.noise = noise

    def forward(self, x, params, training=False, rng=None):
        if training and self.noise > 0 and rng is not None:
            x = x + rng.uniform(-self.noise, self.noise, size=x.shape)
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return y, y

    def backward(self, dy, y, params):
        return dy * y * (1.0 - y), []


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, params):
        return dy.reshape(shape), []


class Reshape(Layer):
    def __init__(self, in_shape: Tuple[int, ...], spec: LayerSpec):
        if int(np.prod(in_shape)) != int(np.prod(spec.shape)):
            raise ValueError(f"cannot reshape {in_shape} into {spec.shape}")
        self.shape = tuple(spec.shape)

    def out_shape(self, in_shape):
        return self.shape

    def forward(self, x, params, training=False, rng=None):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, dy, shape, params):
        return dy.reshape(shape), []


def _build_layer(spec: LayerSpec, in_shape: Tuple[int, ...]) -> Layer:
    if spec.kind == "dense":
        return Dense(in_shape, spec)
    if spec.kind == "conv":
        return Conv2D(in_shape, spec)
    if spec.kind == "convT":
        return ConvTranspose2D(in_shape, spec)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "sigmoid":
        return Sigmoid(spec.noise)
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "reshape":
        return Reshape(in_shape, spec)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    included: int
    empty: bool = False


WeightArg = Union[np.ndarray, Sequence[float], Callable[[np.ndarray], np.ndarray]]


class Network:
    """Online parameters plus a target copy that only changes on `sync_target`."""

    def __init__(self, spec: NetworkSpec, seed: Optional[int] = None, initialize: bool = True):
        self.spec = spec
        self.seed = seed
        self.train_steps = 0
        init_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
        self.noise_rng = np.random.default_rng(noise_seed)

        self.layers: List[Layer] = []
        self.shapes: List[Tuple[int, ...]] = [tuple(spec.input_shape)]
        shape = tuple(spec.input_shape)
        for layer_spec in spec.layers:
            layer = _build_layer(layer_spec, shape)
            shape = tuple(layer.out_shape(shape))
            self.layers.append(layer)
            self.shapes.append(shape)
        self.output_shape = shape

        self._slices: List[List[Tuple[int, int, Tuple[int, ...]]]] = []
        offset = 0
        for layer in self.layers:
            entries = []
            for param_shape in layer.param_shapes:
                size = int(np.prod(param_shape))
                entries.append((offset, offset + size, param_shape))
                offset += size
            self._slices.append(entries)
        self.size = offset

        self.theta = np.zeros(self.size, dtype=np.float64)
        if initialize:
            rng = np.random.default_rng(init_seed)
            views = self.views(self.theta)
            for layer, params in zip(self.layers, views):
                layer.init(params, rng)
        self.target = self.theta.copy()
        self._theta_views = self.views(self.theta)
        self._target_views = self.views(self.target)

    def views(self, flat: np.ndarray) -> List[List[np.ndarray]]:
        return [[flat[a:b].reshape(shape) for a, b, shape in entries] for entries in self._slices]

    def _views_of(self, flat: np.ndarray) -> List[List[np.ndarray]]:
        # theta and target are only ever updated in place
        if flat is self.theta:
            return self._theta_views
        if flat is self.target:
            return self._target_views
        return self.views(flat)

    def _prepare(self, obs: np.ndarray) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64)
        input_shape = tuple(self.spec.input_shape)
        core = input_shape if len(input_shape) == 1 else input_shape[-2:]
        if x.ndim < len(core) or tuple(x.shape[-len(core):]) != tuple(core):
            raise ValueError(f"observation shape {x.shape} does not match network input {input_shape}")
        return x.reshape((-1,) + input_shape)

    def _run(self, x: np.ndarray, flat: np.ndarray, training: bool = False,
             upto: Optional[int] = None) -> Tuple[np.ndarray, List[Any]]:
        caches = []
        rng = self.noise_rng if training else None
        last = len(self.layers) if upto is None else upto + 1
        for index, (layer, params) in enumerate(zip(self.layers[:last], self._views_of(flat)[:last])):
            x, cache = layer.forward(x, params, training=training, rng=rng)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError("non-finite activations", layer=index)
            caches.append(cache)
        return x, caches

    def _backprop(self, dout: np.ndarray, caches: List[Any], flat: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.size, dtype=np.float64)
        grad_views = self.views(grad)
        param_views = self._views_of(flat)
        dy = dout
        for index in range(len(self.layers) - 1, -1, -1):
            dy, grads = self.layers[index].backward(dy, caches[index], param_views[index])
            for slot, g in zip(grad_views[index], grads):
                slot[...] = g
        return grad

    def forward(self, obs: np.ndarray, target: bool = False) -> np.ndarray:
        """Batch of outputs for a batch (or a single) observation."""
        out, _ = self._run(self._prepare(obs), self.target if target else self.theta)
        return out

    def q_values(self, obs: np.ndarray, target: bool = False) -> np.ndarray:
        return self.forward(obs, target=target).reshape(-1, self.output_shape[-1])

    def embed(self, obs: np.ndarray) -> np.ndarray:
        """Centre-layer activations (inference mode, no noise)."""
        if self.spec.embedding_layer is None:
            raise ValueError(f"network {self.spec.name} has no embedding layer")
        out, _ = self._run(self._prepare(obs), self.theta, upto=self.spec.embedding_layer)
        return out

    def masked_loss_and_grad(self, obs: np.ndarray, actions: Sequence[int],
                             targets: Sequence[float], weights: WeightArg) -> LossResult:
        """Weighted squared TD loss averaged over the samples with non-zero weight.

        `weights` may be a callable of the TD errors (target - Q) so that the
        caller can choose per-sample weights after seeing the predictions.
        """
        x = self._prepare(obs)
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.float64)
        out, caches = self._run(x, self.theta)
        rows = np.arange(len(actions))
        predicted = out[rows, actions]
        delta = targets - predicted

        w = weights(delta) if callable(weights) else weights
        w = np.asarray(w, dtype=np.float64)
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("sample weights must lie in [0, 1]")

        included = int(np.count_nonzero(w))
        if included == 0:
            return LossResult(0.0, np.zeros(self.size), 0, empty=True)

        loss = float(np.sum(w * delta ** 2) / included)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite loss")
        dout = np.zeros_like(out)
        dout[rows, actions] = -2.0 * w * delta / included
        return LossResult(loss, self._backprop(dout, caches, self.theta), included)

    def reconstruction_loss_and_grad(self, obs: np.ndarray, training: bool = True) -> LossResult:
        """Mean squared reconstruction error of an autoencoder over a batch."""
        x = self._prepare(obs)
        out, caches = self._run(x, self.theta, training=training)
        diff = out - x
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite reconstruction loss")
        dout = 2.0 * diff / diff.size
        return LossResult(loss, self._backprop(dout, caches, self.theta), x.shape[0])

    def sync_target(self) -> None:
        self.target[...] = self.theta

    def save(self, filepath: str, extra: Optional[Dict[str, Any]] = None) -> None:
        """JSON header line followed by little-endian float64 online then target parameters."""
        header = {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "train_steps": self.train_steps,
            "size": self.size,
            "dtype": SNAPSHOT_DTYPE,
        }
        if extra:
            header.update(extra)
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            f.write(self.theta.astype(SNAPSHOT_DTYPE).tobytes())
            f.write(self.target.astype(SNAPSHOT_DTYPE).tobytes())

    @classmethod
    def load(cls, filepath: str) -> Tuple["Network", Dict[str, Any]]:
        with open(filepath, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            payload = np.frombuffer(f.read(), dtype=header["dtype"]).astype(np.float64)
        net = cls(NetworkSpec.from_dict(header["spec"]), seed=header.get("seed"), initialize=False)
        if payload.size != 2 * net.size:
            raise ValueError(f"snapshot {filepath} holds {payload.size} values, expected {2 * net.size}")
        net.theta[...] = payload[:net.size]
        net.target[...] = payload[net.size:]
        net.train_steps = int(header.get("train_steps", 0))
        return net, header


@dataclass
class Adam:
    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.m = np.zeros(self.size, dtype=np.float64)
        self.v = np.zeros(self.size, dtype=np.float64)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> bool:
        """In-place bias-corrected update; returns False (and skips) on a non-finite gradient."""
        if grad.shape != theta.shape or theta.shape != self.m.shape:
            raise ValueError(f"gradient of shape {grad.shape} for parameters {theta.shape}")
        if not np.all(np.isfinite(grad)):
            logger.warning(f"Skipping Adam step {self.t + 1}: non-finite gradient")
            return False
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


@dataclass
class SGD:
    size: int
    lr: float = 1e-4
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> bool:
        if grad.shape != theta.shape:
            raise ValueError(f"gradient of shape {grad.shape} for parameters {theta.shape}")
        if not np.all(np.isfinite(grad)):
            logger.warning(f"Skipping SGD step {self.t + 1}: non-finite gradient")
            return False
        self.t += 1
        theta -= self.lr * grad
        return True


def make_optimizer(name: str, size: int, lr: float):
    if name == "adam":
        return Adam(size, lr=lr)
    if name == "sgd":
        return SGD(size, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
