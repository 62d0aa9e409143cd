"""A small fully connected network with manual backprop, Adam, and a checkpoint format.

This is the shared substrate of the performance predictor and the TD3 actor and
critics. Four affine layers, LeakyReLU between them, and a per-output-unit
activation on the last layer.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = "GTNET"
CHECKPOINT_VERSION = 1
LEAK = 0.01


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_OUTPUT = {
    "identity": (lambda z: z, lambda z, y: np.ones_like(z)),
    "sigmoid": (_sigmoid, lambda z, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
}


class DenseNet:
    def __init__(
        self,
        layer_dims: Sequence[int],
        output_activations: Sequence[str] | str = "identity",
        seed: int | None = 0,
        dtype=np.float32,
    ):
        layer_dims = tuple(int(d) for d in layer_dims)
        if len(layer_dims) != 5 or min(layer_dims) < 1:
            raise ValueError(f"need five positive layer sizes, got {layer_dims}")
        if isinstance(output_activations, str):
            output_activations = [output_activations] * layer_dims[-1]
        output_activations = tuple(output_activations)
        if len(output_activations) != layer_dims[-1]:
            raise ValueError("one output activation per output unit")
        for a in output_activations:
            if a not in _OUTPUT:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_dims = layer_dims
        self.hidden_activation = "leaky_relu"
        self.output_activations = output_activations
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype))
            self.biases.append(np.zeros(fan_out, dtype=dtype))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def astype(self, dtype) -> "DenseNet":
        net = copy.deepcopy(self)
        net.weights = [w.astype(dtype) for w in net.weights]
        net.biases = [b.astype(dtype) for b in net.biases]
        return net

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)

    def _out(self, z):
        y = np.empty_like(z)
        for j, name in enumerate(self.output_activations):
            y[:, j] = _OUTPUT[name][0](z[:, j])
        return y

    def _out_grad(self, z, y):
        g = np.empty_like(z)
        for j, name in enumerate(self.output_activations):
            g[:, j] = _OUTPUT[name][1](z[:, j], y[:, j])
        return g

    def forward_batch(self, x: np.ndarray, keep_cache: bool = False):
        """Outputs for a batch; with ``keep_cache`` also the activations for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ValueError(f"expected input width {self.layer_dims[0]}, got shape {x.shape}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = self._out(z) if i == last else np.maximum(z, LEAK * z)
            acts.append(h)
        if keep_cache:
            return h, (acts, pre)
        return h

    def penultimate_batch(self, x: np.ndarray) -> np.ndarray:
        _, (acts, _) = self.forward_batch(x, keep_cache=True)
        return acts[-2]

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Single input vector -> (output, last hidden layer activations)."""
        x = np.asarray(x, dtype=self.dtype).reshape(1, -1)
        out, (acts, _) = self.forward_batch(x, keep_cache=True)
        return out[0], acts[-2][0]

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients of a scalar loss given dLoss/dOutput.

        Returns ``(grad_weights, grad_biases, grad_input)``.
        """
        acts, pre = cache
        g = grad_out * self._out_grad(pre[-1], acts[-1])
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * np.where(pre[i - 1] > 0, 1.0, LEAK).astype(g.dtype)
        return gw, gb, g

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = (
            f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} "
            f"dims={','.join(map(str, self.layer_dims))} "
            f"hidden={self.hidden_activation} "
            f"out={','.join(self.output_activations)}\n"
        )
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            for p in self.weights + self.biases:
                f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike, expect_dims: Sequence[int] | None = None) -> "DenseNet":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        if nl < 0:
            raise CheckpointError(f"{path}: missing header")
        try:
            parts = raw[:nl].decode("ascii").split()
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: corrupted header") from e
        if len(parts) != 5 or parts[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        if int(parts[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {parts[1]}")
        meta = dict(p.split("=", 1) for p in parts[2:])
        dims = tuple(int(d) for d in meta["dims"].split(","))
        if expect_dims is not None and tuple(expect_dims) != dims:
            raise CheckpointError(f"{path}: layer dims {dims} do not match expected {tuple(expect_dims)}")
        net = cls(dims, meta["out"].split(","), seed=None)
        flat = np.frombuffer(raw, dtype="<f4", offset=nl + 1)
        sizes = [w.size for w in net.weights] + [b.size for b in net.biases]
        if flat.size != sum(sizes):
            raise CheckpointError(f"{path}: expected {sum(sizes)} parameters, found {flat.size}")
        off = 0
        arrays = []
        for s in sizes:
            arrays.append(flat[off : off + s].astype(np.float32))
            off += s
        n = len(net.weights)
        net.weights = [a.reshape(w.shape) for a, w in zip(arrays[:n], net.weights)]
        net.biases = arrays[n:]
        return net


@dataclass
class TrainSpec:
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps: int = 2000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def mse_loss_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def fit(net: DenseNet, inputs, targets, spec: TrainSpec = TrainSpec(), optimizer: Adam | None = None):
    """Mini-batch Adam on mean squared error. Trains ``net`` in place.

    Each epoch visits the rows in a seeded random order. Returns
    ``(net, losses)`` with one mini-batch loss per step.
    """
    X = np.asarray(inputs, dtype=net.dtype)
    Y = np.asarray(targets, dtype=net.dtype)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ValueError("inputs and targets must be aligned and non-empty")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("training data contains non-finite values")
    opt = optimizer or Adam(net.params(), spec.learning_rate, spec.betas, spec.eps)
    rng = np.random.default_rng(spec.seed)
    n = X.shape[0]
    bs = min(spec.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    losses = []
    for step in range(spec.steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        pred, cache = net.forward_batch(X[idx], keep_cache=True)
        loss, g = mse_loss_and_grad(pred, Y[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        gw, gb, _ = net.backward(cache, g)
        if spec.learning_rate > 0:
            opt.step(gw + gb)
        losses.append(loss)
    return net, losses
