"""Minimal dense-network engine: forward, analytic backward, SGD, checkpoints.

Two architectures are provided. The discriminator/backbone is a plain
three-layer head (fc6 -> relu -> fc7 -> relu -> fc8); its post-relu fc7
activation doubles as the feature embedding used by the similarity and
feature-matching losses. The generator maps noise to fake feature vectors
through two dense layers, each followed by batch normalization and a
rectifier.

Everything is float64. Batches are row-major: (batch, dim).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (DataError, ModelConfig, ShapeError, StateError,
                   TrainingDivergedError)

CHECKPOINT_MAGIC = b"ODNN"
CHECKPOINT_VERSION = 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; stays finite where softmax would underflow."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class DenseLayer:
    """Fully connected layer with gradient and momentum buffers."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        # He initialization: zero-mean normal, std sqrt(2/in_dim), zero bias.
        self.weights = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weights = np.zeros_like(self.weights)
        self.vel_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        return x @ self.weights.T + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray,
                 accumulate: bool = True) -> np.ndarray:
        if accumulate:
            self.grad_weights += grad_out.T @ x
            self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weights

    def zero_grad(self) -> None:
        self.grad_weights[:] = 0.0
        self.grad_bias[:] = 0.0

    def trainable(self, prefix: str):
        return [
            (f"{prefix}.weights", self.weights, self.grad_weights, self.vel_weights),
            (f"{prefix}.bias", self.bias, self.grad_bias, self.vel_bias),
        ]


class BatchNormLayer:
    """Batch normalization over the batch axis with running statistics.

    Train mode normalizes with biased batch statistics and folds them into
    the running estimates (r <- momentum * r + (1 - momentum) * batch).
    Infer mode uses the running estimates.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self.vel_gamma = np.zeros_like(self.gamma)
        self.vel_beta = np.zeros_like(self.beta)

    def forward(self, x: np.ndarray, train: bool):
        """Returns (output, cache); cache is None in infer mode."""
        if train:
            if x.shape[0] < 2:
                raise DataError(
                    "batch normalization needs batch size >= 2 in train mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            return self.gamma * x_hat + self.beta, (x_hat, inv_std)
        x_hat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return self.gamma * x_hat + self.beta, None

    def backward(self, cache, grad_out: np.ndarray,
                 accumulate: bool = True) -> np.ndarray:
        if cache is None:
            raise StateError("batch-norm backward requires a train-mode forward")
        x_hat, inv_std = cache
        n = grad_out.shape[0]
        if accumulate:
            self.grad_gamma += (grad_out * x_hat).sum(axis=0)
            self.grad_beta += grad_out.sum(axis=0)
        d_hat = grad_out * self.gamma
        return (inv_std / n) * (
            n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))

    def zero_grad(self) -> None:
        self.grad_gamma[:] = 0.0
        self.grad_beta[:] = 0.0

    def trainable(self, prefix: str):
        return [
            (f"{prefix}.gamma", self.gamma, self.grad_gamma, self.vel_gamma),
            (f"{prefix}.beta", self.beta, self.grad_beta, self.vel_beta),
        ]


@dataclass
class DiscActs:
    """Cached activations of one discriminator forward pass."""

    x: np.ndarray
    z6: np.ndarray
    a6: np.ndarray
    z7: np.ndarray
    a7: np.ndarray
    logits: np.ndarray
    train: bool


class Discriminator:
    """fc6 -> relu -> fc7 -> relu -> fc8 classifier head.

    fc8 has K+2 outputs. Train-mode forward exposes all of them; infer mode
    computes only the first K+1 logits (the hard-negative row is never read).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.num_classes = cfg.num_classes
        self.fc6 = DenseLayer(cfg.feature_dim, cfg.fc_hidden_dim, rng)
        self.fc7 = DenseLayer(cfg.fc_hidden_dim, cfg.fc_hidden_dim, rng)
        self.fc8 = DenseLayer(cfg.fc_hidden_dim, cfg.num_train_labels, rng)
        self._last_acts: DiscActs | None = None

    @property
    def feature_dim(self) -> int:
        return self.fc6.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.fc6.out_dim

    def forward(self, x: np.ndarray, train: bool = True) -> DiscActs:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z6 = self.fc6.forward(x)
        a6 = relu(z6)
        z7 = self.fc7.forward(a6)
        a7 = relu(z7)
        if train:
            logits = self.fc8.forward(a7)
        else:
            k1 = self.num_classes + 1
            logits = a7 @ self.fc8.weights[:k1].T + self.fc8.bias[:k1]
        acts = DiscActs(x=x, z6=z6, a6=a6, z7=z7, a7=a7, logits=logits, train=train)
        self._last_acts = acts
        return acts

    def backward(self, grad_logits: np.ndarray | None = None,
                 grad_fc7: np.ndarray | None = None,
                 acts: DiscActs | None = None,
                 accumulate: bool = True) -> np.ndarray:
        """Backpropagate from the logits and/or the fc7 activation.

        Returns the gradient with respect to the input features. With
        accumulate=False the parameter gradient buffers are left untouched
        (used when this network is held fixed).
        """
        acts = acts or self._last_acts
        if acts is None:
            raise StateError("backward called before any forward pass")
        if not acts.train:
            raise StateError("backward requires a train-mode forward")
        if grad_logits is None and grad_fc7 is None:
            raise StateError("backward needs a gradient to propagate")
        if grad_logits is not None:
            d_a7 = self.fc8.backward(acts.a7, grad_logits, accumulate)
        else:
            d_a7 = np.zeros_like(acts.a7)
        if grad_fc7 is not None:
            d_a7 = d_a7 + grad_fc7
        d_z7 = d_a7 * (acts.z7 > 0)
        d_a6 = self.fc7.backward(acts.a6, d_z7, accumulate)
        d_z6 = d_a6 * (acts.z6 > 0)
        return self.fc6.backward(acts.x, d_z6, accumulate)

    def zero_grad(self) -> None:
        for layer in (self.fc6, self.fc7, self.fc8):
            layer.zero_grad()

    def trainable_params(self):
        return (self.fc6.trainable("fc6") + self.fc7.trainable("fc7")
                + self.fc8.trainable("fc8"))


@dataclass
class GenActs:
    """Cached activations of one generator forward pass."""

    z: np.ndarray
    z1: np.ndarray
    bn1_cache: object
    h1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    bn2_cache: object
    h2: np.ndarray
    out: np.ndarray
    train: bool


class Generator:
    """Noise -> fc1 -> bn -> relu -> fc2 -> bn -> relu -> fake features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.noise_dim = cfg.noise_dim
        self.fc1 = DenseLayer(cfg.noise_dim, cfg.gen_hidden_dim, rng)
        self.bn1 = BatchNormLayer(cfg.gen_hidden_dim)
        self.fc2 = DenseLayer(cfg.gen_hidden_dim, cfg.feature_dim, rng)
        self.bn2 = BatchNormLayer(cfg.feature_dim)
        self._last_acts: GenActs | None = None

    @property
    def feature_dim(self) -> int:
        return self.fc2.out_dim

    def forward(self, z: np.ndarray, train: bool = True) -> GenActs:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.noise_dim:
            raise ShapeError(f"expected noise dim {self.noise_dim}, got {z.shape[1]}")
        if train and z.shape[0] < 2:
            raise DataError("generator train-mode forward needs a batch of >= 2")
        z1 = self.fc1.forward(z)
        h1, bn1_cache = self.bn1.forward(z1, train)
        a1 = relu(h1)
        z2 = self.fc2.forward(a1)
        h2, bn2_cache = self.bn2.forward(z2, train)
        out = relu(h2)
        acts = GenActs(z=z, z1=z1, bn1_cache=bn1_cache, h1=h1, a1=a1,
                       z2=z2, bn2_cache=bn2_cache, h2=h2, out=out, train=train)
        self._last_acts = acts
        return acts

    def backward(self, grad_out: np.ndarray, acts: GenActs | None = None,
                 accumulate: bool = True) -> np.ndarray:
        acts = acts or self._last_acts
        if acts is None:
            raise StateError("backward called before any forward pass")
        if not acts.train:
            raise StateError("backward requires a train-mode forward")
        d_h2 = grad_out * (acts.h2 > 0)
        d_z2 = self.bn2.backward(acts.bn2_cache, d_h2, accumulate)
        d_a1 = self.fc2.backward(acts.a1, d_z2, accumulate)
        d_h1 = d_a1 * (acts.h1 > 0)
        d_z1 = self.bn1.backward(acts.bn1_cache, d_h1, accumulate)
        return self.fc1.backward(acts.z, d_z1, accumulate)

    def zero_grad(self) -> None:
        for layer in (self.fc1, self.bn1, self.fc2, self.bn2):
            layer.zero_grad()

    def trainable_params(self):
        return (self.fc1.trainable("fc1") + self.bn1.trainable("bn1")
                + self.fc2.trainable("fc2") + self.bn2.trainable("bn2"))


def disc_forward(d: Discriminator, x: np.ndarray, mode: str = "train"):
    """Classify features: returns (fc7_activation, logits).

    Train mode yields K+2 logits, infer mode K+1 (the hard-negative logit
    is dropped). 1-D input gives 1-D outputs.
    """
    if mode not in ("train", "infer"):
        raise DataError(f"unknown mode {mode!r}")
    single = np.asarray(x).ndim == 1
    acts = d.forward(x, train=(mode == "train"))
    if single:
        return acts.a7[0], acts.logits[0]
    return acts.a7, acts.logits


def gen_forward(g: Generator, z: np.ndarray, mode: str = "train") -> np.ndarray:
    """Map a batch of noise vectors to fake feature vectors."""
    if mode not in ("train", "infer"):
        raise DataError(f"unknown mode {mode!r}")
    return g.forward(z, train=(mode == "train")).out


def sgd_step(net, lr: float, momentum: float = 0.0) -> None:
    """Momentum SGD: v <- momentum * v + grad; param <- param - lr * v."""
    for name, param, grad, vel in net.trainable_params():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
        vel *= momentum
        vel += grad
        param -= lr * vel


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    passed: bool


def check_gradients(loss_fn, params_and_grads, step: float = 1e-5,
                    tol: float = 1e-4) -> list[GradCheckEntry]:
    """Compare analytic gradients against central finite differences.

    loss_fn() must recompute the loss from the current parameter values
    deterministically. params_and_grads is a list of (name, param_array,
    analytic_grad_array); parameters are perturbed in place and restored.
    Relative error uses max(|analytic|, |numeric|) as denominator; entries
    where both are below 1e-7 count as exact (the quotient is noise there).
    """
    results = []
    for name, param, grad in params_and_grads:
        flat = param.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        max_err = 0.0
        worst = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn()
            flat[i] = orig - step
            f_minus = loss_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric))
            err = 0.0 if denom < 1e-7 else abs(gflat[i] - numeric) / denom
            if err > max_err:
                max_err = err
                worst = i
        results.append(GradCheckEntry(name=name, max_rel_err=max_err,
                                      worst_index=worst, passed=max_err <= tol))
    return results


def _write_array(fh, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def write_arrays(path, arrays) -> None:
    """Write float64 arrays: magic, u16 version, then per-array shape + data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        for a in arrays:
            _write_array(fh, a)


def read_arrays(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    arrays = []
    pos = 6
    while pos < len(blob):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        arrays.append(a.astype(np.float64))
    return arrays


_DISC_ARRAYS = ("fc6.weights", "fc6.bias", "fc7.weights", "fc7.bias",
                "fc8.weights", "fc8.bias")


def save_discriminator(path, d: Discriminator) -> None:
    write_arrays(path, [d.fc6.weights, d.fc6.bias, d.fc7.weights, d.fc7.bias,
                        d.fc8.weights, d.fc8.bias])


def load_discriminator(path) -> Discriminator:
    arrays = read_arrays(path)
    if len(arrays) != len(_DISC_ARRAYS):
        raise ShapeError(
            f"{path}: expected {len(_DISC_ARRAYS)} arrays, got {len(arrays)}")
    w6, b6, w7, b7, w8, b8 = arrays
    if w8.shape[0] < 3:
        raise ShapeError(f"{path}: output layer too small for any action class")
    cfg = ModelConfig(num_classes=w8.shape[0] - 2, feature_dim=w6.shape[1],
                      fc_hidden_dim=w6.shape[0])
    d = Discriminator(cfg, np.random.default_rng(0))
    for layer, w, b in ((d.fc6, w6, b6), (d.fc7, w7, b7), (d.fc8, w8, b8)):
        if layer.weights.shape != w.shape or layer.bias.shape != b.shape:
            raise ShapeError(f"{path}: inconsistent layer shapes")
        layer.weights[:] = w
        layer.bias[:] = b
    return d


def save_generator(path, g: Generator) -> None:
    write_arrays(path, [
        g.fc1.weights, g.fc1.bias,
        g.bn1.gamma, g.bn1.beta, g.bn1.running_mean, g.bn1.running_var,
        g.fc2.weights, g.fc2.bias,
        g.bn2.gamma, g.bn2.beta, g.bn2.running_mean, g.bn2.running_var,
    ])


def load_generator(path, num_classes: int = 1) -> Generator:
    arrays = read_arrays(path)
    if len(arrays) != 12:
        raise ShapeError(f"{path}: expected 12 arrays, got {len(arrays)}")
    w1 = arrays[0]
    w2 = arrays[6]
    cfg = ModelConfig(num_classes=num_classes, feature_dim=w2.shape[0],
                      fc_hidden_dim=1, noise_dim=w1.shape[1],
                      gen_hidden_dim=w1.shape[0])
    g = Generator(cfg, np.random.default_rng(0))
    slots = [g.fc1.weights, g.fc1.bias,
             g.bn1.gamma, g.bn1.beta, g.bn1.running_mean, g.bn1.running_var,
             g.fc2.weights, g.fc2.bias,
             g.bn2.gamma, g.bn2.beta, g.bn2.running_mean, g.bn2.running_var]
    for slot, a in zip(slots, arrays):
        if slot.shape != a.shape:
            raise ShapeError(f"{path}: inconsistent layer shapes")
        slot[:] = a
    return g
