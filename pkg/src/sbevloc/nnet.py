"""Minimal dense neural-network engine (numpy only).

Supports exactly what the localization models need: affine layers with
relu/linear/sigmoid activations, inverted dropout, MSE loss, SGD and Adam,
and fully seeded (hence bit-reproducible) mini-batch training. Gradients
are hand-derived reverse mode and are validated against central differences
in the test suite.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, NumericalError

ACTIVATIONS = ("linear", "relu", "sigmoid")

WEIGHTS_MAGIC = b"SBNN"
WEIGHTS_VERSION = 1


@dataclass
class Layer:
    weights: np.ndarray      # (out, in)
    bias: np.ndarray         # (out,)
    activation: str
    dropout: float = 0.0     # rate applied to this layer's output in training

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError(f"dropout rate {self.dropout} outside [0, 1)")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InputError("weight/bias shape mismatch")


@dataclass
class DenseNet:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise InputError(
                    f"layer dims do not chain: {a.weights.shape} -> {b.weights.shape}")

    @property
    def in_dim(self):
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weights.shape[0]

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    loss_weights: tuple | None = None   # optional per-output MSE weights

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if self.batch_size < 1:
            raise InputError("batch size must be >= 1")


def init_net(dims, activations, dropout=None, seed=0, dtype=np.float64) -> DenseNet:
    """Fan-in scaled uniform init: W ~ U(-sqrt(6/n_in), sqrt(6/n_in)).

    The sqrt(6) gain keeps activation variance roughly constant through
    relu stacks, so deep nets neither vanish nor blow up at init.
    """
    if len(activations) != len(dims) - 1:
        raise InputError("need one activation per layer")
    dropout = dropout or [0.0] * (len(dims) - 1)
    rng = np.random.default_rng([seed, 0x11])
    layers = []
    for i, act in enumerate(activations):
        n_in, n_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        layers.append(Layer(w, np.zeros(n_out, dtype=dtype), act, dropout[i]))
    return DenseNet(layers)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _activate_grad(pre, post, kind):
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    if kind == "sigmoid":
        return post * (1.0 - post)
    return np.ones_like(pre)


@dataclass
class ForwardRecord:
    """Activations captured for one forward pass, consumed by backward()."""

    x: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    n_layers: int = 0


def forward(net: DenseNet, x, mode: str = "eval", rng=None, masks=None):
    """Run the net; returns (output, ForwardRecord).

    In train mode, dropout masks are sampled from `rng` (or reused from
    `masks`, which gradient checking relies on) and recorded with inverted
    scaling so eval mode needs no rescale.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    if h.shape[1] != net.in_dim:
        raise InputError(f"input dim {h.shape[1]}, net expects {net.in_dim}")
    rec = ForwardRecord(x=h, n_layers=len(net.layers))
    for i, layer in enumerate(net.layers):
        z = h @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        mask = None
        if mode == "train" and layer.dropout > 0.0:
            if masks is not None:
                mask = masks[i]
            else:
                if rng is None:
                    raise InputError("train mode with dropout needs an rng")
                keep = rng.random(a.shape) >= layer.dropout
                mask = keep.astype(a.dtype) / (1.0 - layer.dropout)
            a = a * mask
        rec.pre.append(z)
        rec.post.append(a)
        rec.masks.append(mask)
        h = a
    out = rec.post[-1]
    return (out[0] if single else out), rec


def backward(net: DenseNet, rec: ForwardRecord, grad_out):
    """Exact reverse-mode gradients [(dW, db) per layer] for dL/d(output)."""
    if rec.n_layers != len(net.layers) or len(rec.post) != len(net.layers):
        raise InputError("stale or mismatched forward record")
    g = np.asarray(grad_out)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    if g.shape != rec.post[-1].shape:
        raise InputError(f"gradient shape {g.shape} != output {rec.post[-1].shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if rec.masks[i] is not None:
            g = g * rec.masks[i]
        # post-dropout activation isn't the activation output; recompute it
        act_out = _activate(rec.pre[i], layer.activation)
        g = g * _activate_grad(rec.pre[i], act_out, layer.activation)
        inp = rec.x if i == 0 else rec.post[i - 1]
        grads[i] = (g.T @ inp, g.sum(axis=0))
        if i > 0:
            g = g @ layer.weights
    return grads


def mse_loss(pred, target, weights=None):
    """Mean squared error and its gradient w.r.t. pred.

    `weights` optionally scales each output component's squared error.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if weights is not None:
        wvec = np.asarray(weights, dtype=pred.dtype)
        loss = float(np.mean(wvec * diff * diff))
        grad = 2.0 * wvec * diff / diff.size
    else:
        loss = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    return loss, grad


@dataclass
class OptState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(net: DenseNet, grads, config: TrainConfig,
                   state: OptState | None = None) -> OptState:
    """Apply one SGD or Adam update in place; returns the optimizer state."""
    for layer, (dw, db) in zip(net.layers, grads):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise InputError("gradient shapes do not match parameters")
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for layer, (dw, db) in zip(net.layers, grads):
            layer.weights -= lr * dw
            layer.bias -= lr * db
        return state if state is not None else OptState()

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    if state is None or not state.m:
        state = OptState(
            m=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers],
            v=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers])
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (layer, (dw, db)) in enumerate(zip(net.layers, grads)):
        for param, grad, m, v in ((layer.weights, dw, state.m[i][0], state.v[i][0]),
                                  (layer.bias, db, state.m[i][1], state.v[i][1])):
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad
            param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def train(net: DenseNet, inputs, targets, config: TrainConfig):
    """Seeded mini-batch training; returns (trained copy, per-epoch losses)."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if len(inputs) == 0:
        raise InputError("empty training set")
    if len(inputs) != len(targets):
        raise InputError("inputs/targets length mismatch")
    net = net.copy()
    shuffle_rng = np.random.default_rng([config.seed, 0x21])
    dropout_rng = np.random.default_rng([config.seed, 0x22])
    state = None
    losses = []
    n = len(inputs)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = inputs[idx], targets[idx]
            out, rec = forward(net, x, mode="train", rng=dropout_rng)
            loss, grad = mse_loss(out, y, weights=config.loss_weights)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            grads = backward(net, rec, grad)
            state = optimizer_step(net, grads, config, state)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return net, losses


# ---------------------------------------------------------------------------
# weights file: magic "SBNN", then little-endian fields

_ACT_CODE = {"linear": 0, "relu": 1, "sigmoid": 2}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


def save_weights(path, net: DenseNet) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<HH", WEIGHTS_VERSION, len(net.layers)))
        for layer in net.layers:
            n_out, n_in = layer.weights.shape
            f.write(struct.pack("<IIBf", n_in, n_out,
                                _ACT_CODE[layer.activation], layer.dropout))
            f.write(layer.weights.astype("<f4").tobytes())
            f.write(layer.bias.astype("<f4").tobytes())


def load_weights(path) -> DenseNet:
    """Load an SBNN file; parameters come back as float32."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(
            f"{path}: bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}", offset=0)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: weights version {version}, "
                          f"expected {WEIGHTS_VERSION}", offset=4)
    pos = 8
    layers = []
    for _ in range(n_layers):
        if pos + 13 > len(data):
            raise FormatError(f"{path}: truncated layer header", offset=pos)
        n_in, n_out, act, dropout = struct.unpack_from("<IIBf", data, pos)
        pos += 13
        if act not in _ACT_NAME:
            raise FormatError(f"{path}: unknown activation code {act}", offset=pos - 5)
        nw, nb = n_out * n_in * 4, n_out * 4
        if pos + nw + nb > len(data):
            raise FormatError(f"{path}: truncated parameters", offset=pos)
        w = np.frombuffer(data, dtype="<f4", count=n_out * n_in, offset=pos)
        pos += nw
        b = np.frombuffer(data, dtype="<f4", count=n_out, offset=pos)
        pos += nb
        layers.append(Layer(w.reshape(n_out, n_in).astype(np.float32),
                            b.astype(np.float32), _ACT_NAME[act], float(dropout)))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)
    return DenseNet(layers)
