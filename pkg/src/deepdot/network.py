"""Fully connected + 3-D convolutional inversion network, trained with Adam.

Tensors are channels-last: a batch of volumes has shape ``(B, nx, ny, nz, C)``
and the flattening of the fully connected output follows the same C order as
:class:`~deepdot.geometry.VoxelGrid` with the channel index fastest.

Convolutions are 3x3x3, stride 1, zero padded, without bias, and computed as
cross-correlations by summing 27 shifted-slice matrix products.  Gradients are
hand-derived; :func:`backward` consumes the cache produced by :func:`forward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidArgument

ACTIVATIONS = ("tanh", "relu")
KERNEL = 3


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidArgument("channel counts must be positive")

    @property
    def n_params(self):
        return KERNEL**3 * self.in_channels * self.out_channels


@dataclass(frozen=True)
class NetworkSpec:
    """Layer layout.

    Parameters
    ----------
    input_length : int
        Number of filtered measurements.
    fc_shape : tuple
        ``(nx, ny, nz, channels)`` produced by the fully connected layer.
    conv_layers : tuple of ConvLayer
        Interior layers use tanh; the last maps to one channel through relu.
    """

    input_length: int
    fc_shape: tuple
    conv_layers: tuple
    dropout_p: float = 0.7
    input_noise_sigma: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "fc_shape", tuple(int(s) for s in self.fc_shape))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        if self.input_length < 1 or len(self.fc_shape) != 4 or min(self.fc_shape) < 1:
            raise InvalidArgument("bad input length or fc shape")
        if not 0 <= self.dropout_p < 1:
            raise InvalidArgument("dropout probability must lie in [0, 1)")
        layers = self.conv_layers
        if not layers:
            raise InvalidArgument("at least one convolution layer is required")
        if layers[0].in_channels != self.fc_shape[3]:
            raise InvalidArgument("first convolution must take the fc channels")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_channels != b.in_channels:
                raise InvalidArgument("consecutive layer channels do not chain")
        if layers[-1].out_channels != 1 or layers[-1].activation != "relu":
            raise InvalidArgument("last layer must map to one channel through relu")
        if any(l.activation != "tanh" for l in layers[:-1]):
            raise InvalidArgument("interior layers must use tanh")

    @property
    def volume_shape(self):
        return self.fc_shape[:3]

    @property
    def n_voxels(self):
        nx, ny, nz, _ = self.fc_shape
        return nx * ny * nz

    @property
    def fc_outputs(self):
        return self.n_voxels * self.fc_shape[3]

    def to_dict(self):
        return {
            "input_length": self.input_length,
            "fc_shape": list(self.fc_shape),
            "conv_layers": [[l.in_channels, l.out_channels, l.activation] for l in self.conv_layers],
            "dropout_p": self.dropout_p,
            "input_noise_sigma": self.input_noise_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_length"]), tuple(d["fc_shape"]),
                   tuple(ConvLayer(int(a), int(b), str(c)) for a, b, c in d["conv_layers"]),
                   float(d.get("dropout_p", 0.7)), float(d.get("input_noise_sigma", 0.2)))


def standard_spec(input_length, volume_shape, channels=64, fc_channels=1, denoising_layers=1,
                  dropout_p=0.7, input_noise_sigma=0.2):
    """fc -> C1 (fc_channels -> r) -> H x denoising_layers (r -> r) -> C3 (r -> 1)."""
    layers = [ConvLayer(fc_channels, channels, "tanh")]
    layers += [ConvLayer(channels, channels, "tanh") for _ in range(denoising_layers)]
    layers.append(ConvLayer(channels, 1, "relu"))
    return NetworkSpec(input_length, (*volume_shape, fc_channels), tuple(layers),
                       dropout_p, input_noise_sigma)


def count_params(spec):
    fc = (spec.input_length + 1) * spec.fc_outputs
    return fc + sum(l.n_params for l in spec.conv_layers)


@dataclass
class NetworkParams:
    """Trainable tensors in declaration order plus Adam moments."""

    fc_weights: np.ndarray
    fc_bias: np.ndarray
    filters: list
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(t) for t in self.tensors()]
        if self.v is None:
            self.v = [np.zeros_like(t) for t in self.tensors()]

    def tensors(self):
        return [self.fc_weights, self.fc_bias, *self.filters]

    def set_tensors(self, tensors):
        self.fc_weights, self.fc_bias, *rest = tensors
        self.filters = list(rest)

    def copy(self):
        return NetworkParams(self.fc_weights.copy(), self.fc_bias.copy(),
                             [f.copy() for f in self.filters],
                             [a.copy() for a in self.m], [a.copy() for a in self.v])

    def astype(self, dtype):
        return NetworkParams(self.fc_weights.astype(dtype), self.fc_bias.astype(dtype),
                             [f.astype(dtype) for f in self.filters],
                             [a.astype(dtype) for a in self.m], [a.astype(dtype) for a in self.v])

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors()])


def xavier_init(spec, rng_seed=None, dtype=np.float64):
    """Glorot-uniform weights, zero biases and zero Adam moments."""
    rng = np.random.default_rng(rng_seed)
    M, F = spec.input_length, spec.fc_outputs
    a = math.sqrt(6.0 / (M + F))
    W = rng.uniform(-a, a, size=(M, F)).astype(dtype)
    filters = []
    for l in spec.conv_layers:
        fan_in = KERNEL**3 * l.in_channels
        fan_out = KERNEL**3 * l.out_channels
        a = math.sqrt(6.0 / (fan_in + fan_out))
        shape = (KERNEL, KERNEL, KERNEL, l.in_channels, l.out_channels)
        filters.append(rng.uniform(-a, a, size=shape).astype(dtype))
    return NetworkParams(W, np.zeros(F, dtype=dtype), filters)


# -- layers ---------------------------------------------------------------------

def fc_forward(W, b, g):
    """Affine part of the fully connected layer (activation applied by the caller)."""
    g = np.asarray(g)
    if g.shape[-1] != W.shape[0]:
        raise InvalidArgument(f"expected {W.shape[0]} measurements, got {g.shape[-1]}")
    return g @ W + b


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def conv3d_forward(x, K):
    """Zero-padded 3x3x3 multi-channel cross-correlation, ``(B, X, Y, Z, Cin) -> (B, X, Y, Z, Cout)``."""
    if x.shape[-1] != K.shape[3]:
        raise InvalidArgument(f"input has {x.shape[-1]} channels, filter expects {K.shape[3]}")
    B, X, Y, Z, _ = x.shape
    xp = _pad(x)
    out = np.zeros((B, X, Y, Z, K.shape[4]), dtype=np.result_type(x, K))
    for a in range(KERNEL):
        for b in range(KERNEL):
            for c in range(KERNEL):
                out += xp[:, a:a + X, b:b + Y, c:c + Z, :] @ K[a, b, c]
    return out


def conv3d_backward(x, K, delta):
    """Gradients ``(dL/dx, dL/dK)`` given ``delta = dL/d(output)``."""
    B, X, Y, Z, cin = x.shape
    xp = _pad(x)
    dxp = np.zeros_like(xp, dtype=np.result_type(x, delta))
    dK = np.zeros_like(K, dtype=np.result_type(K, delta))
    d2 = delta.reshape(-1, delta.shape[-1])
    for a in range(KERNEL):
        for b in range(KERNEL):
            for c in range(KERNEL):
                sl = (slice(None), slice(a, a + X), slice(b, b + Y), slice(c, c + Z))
                dK[a, b, c] = xp[sl].reshape(-1, cin).T @ d2
                dxp[sl] += delta @ K[a, b, c].T
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dK


def _activate(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0)


def _activation_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


@dataclass
class ForwardCache:
    g: np.ndarray
    fc_act: np.ndarray
    mask: np.ndarray | None
    inputs: list
    pre: list
    post: list


def forward(spec, params, g, mode="infer", rng_seed=None):
    """Batched forward pass; returns ``(output (B, nx, ny, nz), cache)``."""
    if mode not in ("train", "infer"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    g = np.atleast_2d(np.asarray(g, dtype=params.fc_weights.dtype))
    mask = None
    if mode == "train":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        if spec.input_noise_sigma > 0:
            g = g + rng.normal(0.0, spec.input_noise_sigma, size=g.shape).astype(g.dtype)
    z = fc_forward(params.fc_weights, params.fc_bias, g)
    a = np.tanh(z)
    if mode == "train" and spec.dropout_p > 0:
        keep = 1.0 - spec.dropout_p
        mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
        a = a * mask
    x = a.reshape(g.shape[0], *spec.fc_shape)
    cache = ForwardCache(g, np.tanh(z), mask, [], [], [])
    for layer, K in zip(spec.conv_layers, params.filters):
        cache.inputs.append(x)
        pre = conv3d_forward(x, K)
        x = _activate(pre, layer.activation)
        cache.pre.append(pre)
        cache.post.append(x)
    return x[..., 0], cache


def network_forward(spec, params, g, mode="infer", rng_seed=None):
    """Predicted (weighted) volume(s); a single measurement vector gives ``(nx, ny, nz)``."""
    single = np.asarray(g).ndim == 1
    out, _ = forward(spec, params, g, mode, rng_seed)
    return out[0] if single else out


def mse(pred, label):
    return float(np.mean((pred - label) ** 2))


def backward(spec, params, cache, label):
    """MSE loss and its gradients in :meth:`NetworkParams.tensors` order."""
    if cache is None or not cache.post:
        raise ContractViolation("backward called without a forward cache")
    out = cache.post[-1][..., 0]
    label = np.asarray(label, dtype=out.dtype).reshape(out.shape)
    diff = out - label
    loss = float(np.mean(diff**2))
    delta = (2.0 / diff.size) * diff[..., None]
    grads_K = [None] * len(spec.conv_layers)
    for i in reversed(range(len(spec.conv_layers))):
        layer = spec.conv_layers[i]
        delta = delta * _activation_grad(cache.pre[i], cache.post[i], layer.activation)
        delta, grads_K[i] = conv3d_backward(cache.inputs[i], params.filters[i], delta)
    B = out.shape[0]
    delta = delta.reshape(B, -1)
    if cache.mask is not None:
        delta = delta * cache.mask
    delta = delta * (1.0 - cache.fc_act**2)
    dW = cache.g.T @ delta
    db = delta.sum(axis=0)
    return loss, [dW, db, *grads_K]


def adam_step(params, grads, t, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    if t < 1:
        raise InvalidArgument("Adam step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = []
    for p, g, m, v in zip(params.tensors(), grads, params.m, params.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        new.append(p)
    params.set_tensors(new)
    return params


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    params: NetworkParams
    history: list
    best_epoch: int
    best_val_loss: float


def evaluate_loss(spec, params, inputs, labels, batch_size=64):
    total = 0.0
    for s in range(0, inputs.shape[0], batch_size):
        out = network_forward(spec, params, inputs[s:s + batch_size], "infer")
        total += float(np.sum((out.reshape(out.shape[0], -1) - labels[s:s + batch_size]) ** 2))
    return total / labels.size


def train(spec, inputs, labels, train_idx, val_idx, *, batch_size=64, max_epochs=120,
          patience=10, lr=1e-4, rng_seed=0, dtype=np.float64, params=None, log=None):
    """Mini-batch Adam with early stopping on the validation MSE.

    Parameters
    ----------
    inputs : ndarray (S, input_length)
        Normalized measurement vectors.
    labels : ndarray (S, N)
        Weighted label volumes, flattened in grid order.
    train_idx, val_idx : sequence of int
    patience : int
        Training stops once the validation loss has not improved for this many
        epochs (``0`` stops after the first epoch).
    log : callable, optional
        Called with each history record.

    Returns
    -------
    TrainResult
        Parameters of the best validation epoch and the per-epoch history.
    """
    train_idx = np.asarray(train_idx, dtype=int)
    val_idx = np.asarray(val_idx, dtype=int)
    if train_idx.size == 0 or val_idx.size == 0:
        raise InvalidArgument("training and validation sets must be non-empty")
    inputs = np.asarray(inputs, dtype=dtype)
    labels = np.asarray(labels, dtype=dtype).reshape(inputs.shape[0], -1)
    if inputs.shape[1] != spec.input_length or labels.shape[1] != spec.n_voxels:
        raise InvalidArgument("dataset shape does not match the network spec")

    seq = np.random.SeedSequence(rng_seed)
    init_seed, shuffle_seed, noise_seed = seq.spawn(3)
    params = xavier_init(spec, init_seed, dtype) if params is None else params.astype(dtype)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    noise_rng = np.random.default_rng(noise_seed)
    Xv, Yv = inputs[val_idx], labels[val_idx]

    history, best, best_loss, best_epoch = [], None, math.inf, 0
    since_best, t = 0, 0
    for epoch in range(1, max_epochs + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        running = 0.0
        for s in range(0, order.size, batch_size):
            b = order[s:s + batch_size]
            _, cache = forward(spec, params, inputs[b], "train", noise_rng)
            loss, grads = backward(spec, params, cache, labels[b])
            t += 1
            adam_step(params, grads, t, lr)
            running += loss * b.size
        val = evaluate_loss(spec, params, Xv, Yv, batch_size)
        rec = {"epoch": epoch, "train_loss": running / order.size, "val_loss": val}
        history.append(rec)
        if log is not None:
            log(rec)
        if val < best_loss:
            best_loss, best_epoch, best, since_best = val, epoch, params.copy(), 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    return TrainResult(best, history, best_epoch, best_loss)
