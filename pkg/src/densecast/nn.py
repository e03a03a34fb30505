"""Minimal feed-forward engine in float64 numpy: 1D-convolutional bottleneck
with L1 regularization, dense layers, inverted dropout, manual
backpropagation, SGD with momentum, and early stopping.

Batched inputs are (n, seq_len, features); everything is deterministic given
the rng seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "LayerSpec",
    "TrainConfig",
    "Network",
    "Conv1d",
    "Dense",
    "Dropout",
    "Activation",
    "DivergenceError",
    "build_network",
    "default_architecture",
    "glorot_uniform",
    "mse",
    "train",
    "bottleneck_sparsity",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"DCNN"
CHECKPOINT_VERSION = 1
SPARSITY_THRESHOLD = 1e-4


class DivergenceError(RuntimeError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg)
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description used to build runtime layers."""

    kind: str                 # conv1d_bottleneck | conv1d | dense | dropout | activation
    in_size: int = 0
    out_size: int = 0
    kernel: int = 1
    rate: float = 0.0
    activation: str = "identity"
    l1_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in ("conv1d_bottleneck", "conv1d", "dense", "dropout",
                             "activation"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.l1_lambda < 0.0:
            raise ValueError("l1_lambda must be non-negative")
        if self.l1_lambda > 0.0 and self.kind != "conv1d_bottleneck":
            raise ValueError("L1 regularization applies to the bottleneck only")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 32
    early_stop_patience: int = 16
    rng_seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv1d:
    """1D convolution over (n, L, C_in) -> (n, L-k+1, C_out), valid padding.

    With kernel 1 and `bottleneck` set, this is the per-month linear encoder
    whose weight vector carries the L1 penalty.
    """

    kind = "conv1d"
    has_params = True

    def __init__(self, in_size, out_size, kernel=1, bottleneck=False,
                 l1_lambda=0.0, rng=None):
        self.in_size = in_size
        self.out_size = out_size
        self.kernel = kernel
        self.bottleneck = bottleneck
        self.l1_lambda = float(l1_lambda)
        fan_in = in_size * kernel
        fan_out = out_size * kernel
        if rng is not None:
            self.W = glorot_uniform(rng, (out_size, in_size, kernel), fan_in, fan_out)
        else:
            self.W = np.zeros((out_size, in_size, kernel))
        self.b = np.zeros(out_size)

    def forward(self, X, training, rng, fixed_mask=None):
        if X.ndim != 3 or X.shape[2] != self.in_size:
            raise ValueError(
                f"conv1d expected (n, L, {self.in_size}), got {X.shape}")
        if X.shape[1] < self.kernel:
            raise ValueError("sequence shorter than the kernel")
        Xw = sliding_window_view(X, self.kernel, axis=1)  # (n, Lo, C, k)
        out = np.einsum("nlck,ock->nlo", Xw, self.W) + self.b
        return out, (X.shape, Xw)

    def backward(self, d_out, cache):
        x_shape, Xw = cache
        dW = np.einsum("nlck,nlo->ock", Xw, d_out)
        db = d_out.sum(axis=(0, 1))
        dX = np.zeros(x_shape)
        Lo = d_out.shape[1]
        for j in range(self.kernel):
            dX[:, j:j + Lo, :] += np.einsum("nlo,oc->nlc", d_out, self.W[:, :, j])
        return dX, [dW, db]

    @property
    def params(self):
        return [self.W, self.b]

    def set_params(self, values):
        self.W, self.b = [np.array(v, dtype=float) for v in values]

    def spec_dict(self):
        return {"kind": "conv1d_bottleneck" if self.bottleneck else "conv1d",
                "in_size": self.in_size, "out_size": self.out_size,
                "kernel": self.kernel, "l1_lambda": self.l1_lambda}

    def buffers(self):
        return {"W": self.W, "b": self.b}

    @classmethod
    def from_spec(cls, spec, buffers):
        layer = cls(spec["in_size"], spec["out_size"], spec["kernel"],
                    bottleneck=spec["kind"] == "conv1d_bottleneck",
                    l1_lambda=spec.get("l1_lambda", 0.0))
        layer.W = buffers["W"]
        layer.b = buffers["b"]
        return layer


class Dense:
    """Fully connected layer; flattens any (n, ...) input to (n, in_size)."""

    kind = "dense"
    has_params = True

    def __init__(self, in_size, out_size, rng=None):
        self.in_size = in_size
        self.out_size = out_size
        if rng is not None:
            self.W = glorot_uniform(rng, (out_size, in_size), in_size, out_size)
        else:
            self.W = np.zeros((out_size, in_size))
        self.b = np.zeros(out_size)

    def forward(self, X, training, rng, fixed_mask=None):
        flat = X.reshape(X.shape[0], -1)
        if flat.shape[1] != self.in_size:
            raise ValueError(
                f"dense expected {self.in_size} inputs, got {flat.shape[1]}")
        return flat @ self.W.T + self.b, (X.shape, flat)

    def backward(self, d_out, cache):
        x_shape, flat = cache
        dW = d_out.T @ flat
        db = d_out.sum(axis=0)
        dX = (d_out @ self.W).reshape(x_shape)
        return dX, [dW, db]

    @property
    def params(self):
        return [self.W, self.b]

    def set_params(self, values):
        self.W, self.b = [np.array(v, dtype=float) for v in values]

    def spec_dict(self):
        return {"kind": "dense", "in_size": self.in_size, "out_size": self.out_size}

    def buffers(self):
        return {"W": self.W, "b": self.b}

    @classmethod
    def from_spec(cls, spec, buffers):
        layer = cls(spec["in_size"], spec["out_size"])
        layer.W = buffers["W"]
        layer.b = buffers["b"]
        return layer


class Dropout:
    """Inverted dropout: kept activations are scaled by 1/(1-p) at train time,
    so inference applies no mask and no rescaling."""

    kind = "dropout"
    has_params = False

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def forward(self, X, training, rng, fixed_mask=None):
        if fixed_mask is not None:
            scaled = np.asarray(fixed_mask, dtype=float) / (1.0 - self.rate)
            return X * scaled, scaled
        if not training or self.rate == 0.0:
            return X, None
        keep = rng.random(X.shape) >= self.rate
        scaled = keep.astype(float) / (1.0 - self.rate)
        return X * scaled, scaled

    def backward(self, d_out, cache):
        if cache is None:
            return d_out, []
        return d_out * cache, []

    @property
    def params(self):
        return []

    def set_params(self, values):
        pass

    def spec_dict(self):
        return {"kind": "dropout", "rate": self.rate}

    def buffers(self):
        return {}

    @classmethod
    def from_spec(cls, spec, buffers):
        return cls(spec["rate"])


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


class Activation:
    kind = "activation"
    has_params = False

    def __init__(self, name):
        if name not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, X, training, rng, fixed_mask=None):
        fn, _ = _ACTIVATIONS[self.name]
        return fn(X), X

    def backward(self, d_out, cache):
        _, dfn = _ACTIVATIONS[self.name]
        return d_out * dfn(cache), []

    @property
    def params(self):
        return []

    def set_params(self, values):
        pass

    def spec_dict(self):
        return {"kind": "activation", "activation": self.name}

    def buffers(self):
        return {}

    @classmethod
    def from_spec(cls, spec, buffers):
        return cls(spec["activation"])


LAYER_CLASSES = {
    "conv1d": Conv1d,
    "conv1d_bottleneck": Conv1d,
    "dense": Dense,
    "dropout": Dropout,
    "activation": Activation,
}


class Network:
    """Ordered layer stack with cached forward passes and manual backprop."""

    def __init__(self, layers):
        self.layers = list(layers)
        bottlenecks = [i for i, l in enumerate(self.layers)
                       if getattr(l, "bottleneck", False)]
        if bottlenecks and bottlenecks != [0]:
            raise ValueError("the bottleneck must be the first layer")

    def forward(self, X, training=False, rng=None, fixed_masks=None):
        """Returns (output, caches). `fixed_masks` pins one mask per dropout
        layer (Monte Carlo member evaluation)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None, :, :]
        caches = []
        mask_iter = iter(fixed_masks) if fixed_masks is not None else None
        out = X
        for layer in self.layers:
            fixed = next(mask_iter) if (mask_iter is not None
                                        and layer.kind == "dropout") else None
            out, cache = layer.forward(out, training, rng, fixed_mask=fixed)
            caches.append(cache)
        return out, caches

    def backward(self, caches, d_out):
        """Gradients of the cached pass w.r.t. every parameter, output-first."""
        grads = [None] * len(self.layers)
        d = d_out
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, caches[i])
            grads[i] = g
        return grads

    def predict(self, X, rng=None, training=False, fixed_masks=None):
        out, _ = self.forward(X, training=training, rng=rng, fixed_masks=fixed_masks)
        return out[:, 0] if out.shape[1] == 1 else out

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_state(self):
        return [np.array(p) for p in self.parameters()]

    def set_state(self, state):
        it = iter(state)
        for layer in self.layers:
            k = len(layer.params)
            layer.set_params([next(it) for _ in range(k)])

    def dropout_layers(self):
        return [l for l in self.layers if l.kind == "dropout"]

    def bottleneck(self):
        if not self.layers or not getattr(self.layers[0], "bottleneck", False):
            raise ValueError("network has no bottleneck layer")
        return self.layers[0]


def build_network(specs, rng_or_seed=0) -> Network:
    """Instantiate layers from specs, validating the shape chain."""
    rng = (rng_or_seed if isinstance(rng_or_seed, np.random.Generator)
           else np.random.default_rng(rng_or_seed))
    layers = []
    for spec in specs:
        if spec.kind in ("conv1d", "conv1d_bottleneck"):
            layers.append(Conv1d(spec.in_size, spec.out_size, spec.kernel,
                                 bottleneck=spec.kind == "conv1d_bottleneck",
                                 l1_lambda=spec.l1_lambda, rng=rng))
        elif spec.kind == "dense":
            layers.append(Dense(spec.in_size, spec.out_size, rng=rng))
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.rate))
        else:
            layers.append(Activation(spec.activation))
    return Network(layers)


def default_architecture(n_features, seq_len=12, channels=8, kernel=3,
                         hidden=32, dropout_rate=0.0, l1_lambda=1e-3):
    """Bottleneck encoder, one mid conv layer, dense head; dropout optional."""
    conv_out_len = seq_len - kernel + 1
    specs = [
        LayerSpec("conv1d_bottleneck", in_size=n_features, out_size=channels,
                  kernel=1, l1_lambda=l1_lambda),
        LayerSpec("conv1d", in_size=channels, out_size=channels, kernel=kernel),
        LayerSpec("activation", activation="relu"),
    ]
    if dropout_rate > 0.0:
        specs.append(LayerSpec("dropout", rate=dropout_rate))
    specs += [
        LayerSpec("dense", in_size=conv_out_len * channels, out_size=hidden),
        LayerSpec("activation", activation="relu"),
    ]
    if dropout_rate > 0.0:
        specs.append(LayerSpec("dropout", rate=dropout_rate))
    specs.append(LayerSpec("dense", in_size=hidden, out_size=1))
    return specs


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------

def mse(pred, y) -> float:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float).reshape(pred.shape)
    return float(np.mean((pred - y) ** 2))


def _l1_penalty(network: Network) -> float:
    total = 0.0
    for layer in network.layers:
        lam = getattr(layer, "l1_lambda", 0.0)
        if lam > 0.0:
            total += lam * np.abs(layer.W).sum()
    return total


def loss_and_grads(network: Network, X, y, training=True, rng=None,
                   l1_in_grads=True):
    """MSE plus the bottleneck L1 penalty, with gradients for every parameter.

    The L1 subgradient is sign(w), i.e. 0 at w = 0. The training loop asks for
    penalty-free gradients instead and handles the L1 term proximally.
    """
    out, caches = network.forward(X, training=training, rng=rng)
    y2 = np.asarray(y, dtype=float).reshape(out.shape)
    loss = float(np.mean((out - y2) ** 2)) + _l1_penalty(network)
    d_out = 2.0 * (out - y2) / out.size
    grads = network.backward(caches, d_out)
    if l1_in_grads:
        for layer, g in zip(network.layers, grads):
            lam = getattr(layer, "l1_lambda", 0.0)
            if lam > 0.0 and g:
                g[0] = g[0] + lam * np.sign(layer.W)
    flat = [gi for g in grads for gi in g]
    return loss, flat, out


def _proximal_l1(network: Network, step: float) -> None:
    # soft-thresholding: subgradient steps oscillate around zero and never
    # produce exact sparsity, the proximal map does
    for layer in network.layers:
        lam = getattr(layer, "l1_lambda", 0.0)
        if lam > 0.0:
            thr = step * lam
            W = layer.W
            W[:] = np.sign(W) * np.maximum(np.abs(W) - thr, 0.0)


def train(network: Network, train_set, val_set, config: TrainConfig):
    """SGD with momentum and validation early stopping.

    Stops when validation MSE has not improved for `early_stop_patience`
    epochs and restores the best-validation snapshot. Fully deterministic
    given config.rng_seed.
    """
    X_train, y_train = train_set
    X_val, y_val = val_set
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    rng = np.random.default_rng(config.rng_seed)
    velocity = [np.zeros_like(p) for p in network.parameters()]

    best_val = np.inf
    best_state = network.get_state()
    best_epoch = -1
    bad_epochs = 0
    history = {"train_loss": [], "val_loss": []}

    n = X_train.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = loss_and_grads(
                network, X_train[idx], y_train[idx], training=True, rng=rng,
                l1_in_grads=False)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            params = network.parameters()
            for i, (p, g) in enumerate(zip(params, grads)):
                velocity[i] = config.momentum * velocity[i] - config.learning_rate * g
                p += velocity[i]
            _proximal_l1(network, config.learning_rate)
            epoch_loss += loss * idx.size
        history["train_loss"].append(epoch_loss / n)

        val_loss = mse(network.predict(X_val), y_val)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  epoch=epoch)
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = network.get_state()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break

    network.set_state(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_val
    history["epochs_run"] = len(history["val_loss"])
    return history


def bottleneck_sparsity(network: Network, threshold: float = SPARSITY_THRESHOLD) -> float:
    """Fraction of bottleneck weights with |w| below the threshold."""
    W = network.bottleneck().W
    return float(np.mean(np.abs(W) < threshold))


# ---------------------------------------------------------------------------
# Checkpoints: magic "DCNN", u32 version, u32 header length, JSON layer table,
# then little-endian float64 buffers in table order. JSON metadata rides in a
# sidecar file next to the binary.
# ---------------------------------------------------------------------------

def save_checkpoint(network: Network, path: str, metadata: dict | None = None) -> None:
    table = []
    blobs = []
    offset = 0
    for layer in network.layers:
        entry = dict(layer.spec_dict())
        entry["buffers"] = {}
        for name, arr in layer.buffers().items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            entry["buffers"][name] = {"shape": list(arr.shape), "offset": offset,
                                      "count": int(arr.size)}
            blobs.append(data.tobytes())
            offset += arr.size
        table.append(entry)
    header = json.dumps({"layers": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    with open(path + ".json", "w") as fh:
        json.dump(metadata or {}, fh, sort_keys=True, indent=1)


def load_checkpoint(path: str, layer_classes=None):
    layer_classes = layer_classes or LAYER_CLASSES
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len, = struct.unpack("<I", fh.read(4))
        table = json.loads(fh.read(header_len))["layers"]
        raw = fh.read()
    flat = np.frombuffer(raw, dtype="<f8")
    layers = []
    for entry in table:
        buffers = {}
        for name, info in entry.get("buffers", {}).items():
            start = info["offset"]
            buffers[name] = np.array(
                flat[start:start + info["count"]]).reshape(info["shape"])
        cls = layer_classes[entry["kind"]]
        layers.append(cls.from_spec(entry, buffers))
    network = Network(layers)
    try:
        with open(path + ".json") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        metadata = {}
    return network, metadata
