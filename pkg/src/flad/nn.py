"""Dense neural-network core written directly on numpy.

Parameters of every model live in one flat float64 vector so that clients and
the server exchange a single array per update. Layer weights are views into
that vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax_logits", "linear")
LOSSES = ("cross_entropy", "mse")


class ShapeError(ValueError):
    """Input array does not match the model's expected shape."""


class EmptyDataError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "softmax_logits"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"layer_sizes must hold >= 2 positive ints, got {self.layer_sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


# A layer is (weights (fan_in, fan_out), bias (fan_out,), activation name or None).
Layer = tuple[np.ndarray, np.ndarray, "str | None"]


def _unpack(config: MlpConfig, params: np.ndarray) -> list[Layer]:
    layers = []
    offset = 0
    n_layers = len(config.layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(config.layer_sizes[:-1], config.layer_sizes[1:])):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        act = config.hidden_activation if i < n_layers - 1 else None
        layers.append((w, b, act))
    return layers


@dataclass
class Model:
    config: MlpConfig
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.config.n_params,):
            raise ShapeError(
                f"params must have shape ({self.config.n_params},), got {self.params.shape}")

    def layers(self) -> list[Layer]:
        return _unpack(self.config, self.params)

    def copy(self) -> "Model":
        return Model(self.config, self.params.copy())

    def with_params(self, params: np.ndarray) -> "Model":
        return Model(self.config, np.array(params, dtype=np.float64))

    @property
    def d_in(self) -> int:
        return self.config.d_in

    @property
    def d_out(self) -> int:
        return self.config.d_out


@dataclass
class Autoencoder:
    encoder: Model
    decoder: Model
    allow_square: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.decoder.d_out != self.encoder.d_in:
            raise ShapeError("decoder output dimension must equal encoder input dimension")
        if self.encoder.d_out != self.decoder.d_in:
            raise ShapeError("encoder output must feed the decoder input")
        if not self.allow_square and self.encoder.d_out >= self.encoder.d_in:
            raise ValueError("bottleneck dimension must be smaller than the input dimension")

    def layers(self) -> list[Layer]:
        # the bottleneck stays linear: an encoder's last layer carries no activation
        return self.encoder.layers() + self.decoder.layers()

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.encoder.params, self.decoder.params])

    def with_params(self, params: np.ndarray) -> "Autoencoder":
        params = np.asarray(params, dtype=np.float64)
        n_enc = self.encoder.config.n_params
        return Autoencoder(self.encoder.with_params(params[:n_enc]),
                           self.decoder.with_params(params[n_enc:]),
                           allow_square=self.allow_square)

    def copy(self) -> "Autoencoder":
        return self.with_params(self.params)

    @property
    def d_in(self) -> int:
        return self.encoder.d_in

    @property
    def d_out(self) -> int:
        return self.decoder.d_out

    @property
    def output_head(self) -> str:
        return "linear"


def _output_head(model) -> str:
    return model.output_head if isinstance(model, Autoencoder) else model.config.output_head


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def init_model(config: MlpConfig, seed=None) -> Model:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(config.n_params)
    model = Model(config, params)
    for w, _, _ in model.layers():
        fan_in, fan_out = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return model


def init_autoencoder(d_in: int, hidden: int = 64, bottleneck: int = 16,
                     activation: str = "tanh", seed=None) -> Autoencoder:
    enc_seed, dec_seed = as_seed_sequence(seed).spawn(2)
    enc = init_model(MlpConfig((d_in, hidden, bottleneck), activation, "linear"), enc_seed)
    dec = init_model(MlpConfig((bottleneck, hidden, d_in), activation, "linear"), dec_seed)
    return Autoencoder(enc, dec)


def _activate(z: np.ndarray, act: str | None) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _check_batch(model, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.d_in:
        raise ShapeError(f"expected batch of shape (n, {model.d_in}), got {batch.shape}")
    return batch


def _forward_trace(layers: Sequence[Layer], x: np.ndarray):
    """Run the stack, keeping each layer's input and pre-activation."""
    inputs, pre = [], []
    a = x
    for w, b, act in layers:
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = _activate(z, act)
    return a, inputs, pre


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(model, batch) -> np.ndarray:
    """Output of the final affine layer, before any head transform."""
    batch = _check_batch(model, batch)
    out, _, _ = _forward_trace(model.layers(), batch)
    return out


def forward(model, batch) -> np.ndarray:
    """Model output: probabilities for a softmax head, raw values otherwise."""
    out = logits(model, batch)
    if _output_head(model) == "softmax_logits":
        return softmax(out)
    return out


def reconstruct(ae: Autoencoder, batch) -> np.ndarray:
    return forward(ae, batch)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def cross_entropy_loss(logits: np.ndarray, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D (n, k)")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(n), labels]))


def mse_loss(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def loss_value(model, batch, target, loss: str) -> float:
    out = logits(model, batch)
    if loss == "cross_entropy":
        return cross_entropy_loss(out, target)
    if loss == "mse":
        if _output_head(model) != "linear":
            raise ValueError("mse loss requires a linear output head")
        return mse_loss(np.asarray(target, dtype=np.float64), out)
    raise ValueError(f"unknown loss {loss!r}")


def backward(model, batch, target, loss: str) -> np.ndarray:
    """Exact gradient of the batch-mean loss with respect to the flat parameters."""
    batch = _check_batch(model, batch)
    layers = model.layers()
    out, inputs, pre = _forward_trace(layers, batch)
    n = batch.shape[0]

    if loss == "cross_entropy":
        labels = _check_labels(target, n, out.shape[1])
        delta = softmax(out)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
    elif loss == "mse":
        if _output_head(model) != "linear":
            raise ValueError("mse loss requires a linear output head")
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.shape:
            raise ShapeError(f"target shape {target.shape} does not match output {out.shape}")
        delta = 2.0 * (out - target) / out.size
    else:
        raise ValueError(f"unknown loss {loss!r}")

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _, act = layers[i]
        if act == "relu":
            delta = delta * (pre[i] > 0)
        elif act == "tanh":
            delta = delta * (1.0 - np.tanh(pre[i]) ** 2)
        grads.append((inputs[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = delta @ w.T
    grads.reverse()
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        f_plus = fn(x)
        x[i] = orig - eps
        f_minus = fn(x)
        x[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def finite_diff_gradient(model, batch, target, loss: str, eps: float = 1e-6) -> np.ndarray:
    batch = _check_batch(model, batch)
    return central_difference(lambda p: loss_value(model.with_params(p), batch, target, loss),
                              model.params, eps)


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(v, v)))


@dataclass
class OptimizerState:
    kind: str = "adam"
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params, grad, lr: float) -> np.ndarray:
    """Return updated params; advances ``state`` in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError(f"params {params.shape} and grad {grad.shape} differ")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    state.t += 1
    if state.kind == "sgd":
        return params - lr * grad
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def train_local(model, features, target, lr: float = 0.001, bs: int = 64, epochs: int = 1,
                seed=None, loss: str = "cross_entropy", optimizer: str = "adam"):
    """Mini-batch training on a copy of ``model``.

    Each epoch reshuffles with a generator spawned from ``seed``; the last batch
    may be short. Works for both :class:`Model` and :class:`Autoencoder`.
    """
    features = _check_batch(model, features)
    n = features.shape[0]
    if n == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    if bs < 1:
        raise ValueError("bs must be positive")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    target = np.asarray(target)
    params = model.params.copy()
    if epochs == 0:
        return model.with_params(params)

    ss = as_seed_sequence(seed)
    state = OptimizerState(kind=optimizer)
    current = model.with_params(params)
    for epoch_seed in ss.spawn(epochs):
        order = np.random.default_rng(epoch_seed).permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            grad = backward(current, features[idx], target[idx], loss)
            params = optimizer_step(state, params, grad, lr)
            current = model.with_params(params)
    return current
