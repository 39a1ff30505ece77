"""Small fully connected networks with explicit backprop, L1 loss and Adam.

The Isometric Propagator is a three-layer network mapping features to PCF
coordinates; the same layer machinery backs the toy feature model and the
linear pretraining head in :mod:`pcfgaze.pipeline`.

Weights are stored as ``(out, in)`` matrices, so a layer computes
``x @ W.T + b``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError, InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "identity")
DEFAULT_HIDDEN = (256, 128)
DEFAULT_BATCH = 64

WEIGHTS_MAGIC = b"PCFW"
WEIGHTS_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass(frozen=True)
class MlpParams:
    """Layer weights, biases and the activation applied after each hidden layer.

    ``activations`` has one entry per hidden layer (``len(weights) - 1``);
    the output layer is always affine.
    """

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise InvalidInputError("weights and biases must be non-empty and of equal length")
        if len(self.activations) != len(self.weights) - 1:
            raise InvalidInputError("need one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InvalidInputError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError(f"layer {i} input width does not match layer {i - 1}")

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def d_in(self):
        return self.weights[0].shape[1]

    @property
    def d_out(self):
        return self.weights[-1].shape[0]

    def tensors(self):
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def with_tensors(self, tensors):
        tensors = list(tensors)
        return MlpParams(weights=tuple(tensors[0::2]), biases=tuple(tensors[1::2]),
                         activations=self.activations)

    def zeros_like(self):
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def all_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_mlp(widths, activation="relu", seed=0, rng=None):
    """Glorot-uniform weights and zero biases for the given layer widths."""
    rng = np.random.default_rng(seed) if rng is None else rng
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    acts = (activation,) * (len(widths) - 2)
    return MlpParams(weights=tuple(weights), biases=tuple(biases), activations=acts)


def init_propagator(d_in, hidden=DEFAULT_HIDDEN, activation="relu", seed=0):
    """Three affine layers ``d_in -> h1 -> h2 -> 3``."""
    if len(hidden) != 2:
        raise InvalidInputError("the propagator has exactly two hidden layers")
    return init_mlp([d_in, *hidden, 3], activation=activation, seed=seed)


@dataclass(frozen=True)
class ForwardCache:
    params: MlpParams
    inputs: np.ndarray
    pre: tuple
    post: tuple


def mlp_forward(params, x):
    """Evaluate the network on one row ``(d_in,)`` or a batch ``(n, d_in)``.

    Returns the output and a cache for :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in or x.ndim not in (1, 2):
        raise InvalidInputError(f"input shape {x.shape} does not match d_in={params.d_in}")
    h = x
    pre, post = [], []
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = z if i == last else _act(params.activations[i], z)
        post.append(h)
    return h, ForwardCache(params=params, inputs=x, pre=tuple(pre), post=tuple(post))


def mlp_backward(params, cache, grad_out):
    """Reverse-mode gradients of ``sum(output * grad_out)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is an
    :class:`MlpParams` holding gradients in place of weights. For a batch,
    parameter gradients are summed over rows.
    """
    if cache.params is not params:
        raise ContractViolation("forward cache was produced with different parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.post[-1].shape:
        raise ContractViolation(f"grad_out shape {grad_out.shape} != output shape {cache.post[-1].shape}")

    n_layers = len(params.weights)
    gW, gb = [None] * n_layers, [None] * n_layers
    delta = grad_out
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            delta = delta * _act_grad(params.activations[i], cache.pre[i], cache.post[i])
        prev = cache.inputs if i == 0 else cache.post[i - 1]
        if delta.ndim == 1:
            gW[i] = np.outer(delta, prev)
            gb[i] = delta.copy()
        else:
            gW[i] = delta.T @ prev
            gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    grads = MlpParams(weights=tuple(gW), biases=tuple(gb), activations=params.activations)
    return grads, delta


def l1_loss_grad(pred, target):
    """Mean absolute error over all components and its gradient w.r.t. ``pred``.

    ``sign(0)`` is taken as 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass(frozen=True)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    tensors = params.tensors() if isinstance(params, MlpParams) else list(params)
    zeros = tuple(np.zeros_like(np.asarray(t, dtype=np.float64)) for t in tensors)
    return AdamState(m=zeros, v=zeros, t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are either both :class:`MlpParams` or both
    sequences of arrays. Returns ``(new_params, new_state)``.

    Raises
    ------
    NumericalError
        If any gradient entry is non-finite; nothing is updated.
    """
    wrap = isinstance(params, MlpParams)
    p = params.tensors() if wrap else [np.asarray(x, dtype=np.float64) for x in params]
    g = grads.tensors() if isinstance(grads, MlpParams) else [np.asarray(x, dtype=np.float64) for x in grads]
    if len(p) != len(g) or len(p) != len(state.m):
        raise InvalidInputError("parameter, gradient and optimizer state lengths differ")
    for pi, gi in zip(p, g):
        if pi.shape != gi.shape:
            raise InvalidInputError(f"gradient shape {gi.shape} != parameter shape {pi.shape}")
        if not np.all(np.isfinite(gi)):
            raise NumericalError("non-finite gradient; Adam step aborted")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for pi, gi, mi, vi in zip(p, g, state.m, state.v):
        m = b1 * mi + (1.0 - b1) * gi
        v = b2 * vi + (1.0 - b2) * gi * gi
        new_p.append(pi - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(m=tuple(new_m), v=tuple(new_v), t=t, lr=state.lr,
                          beta1=b1, beta2=b2, eps=state.eps)
    return (params.with_tensors(new_p) if wrap else new_p), new_state


@dataclass(frozen=True)
class TrainReport:
    epoch_losses: tuple
    initial_loss: float
    final_loss: float
    epochs: int
    seed: int


def mean_l1(params, features, targets):
    pred, _ = mlp_forward(params, features)
    return float(np.mean(np.abs(pred - targets)))


def train_propagator(features, targets, epochs=100, lr=1e-4, seed=0, batch_size=DEFAULT_BATCH,
                     hidden=DEFAULT_HIDDEN, activation="relu", params=None):
    """Fit a propagator network so that ``net(features) ~ targets`` under L1.

    Mini-batches are reshuffled each epoch with a generator seeded by
    ``seed`` (the same seed also initializes the weights unless ``params`` is
    given). ``epoch_losses`` holds the running mean batch loss of each epoch;
    ``initial_loss`` and ``final_loss`` are full-data losses before and after.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(getattr(targets, "coords", targets), dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise InvalidInputError(f"features {X.shape} and targets {Y.shape} do not pair up")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_mlp([X.shape[1], *hidden, Y.shape[1]], activation=activation, rng=rng)
    n = X.shape[0]
    batch = min(batch_size, n)
    state = adam_init(params, lr=lr)

    initial = mean_l1(params, X, Y)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            pred, cache = mlp_forward(params, X[idx])
            loss, grad = l1_loss_grad(pred, Y[idx])
            grads, _ = mlp_backward(params, cache, grad)
            params, state = adam_step(params, grads, state)
            total += loss * idx.size
        losses.append(total / n)
        logger.debug("propagator epoch %d: L1 %.6g", epoch + 1, losses[-1])
    final = mean_l1(params, X, Y) if epochs else initial
    if not np.isfinite(final):
        raise NumericalError("propagator training diverged")
    report = TrainReport(epoch_losses=tuple(losses), initial_loss=initial, final_loss=final,
                         epochs=epochs, seed=seed)
    return params, report


# --- serialization ---------------------------------------------------------

_ACT_CODES = {"identity": 0, "relu": 1, "tanh": 2}


def params_to_bytes(params):
    """Binary layout: ``PCFW``, u16 version, u16 layer count, then per layer
    u32 rows, u32 cols, row-major f64 weights, f64 biases (little-endian).

    Hidden-layer activations follow as one u8 code each (0 identity,
    1 relu, 2 tanh).
    """
    parts = [WEIGHTS_MAGIC, struct.pack("<HH", WEIGHTS_VERSION, len(params.weights))]
    for W, b in zip(params.weights, params.biases):
        parts.append(struct.pack("<II", *W.shape))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(bytes(_ACT_CODES[a] for a in params.activations))
    return b"".join(parts)


def params_from_bytes(buf):
    if len(buf) < 8 or buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a PCFW weights file (bad magic)")
    version, n_layers = struct.unpack_from("<HH", buf, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    off = 8
    weights, biases = [], []
    try:
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            nw = rows * cols * 8
            if off + nw + rows * 8 > len(buf):
                raise FormatError("truncated weights file")
            W = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
            off += nw
            b = np.frombuffer(buf, dtype="<f8", count=rows, offset=off)
            off += rows * 8
            weights.append(W.astype(np.float64))
            biases.append(b.astype(np.float64))
    except struct.error as exc:
        raise FormatError("truncated weights file") from exc
    codes = buf[off:]
    if len(codes) != n_layers - 1:
        raise FormatError("activation table length does not match layer count")
    names = {v: k for k, v in _ACT_CODES.items()}
    try:
        acts = tuple(names[c] for c in codes)
    except KeyError as exc:
        raise FormatError(f"unknown activation code {exc.args[0]}") from exc
    return MlpParams(weights=tuple(weights), biases=tuple(biases), activations=acts)


def params_to_json(params):
    return json.dumps({
        "format": "PCFW",
        "version": WEIGHTS_VERSION,
        "activations": list(params.activations),
        "layers": [{"weights": W.tolist(), "biases": b.tolist()}
                   for W, b in zip(params.weights, params.biases)],
    }, indent=1)


def params_from_json(text):
    d = json.loads(text)
    try:
        return MlpParams(weights=tuple(np.asarray(l["weights"], dtype=np.float64) for l in d["layers"]),
                         biases=tuple(np.asarray(l["biases"], dtype=np.float64) for l in d["layers"]),
                         activations=tuple(d["activations"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed weights JSON: {exc}") from exc
