"""A small numpy neural-network engine with hand-written backward passes.

Everything is float64 and batch-first. Each layer caches what its
backward pass needs during ``forward`` and accumulates parameter
gradients into ``grads`` on ``backward``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64
PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operands whose shapes do not conform."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# -- functional ops ---------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``y[..., j] = sum_i weights[j, i] * x[..., i] + bias[j]``."""
    _check(
        weights.ndim == 2 and x.shape[-1] == weights.shape[1] and bias.shape == (weights.shape[0],),
        f"dense: input {x.shape} incompatible with weights {weights.shape} / bias {bias.shape}",
    )
    return x @ weights.T + bias


def dense_backward(grad: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(d_input, d_weights, d_bias)`` for :func:`dense`."""
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return grad @ weights, g2.T @ x2, g2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward given the forward *output* ``y``."""
    return grad * y * (1.0 - y)


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    Accepts the single-image form ``x[H, W]`` with ``kernels[K, kh, kw]``
    (output ``[K, H-kh+1, W-kw+1]``) or the batched multi-channel form
    ``x[B, C, H, W]`` with ``kernels[K, C, kh, kw]``.
    """
    if x.ndim == 2:
        _check(kernels.ndim == 3, f"conv2d: kernels {kernels.shape} must be K x kh x kw for a 2-D input")
        return conv2d(x[None, None], kernels[:, None], bias)[0]
    _check(x.ndim == 4 and kernels.ndim == 4 and x.shape[1] == kernels.shape[1],
           f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    kh, kw = kernels.shape[2:]
    _check(kh <= x.shape[2] and kw <= x.shape[3],
           f"conv2d: kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    _check(bias.shape == (kernels.shape[0],), f"conv2d: bias {bias.shape} vs {kernels.shape[0]} kernels")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B C Ho Wo kh kw
    return np.einsum("bcijuv,kcuv->bkij", win, kernels, optimize=True) + bias[None, :, None, None]


def conv2d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Return ``(d_input, d_kernels, d_bias)`` for the batched :func:`conv2d`."""
    kh, kw = kernels.shape[2:]
    ho, wo = grad.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    d_kernels = np.einsum("bcijuv,bkij->kcuv", win, grad, optimize=True)
    d_bias = grad.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    # scatter over whichever is fewer: kernel offsets or output positions
    if kh * kw <= ho * wo:
        for u in range(kh):
            for v in range(kw):
                dx[:, :, u:u + ho, v:v + wo] += np.tensordot(grad, kernels[:, :, u, v], axes=(1, 0)).transpose(0, 3, 1, 2)
    else:
        for i in range(ho):
            for j in range(wo):
                dx[:, :, i:i + kh, j:j + kw] += np.tensordot(grad[:, :, i, j], kernels, axes=(1, 0))
    return dx, d_kernels, d_bias


@dataclass
class LstmParams:
    """Gate weights stacked as ``[input | forget | candidate | output]``."""

    w_x: np.ndarray  # (d, 4u)
    w_h: np.ndarray  # (u, 4u)
    b: np.ndarray  # (4u,)

    @property
    def units(self) -> int:
        return self.w_h.shape[0]


def _check_lstm(d: int, h_prev: np.ndarray, c_prev: np.ndarray, params: LstmParams) -> None:
    u = params.units
    _check(
        params.w_x.shape[1] == 4 * u and params.w_h.shape == (u, 4 * u) and params.b.shape == (4 * u,)
        and d == params.w_x.shape[0] and h_prev.shape[-1] == u and c_prev.shape[-1] == u,
        f"lstm: input width {d}, h {h_prev.shape}, c {c_prev.shape} do not fit "
        f"w_x {params.w_x.shape}, w_h {params.w_h.shape}, b {params.b.shape}",
    )


def lstm_cell(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LstmParams):
    """One LSTM step. Returns ``(h_t, c_t, cache)``."""
    u = params.units
    _check_lstm(x_t.shape[-1], h_prev, c_prev, params)
    z = x_t @ params.w_x + h_prev @ params.w_h + params.b
    h_t, c_t, gates = _lstm_gates(z, c_prev, u)
    return h_t, c_t, (x_t, h_prev, c_prev, *gates)


def _lstm_gates(z: np.ndarray, c_prev: np.ndarray, u: int):
    s = sigmoid(z)
    i, f, o = s[..., :u], s[..., u:2 * u], s[..., 3 * u:]
    g = np.tanh(z[..., 2 * u:3 * u])
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    return o * tc, c_t, (i, f, g, o, tc)


def lstm_cell_backward(dh: np.ndarray, dc: np.ndarray, cache, params: LstmParams):
    """Backward of one step; returns ``(dx, dh_prev, dc_prev, dw_x, dw_h, db)``."""
    x_t, h_prev = cache[:2]
    dz, dc_prev = _lstm_dz(dh, dc, cache)
    return dz @ params.w_x.T, dz @ params.w_h.T, dc_prev, x_t.T @ dz, h_prev.T @ dz, dz.sum(axis=0)


def _lstm_dz(dh, dc, cache):
    """Gradient w.r.t. the stacked gate pre-activations, plus ``dc_prev``."""
    _, _, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc ** 2)
    u = i.shape[-1]
    dz = np.empty(i.shape[:-1] + (4 * u,))
    dz[..., :u] = dc * g * i * (1 - i)
    dz[..., u:2 * u] = dc * c_prev * f * (1 - f)
    dz[..., 2 * u:3 * u] = dc * i * (1 - g ** 2)
    dz[..., 3 * u:] = do * o * (1 - o)
    return dz, dc * f


def lstm_forward(x: np.ndarray, params: LstmParams, h0=None, c0=None):
    """Unroll over ``x[B, T, d]``; returns ``(H[B, T, u], caches)``.

    The input projection for all steps is one matrix product; only the
    recurrent part runs step by step.
    """
    b, t, d = x.shape
    u = params.units
    h = np.zeros((b, u)) if h0 is None else h0
    c = np.zeros((b, u)) if c0 is None else c0
    _check_lstm(d, h, c, params)
    xw = (x.reshape(b * t, d) @ params.w_x).reshape(b, t, 4 * u)
    hs = np.empty((b, t, u))
    caches = []
    for step in range(t):
        z = xw[:, step] + h @ params.w_h + params.b
        h_new, c_new, gates = _lstm_gates(z, c, u)
        caches.append((x[:, step], h, c, *gates))
        h, c = h_new, c_new
        hs[:, step] = h
    return hs, caches


def lstm_backward(d_hs: np.ndarray, caches, params: LstmParams):
    """Backpropagation through time given ``dLoss/dH`` for every step."""
    b, t, u = d_hs.shape
    d = params.w_x.shape[0]
    dz_all = np.empty((b, t, 4 * u))
    dh_next = np.zeros((b, u))
    dc_next = np.zeros((b, u))
    for step in reversed(range(t)):
        dz, dc_next = _lstm_dz(d_hs[:, step] + dh_next, dc_next, caches[step])
        dh_next = dz @ params.w_h.T
        dz_all[:, step] = dz
    xs = np.stack([cache[0] for cache in caches], axis=1).reshape(b * t, d)
    h_prev = np.stack([cache[1] for cache in caches], axis=1).reshape(b * t, u)
    dz_flat = dz_all.reshape(b * t, 4 * u)
    dx = (dz_flat @ params.w_x.T).reshape(b, t, d)
    return dx, xs.T @ dz_flat, h_prev.T @ dz_flat, dz_flat.sum(axis=0)


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    p = np.clip(np.asarray(p, dtype=DTYPE), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=DTYPE).reshape(p.shape)
    n = p.size
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)) / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad


# -- layers -----------------------------------------------------------------

class Layer:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def config(self) -> dict:
        return {}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params = {"W": glorot_uniform(rng, (n_out, n_in), n_in, n_out), "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return dense(x, self.params["W"], self.params["b"])

    def backward(self, grad):
        dx, dw, db = dense_backward(grad, self._x, self.params["W"])
        self.grads["W"] += dw
        self.grads["b"] += db
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return sigmoid_backward(grad, self._y)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kh: int, kw: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        fan_out = out_channels * kh * kw
        self.params = {
            "K": glorot_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, fan_out),
            "b": np.zeros(out_channels),
        }
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return conv2d(x, self.params["K"], self.params["b"])

    def backward(self, grad):
        dx, dk, db = conv2d_backward(grad, self._x, self.params["K"])
        self.grads["K"] += dk
        self.grads["b"] += db
        return dx


class LSTM(Layer):
    """One recurrent layer over ``x[B, T, d]``.

    Emits the full hidden sequence, or only the last hidden state when
    ``return_sequences`` is false.
    """

    def __init__(self, n_in: int, units: int, return_sequences: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.units = units
        self.return_sequences = return_sequences
        b = np.zeros(4 * units)
        b[units:2 * units] = 1.0  # forget gate
        self.params = {
            "Wx": glorot_uniform(rng, (n_in, 4 * units), n_in, units),
            "Wh": glorot_uniform(rng, (units, 4 * units), units, units),
            "b": b,
        }
        self.zero_grad()

    def _p(self) -> LstmParams:
        return LstmParams(self.params["Wx"], self.params["Wh"], self.params["b"])

    def forward(self, x):
        _check(x.ndim == 3, f"LSTM expects [batch, time, features], got {x.shape}")
        hs, self._caches = lstm_forward(x, self._p())
        self._t = x.shape[1]
        return hs if self.return_sequences else hs[:, -1]

    def backward(self, grad):
        if not self.return_sequences:
            d_hs = np.zeros((grad.shape[0], self._t, self.units))
            d_hs[:, -1] = grad
        else:
            d_hs = grad
        dx, dwx, dwh, db = lstm_backward(d_hs, self._caches, self._p())
        self.grads["Wx"] += dwx
        self.grads["Wh"] += dwh
        self.grads["b"] += db
        return dx


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"layer{i}.{name}", value

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.grads.items():
                yield f"layer{i}.{name}", value

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                key = f"layer{i}.{name}"
                _check(state[key].shape == layer.params[name].shape,
                       f"{key}: shape {state[key].shape} != {layer.params[name].shape}")
                layer.params[name][...] = state[key]

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs).reshape(-1) if outs else np.zeros(0)


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        _check(g.shape == p.shape, f"adam: gradient {g.shape} for parameter {name} {p.shape}")
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 32
    patience: int = 10
    validation_fraction: float = 0.2
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Sequential
    history: list[EpochRecord]
    best_epoch: int


def evaluate_loss(model: Sequential, x: np.ndarray, y: np.ndarray) -> float:
    return bce_loss(model.predict(x), y)[0]


def train(model: Sequential, x: np.ndarray, y: np.ndarray, config: TrainConfig | None = None) -> TrainResult:
    """Mini-batch Adam on BCE with early stopping on validation loss.

    The model is trained in place and left holding the parameters of the
    epoch with the lowest validation loss (training loss when there is no
    validation split).
    """
    config = config or TrainConfig()
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE).reshape(-1)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    _check(len(x) == len(y), f"train: {len(x)} inputs but {len(y)} labels")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(round(config.validation_fraction * len(x)))
    if config.validation_fraction > 0 and n_val == 0:
        raise ValueError("validation_fraction leaves no validation samples")
    if n_val >= len(x):
        raise ValueError("validation split leaves no training samples")
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_tr, y_tr = x[tr_idx], y[tr_idx]

    state = AdamState(learning_rate=config.learning_rate)
    params = model.params()
    history: list[EpochRecord] = []
    best, best_epoch, best_state, stale = np.inf, 0, model.get_state(), 0

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            model.zero_grad()
            p = model.forward(x_tr[idx]).reshape(-1)
            loss, grad = bce_loss(p, y_tr[idx])
            model.backward(grad.reshape(-1, 1))
            adam_step(params, model.grads(), state)
            total += loss * len(idx)
        train_loss = total / len(x_tr)
        val_loss = evaluate_loss(model, x[val_idx], y[val_idx]) if n_val else train_loss
        history.append(EpochRecord(epoch, train_loss, val_loss))
        logger.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

        if val_loss < best:
            best, best_epoch, best_state, stale = val_loss, epoch, model.get_state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.set_state(best_state)
    return TrainResult(model, history, best_epoch)


# -- gradient checking ------------------------------------------------------

def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_model_gradients(model: Sequential, x: np.ndarray, y: np.ndarray, eps: float = 1e-5) -> dict[str, float]:
    """Compare backprop against central differences for every parameter and the input."""
    x = np.array(x, dtype=DTYPE)

    def loss() -> float:
        return bce_loss(model.forward(x).reshape(-1), y)[0]

    model.zero_grad()
    p = model.forward(x).reshape(-1)
    _, g = bce_loss(p, y)
    dx = model.backward(g.reshape(-1, 1))
    grads = copy.deepcopy(model.grads())
    report = {name: max_relative_error(grads[name], numerical_gradient(loss, value, eps))
              for name, value in model.named_params()}
    report["input"] = max_relative_error(dx, numerical_gradient(loss, x, eps))
    return report
