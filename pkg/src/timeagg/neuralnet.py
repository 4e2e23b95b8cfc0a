"""Differentiable layer kernels with hand-derived gradients.

Every layer exposes ``forward(x, train=False, rng=None)`` and ``backward(grad)``.
``backward`` fills ``layer.grads`` (same keys as ``layer.params``) and returns
the gradient with respect to the layer input.  All arithmetic is float64.

Recurrent layers pack their gates side by side, Keras style:

    GRU   kernel[in, 3u]  recurrent[u, 3u]  bias[3u]   gate order z | r | h
    LSTM  kernel[in, 4u]  recurrent[u, 4u]  bias[4u]   gate order i | f | c | o
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


def sigmoid(x):
    return expit(x)


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def orthogonal(rng, n):
    a = rng.normal(size=(n, n))
    q, r = np.linalg.qr(a)
    # sign fix makes the draw uniform over the orthogonal group
    return q * np.sign(np.diag(r))


class Layer:
    """Base class; parameterless layers keep empty dicts."""

    #: parameter names that receive L1/L2 penalties (biases never do)
    weight_keys: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class Dense(Layer):
    """y = x W + b, applied over the last axis of x."""

    weight_keys = ("W",)

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"W": glorot_uniform(rng, n_in, n_out), "b": np.zeros(n_out)}

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense expects last dim {self.n_in}, got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x2 = self._x.reshape(-1, self.n_in)
        g2 = grad.reshape(-1, self.n_out)
        self.grads = {"W": x2.T @ g2, "b": g2.sum(axis=0)}
        return grad @ self.params["W"].T


class TimeDistributedDense(Dense):
    """One dense transform shared by every window of an (n, W, F) input."""

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"time-distributed dense expects (n, W, F), got {x.shape}")
        return super().forward(x, train, rng)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Conv1D(Layer):
    """1-D convolution over the window axis of (n, W, c_in).

    ``valid`` gives W - k + 1 outputs; ``causal`` left-pads k - 1 zero frames so
    output t only sees inputs at positions <= t.
    """

    weight_keys = ("K",)

    def __init__(self, c_in, c_out, kernel_size, padding="valid", rng=None):
        super().__init__()
        if padding not in ("valid", "causal"):
            raise ValueError(f"unknown padding {padding!r}")
        self.c_in, self.c_out, self.k, self.padding = c_in, c_out, kernel_size, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = kernel_size * c_in, kernel_size * c_out
        self.params = {
            "K": glorot_uniform(rng, fan_in, fan_out, shape=(kernel_size, c_in, c_out)),
            "b": np.zeros(c_out),
        }

    def output_length(self, w):
        return w if self.padding == "causal" else w - self.k + 1

    def forward(self, x, train=False, rng=None):
        n, w, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        if self.padding == "valid" and w < self.k:
            raise ShapeError(f"valid convolution needs W >= k ({w} < {self.k})")
        if self.padding == "causal" and self.k > 1:
            x = np.concatenate([np.zeros((n, self.k - 1, c)), x], axis=1)
        self._xp, self._w = x, w
        length = x.shape[1] - self.k + 1
        K = self.params["K"]
        y = np.zeros((n, length, self.c_out)) + self.params["b"]
        for j in range(self.k):
            y += x[:, j:j + length] @ K[j]
        return y

    def backward(self, grad):
        xp = self._xp
        length = grad.shape[1]
        K = self.params["K"]
        dK = np.empty_like(K)
        dxp = np.zeros_like(xp)
        g2 = grad.reshape(-1, self.c_out)
        for j in range(self.k):
            dK[j] = xp[:, j:j + length].reshape(-1, self.c_in).T @ g2
            dxp[:, j:j + length] += grad @ K[j].T
        self.grads = {"K": dK, "b": g2.sum(axis=0)}
        return dxp[:, xp.shape[1] - self._w:]


class GRU(Layer):
    """GRU returning the last hidden state; h0 = 0.

    z = s(x Wz + h Uz + bz), r = s(x Wr + h Ur + br),
    h~ = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) h + z h~
    """

    weight_keys = ("kernel", "recurrent")

    def __init__(self, c_in, units, rng=None):
        super().__init__()
        self.c_in, self.units = c_in, units
        rng = rng if rng is not None else np.random.default_rng(0)
        u = units
        self.params = {
            "kernel": np.concatenate([glorot_uniform(rng, c_in, u) for _ in range(3)], axis=1),
            "recurrent": np.concatenate([orthogonal(rng, u) for _ in range(3)], axis=1),
            "bias": np.zeros(3 * u),
        }

    def forward(self, x, train=False, rng=None):
        n, w, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"GRU expects {self.c_in} inputs, got {c}")
        u = self.units
        Wk, U, b = self.params["kernel"], self.params["recurrent"], self.params["bias"]
        xw = x @ Wk + b
        h = np.zeros((n, u))
        cache = []
        for t in range(w):
            hu = h @ U[:, :2 * u]
            z = expit(xw[:, t, :u] + hu[:, :u])
            r = expit(xw[:, t, u:2 * u] + hu[:, u:])
            rh = r * h
            hh = np.tanh(xw[:, t, 2 * u:] + rh @ U[:, 2 * u:])
            cache.append((h, z, r, rh, hh))
            h = (1.0 - z) * h + z * hh
        self._x, self._cache = x, cache
        return h

    def backward(self, grad):
        x, u = self._x, self.units
        n, w, _ = x.shape
        U = self.params["recurrent"]
        Uz, Ur, Uh = U[:, :u], U[:, u:2 * u], U[:, 2 * u:]
        da_all = np.empty((n, w, 3 * u))
        dU = np.zeros_like(U)
        dh = grad
        for t in reversed(range(w)):
            h, z, r, rh, hh = self._cache[t]
            dz = dh * (hh - h)
            da_h = dh * z * (1.0 - hh * hh)
            drh = da_h @ Uh.T
            da_r = drh * h * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            dU[:, 2 * u:] += rh.T @ da_h
            dU[:, :u] += h.T @ da_z
            dU[:, u:2 * u] += h.T @ da_r
            dh = dh * (1.0 - z) + drh * r + da_z @ Uz.T + da_r @ Ur.T
            da_all[:, t, :u] = da_z
            da_all[:, t, u:2 * u] = da_r
            da_all[:, t, 2 * u:] = da_h
        da2 = da_all.reshape(-1, 3 * u)
        self.grads = {
            "kernel": x.reshape(-1, self.c_in).T @ da2,
            "recurrent": dU,
            "bias": da2.sum(axis=0),
        }
        return da_all @ self.params["kernel"].T


class LSTM(Layer):
    """LSTM returning the last hidden state; forget-gate bias starts at 1."""

    weight_keys = ("kernel", "recurrent")

    def __init__(self, c_in, units, rng=None):
        super().__init__()
        self.c_in, self.units = c_in, units
        rng = rng if rng is not None else np.random.default_rng(0)
        u = units
        bias = np.zeros(4 * u)
        bias[u:2 * u] = 1.0
        self.params = {
            "kernel": np.concatenate([glorot_uniform(rng, c_in, u) for _ in range(4)], axis=1),
            "recurrent": np.concatenate([orthogonal(rng, u) for _ in range(4)], axis=1),
            "bias": bias,
        }

    def forward(self, x, train=False, rng=None):
        n, w, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"LSTM expects {self.c_in} inputs, got {c}")
        u = self.units
        U = self.params["recurrent"]
        xw = x @ self.params["kernel"] + self.params["bias"]
        h = np.zeros((n, u))
        cell = np.zeros((n, u))
        cache = []
        for t in range(w):
            a = xw[:, t] + h @ U
            i = expit(a[:, :u])
            f = expit(a[:, u:2 * u])
            g = np.tanh(a[:, 2 * u:3 * u])
            o = expit(a[:, 3 * u:])
            c_prev = cell
            cell = f * c_prev + i * g
            tc = np.tanh(cell)
            cache.append((h, c_prev, i, f, g, o, tc))
            h = o * tc
        self._x, self._cache = x, cache
        return h

    def backward(self, grad):
        x, u = self._x, self.units
        n, w, _ = x.shape
        U = self.params["recurrent"]
        da_all = np.empty((n, w, 4 * u))
        dU = np.zeros_like(U)
        dh = grad
        dc = np.zeros_like(grad)
        for t in reversed(range(w)):
            h_prev, c_prev, i, f, g, o, tc = self._cache[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dc = dc * f
            dU += h_prev.T @ da
            dh = da @ U.T
            da_all[:, t] = da
        da2 = da_all.reshape(-1, 4 * u)
        self.grads = {
            "kernel": x.reshape(-1, self.c_in).T @ da2,
            "recurrent": dU,
            "bias": da2.sum(axis=0),
        }
        return da_all @ self.params["kernel"].T


def bce_loss(logits, y):
    """Mean binary cross-entropy on sigmoid(logits).

    Returns ``(loss, grad_logits)`` with grad = (p - y) / n.
    """
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(expit(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(loss), (p - y) / y.shape[0]


def penalty(weights, l1, l2):
    """L1 + squared-L2 penalty over a list of weight arrays, with gradients."""
    value = 0.0
    grads = []
    for w in weights:
        value += l1 * np.abs(w).sum() + l2 * (w * w).sum()
        grads.append(l1 * np.sign(w) + 2.0 * l2 * w)
    return float(value), grads


class Adam:
    """Adam with bias correction; defaults are the Keras ones."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place."""
        if len(params) != len(self.m):
            raise ShapeError("parameter list does not match optimizer state")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam):
    state.step(params, grads)
    return params, state
