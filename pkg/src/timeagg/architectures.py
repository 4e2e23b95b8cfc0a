"""The six time-aggregation architectures, training with checkpointing, inference."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .neuralnet import (
    GRU,
    LSTM,
    Adam,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    ReLU,
    TimeDistributedDense,
    bce_loss,
    penalty,
)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ArchitectureKind(str, enum.Enum):
    DENSE = "dense"
    TDD_DENSE = "tdd_dense"
    TDD_GRU = "tdd_gru"
    TDD_LSTM = "tdd_lstm"
    TDD_CNN_VALID = "tdd_cnn_valid"
    TDD_CNN_CAUSAL = "tdd_cnn_causal"

    @property
    def is_conv(self):
        return self in (ArchitectureKind.TDD_CNN_VALID, ArchitectureKind.TDD_CNN_CAUSAL)


ALL_KINDS = tuple(ArchitectureKind)


@dataclass
class HyperParams:
    units_input: int = 16
    units_agg: int = 16
    units_dense: int = 8
    l1: float = 0.0
    l2: float = 0.0
    dropout: float = 0.0
    conv_kernel: int = 2

    def __post_init__(self):
        for name in ("units_input", "units_agg", "units_dense", "conv_kernel"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
            setattr(self, name, int(getattr(self, name)))
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization coefficients must be non-negative")
        if not 0.0 <= self.dropout <= 0.9:
            raise ValueError("dropout must lie in [0, 0.9]")

    def to_dict(self):
        return {
            "units_input": self.units_input,
            "units_agg": self.units_agg,
            "units_dense": self.units_dense,
            "l1": float(self.l1),
            "l2": float(self.l2),
            "dropout": float(self.dropout),
            "conv_kernel": self.conv_kernel,
        }


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class Network:
    """An ordered stack of layers ending in a single-logit output layer.

    ``repr_index`` points at the layer whose output is the final dense
    representation; ``penalized`` lists layers whose weights carry L1/L2.
    """

    def __init__(self, kind, hp, layers, repr_index, penalized):
        self.kind = ArchitectureKind(kind)
        self.hp = hp
        self.layers: list[Layer] = layers
        self.repr_index = repr_index
        self.penalized = penalized

    def forward(self, x, train=False, rng=None, stop=None):
        out = x
        for layer in self.layers[:stop]:
            out = layer.forward(out, train, rng)
        return out

    def logits(self, x, train=False, rng=None):
        return self.forward(x, train, rng)[:, 0]

    def backward(self, grad_logits):
        grad = grad_logits[:, None]
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def penalty(self):
        weights = [l.params[k] for l in self.penalized for k in l.weight_keys]
        return penalty(weights, self.hp.l1, self.hp.l2)

    def loss_and_grads(self, x, y, rng=None, train=True):
        """Regularized BCE and its gradient; fills ``layer.grads``."""
        loss, dlogits = bce_loss(self.logits(x, train, rng), y)
        self.backward(dlogits)
        value, pgrads = self.penalty()
        i = 0
        for layer in self.penalized:
            for k in layer.weight_keys:
                layer.grads[k] = layer.grads[k] + pgrads[i]
                i += 1
        return loss + value

    def param_list(self):
        return [l.params[k] for l in self.layers for k in sorted(l.params)]

    def grad_list(self):
        return [l.grads[k] for l in self.layers for k in sorted(l.params)]

    def n_params(self):
        return sum(l.n_params() for l in self.layers)

    def get_weights(self):
        return [{k: v.copy() for k, v in l.params.items()} for l in self.layers]

    def set_weights(self, weights):
        if len(weights) != len(self.layers):
            raise ValueError("weight list does not match layer count")
        for layer, w in zip(self.layers, weights):
            if set(w) != set(layer.params):
                raise ValueError(f"parameter names differ for {type(layer).__name__}")
            for k, v in w.items():
                if layer.params[k].shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {type(layer).__name__}.{k}")
                layer.params[k] = np.array(v, dtype=float)


def build_network(kind, hp: HyperParams, n_features, n_windows, seed=0) -> Network:
    kind = ArchitectureKind(kind)
    rng = np.random.default_rng(seed)
    F, W = n_features, n_windows
    ui, ua, ud = hp.units_input, hp.units_agg, hp.units_dense

    if kind is ArchitectureKind.DENSE:
        inp, agg = Dense(W * F, ui, rng), Dense(ui, ua, rng)
        head = [Flatten(), inp, ReLU(), Dropout(hp.dropout), agg, ReLU(), Dropout(hp.dropout)]
        agg_width = ua
    else:
        inp = TimeDistributedDense(F, ui, rng)
        head = [inp, ReLU(), Dropout(hp.dropout)]
        if kind is ArchitectureKind.TDD_DENSE:
            agg = Dense(W * ui, ua, rng)
            head += [Flatten(), agg, ReLU(), Dropout(hp.dropout)]
            agg_width = ua
        elif kind is ArchitectureKind.TDD_GRU:
            agg = GRU(ui, ua, rng)
            head += [agg, Dropout(hp.dropout)]
            agg_width = ua
        elif kind is ArchitectureKind.TDD_LSTM:
            agg = LSTM(ui, ua, rng)
            head += [agg, Dropout(hp.dropout)]
            agg_width = ua
        else:
            padding = "valid" if kind is ArchitectureKind.TDD_CNN_VALID else "causal"
            if padding == "valid" and hp.conv_kernel > W:
                raise ValueError(f"kernel {hp.conv_kernel} exceeds {W} windows")
            agg = Conv1D(ui, ua, hp.conv_kernel, padding, rng)
            head += [agg, ReLU(), Dropout(hp.dropout), Flatten()]
            agg_width = agg.output_length(W) * ua

    dense = Dense(agg_width, ud, rng)
    layers = head + [dense, ReLU(), Dense(ud, 1, rng)]
    return Network(kind, hp, layers, repr_index=len(layers) - 1, penalized=[inp, agg, dense])


@dataclass
class TrainedModel:
    network: Network
    history: dict = field(default_factory=lambda: {"train_loss": [], "val_loss": []})
    best_epoch: int = 0
    stats: object = None
    schema: list = None
    n_windows: int = 3
    window_len: int = 100

    @property
    def kind(self):
        return self.network.kind

    @property
    def hp(self):
        return self.network.hp


def _as_array(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ValueError(f"expected an (n, W, F) array, got shape {x.shape}")
    return x


def train(kind, hp, train_data, val_data, cfg: TrainConfig = None, stats=None, schema=None):
    """Minibatch Adam with validation-loss checkpointing.

    ``train_data``/``val_data`` are ``(X, y)`` pairs with X of shape (n, W, F).
    The returned model carries the parameters of the epoch with the lowest
    validation BCE (no penalty term).
    """
    cfg = cfg or TrainConfig()
    X, y = _as_array(train_data[0]), np.asarray(train_data[1], dtype=float)
    Xv, yv = _as_array(val_data[0]), np.asarray(val_data[1], dtype=float)
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("training and validation splits must be non-empty")
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    net = build_network(kind, hp, X.shape[2], X.shape[1], seed=init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params = net.param_list()
    opt = Adam(params)

    history = {"train_loss": [], "val_loss": []}
    best_loss, best_epoch, best_weights = np.inf, 0, net.get_weights()
    n = len(X)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = net.loss_and_grads(X[idx], y[idx], drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}", epoch)
            opt.step(params, net.grad_list())
            total += loss * len(idx)
        val_loss, _ = bce_loss(net.logits(Xv), yv)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}", epoch)
        history["train_loss"].append(total / n)
        history["val_loss"].append(val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, best_weights = val_loss, epoch, net.get_weights()

    net.set_weights(best_weights)
    return TrainedModel(net, history, best_epoch, stats, schema, n_windows=X.shape[1])


def predict(model, X):
    """Eval-mode probabilities, one per patient."""
    net = model.network if isinstance(model, TrainedModel) else model
    return expit(net.logits(_as_array(X)))


def extract_representation(model, X):
    """Post-activation output of the last hidden dense layer, (n, units_dense)."""
    net = model.network if isinstance(model, TrainedModel) else model
    return net.forward(_as_array(X), stop=net.repr_index)
