"""Logistic-regression density-ratio estimation.

A small fully connected network is trained by binary cross-entropy to tell
data samples (class 1) from model samples (class 0). Its logit then estimates
log(p/q_old), and `log_ratio` returns the fixed orientation log(q_old/p) that
every downstream objective consumes. Backprop is written out by hand so the
exact input gradients needed by the reparametrized updates are available.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._rng import as_generator
from .validation import InputError, NumericalError, as_matrix


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad_from_act(a):
    return (a > 0).astype(a.dtype)


def _tanh_grad_from_act(a):
    return 1.0 - a * a

_ACTIVATIONS = {"relu": (_relu, _relu_grad_from_act), "tanh": (np.tanh, _tanh_grad_from_act)}


class Mlp:
    """Fully connected net with manual forward/backward passes."""

    def __init__(self, layer_sizes, activation="relu", rng=None, weights=None, biases=None):
        if activation not in _ACTIVATIONS:
            raise InputError(f"unknown activation {activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise InputError("need at least input and output sizes")
        self.activation = activation
        if weights is not None:
            self.weights = [np.array(w, dtype=float) for w in weights]
            self.biases = [np.array(b, dtype=float) for b in biases]
            for i, w in enumerate(self.weights):
                if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                    raise InputError(f"layer {i} weight shape {w.shape} inconsistent")
        else:
            rng = as_generator(rng if rng is not None else 0)
            self.weights, self.biases = [], []
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                bound = np.sqrt(1.0 / n_in)
                self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
                self.biases.append(np.zeros(n_out))

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation,
                   weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])

    def parameters(self):
        return self.weights + self.biases

    def forward(self, x) -> np.ndarray:
        act = _ACTIVATIONS[self.activation][0]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]

    def forward_cached(self, x):
        act = _ACTIVATIONS[self.activation][0]
        acts = [x]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(act(acts[-1] @ w + b))
        return acts[-1] @ self.weights[-1] + self.biases[-1], acts

    def backward(self, acts, dout, need_input_grad=False):
        """Cotangent `dout` on the output; returns (dweights, dbiases, dinput)."""
        dact = _ACTIVATIONS[self.activation][1]
        n_layers = len(self.weights)
        dws = [None] * n_layers
        dbs = [None] * n_layers
        g = dout
        dx = None
        for i in range(n_layers - 1, -1, -1):
            dws[i] = acts[i].T @ g
            dbs[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * dact(acts[i])
            elif need_input_grad:
                dx = g @ self.weights[0].T
        return dws, dbs, dx

    def input_gradient(self, x) -> np.ndarray:
        """Per-row gradient of the (scalar) output w.r.t. the input."""
        if self.layer_sizes[-1] != 1:
            raise InputError("input_gradient requires a scalar output")
        out, acts = self.forward_cached(x)
        _, _, dx = self.backward(acts, np.ones_like(out), need_input_grad=True)
        return dx


class Adam:
    """Adam on a list of parameter arrays, updated in place."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class FeatureMap:
    """Extra discriminative inputs g(x) (optionally g(x, y)) of fixed width."""

    name: str
    fn: Callable
    width: int
    jacobian: Optional[Callable] = None  # (n, width, d_x), needed for input gradients

    def __call__(self, x, context=None):
        g = self.fn(x) if context is None else self.fn(x, context)
        g = np.asarray(g, dtype=float)
        if g.ndim == 1:
            g = g[:, None] if g.shape[0] == np.asarray(x).shape[0] else g[None, :]
        if g.shape[1] != self.width:
            raise InputError(f"feature map {self.name} produced width {g.shape[1]}, "
                             f"declared {self.width}")
        return g


@dataclass
class TrainConfig:
    """Discriminator training settings (Adam + L2 + early stopping)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1000
    max_epochs: int = 200
    l2: float = 1e-3
    validation_fraction: float = 0.2
    patience: int = 10
    hidden_sizes: tuple = (50, 50, 50)
    activation: str = "relu"

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise InputError("validation_fraction must be in (0, 1)")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.l2 < 0:
            raise InputError("l2 must be non-negative")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, train_bce, val_bce)
    best_epoch: int = -1
    best_val_bce: float = np.inf

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_bce,validation_bce\n")
            for epoch, tr, va in self.rows:
                fh.write(f"{epoch},{tr:.17g},{va:.17g}\n")


def bce_from_logits(logits, labels) -> float:
    z = np.asarray(logits, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class MlpClassifier:
    """Trained logistic regressor; logit estimates log(p/q_old) on raw inputs."""

    def __init__(self, net: Mlp, d_x: int, d_context: int = 0,
                 feature_map: Optional[FeatureMap] = None,
                 shift=None, scale=None):
        self.net = net
        self.d_x = int(d_x)
        self.d_context = int(d_context)
        self.feature_map = feature_map
        d_in = net.layer_sizes[0]
        self.shift = np.zeros(d_in) if shift is None else np.asarray(shift, dtype=float)
        self.scale = np.ones(d_in) if scale is None else np.asarray(scale, dtype=float)

    def _assemble(self, x, context=None, augmentation=None):
        x = as_matrix(x, "x", self.d_x)
        parts = [x]
        if self.d_context:
            if context is None:
                raise InputError("classifier was trained with context inputs")
            parts.append(as_matrix(context, "context", self.d_context))
        if self.feature_map is not None:
            if augmentation is None:
                augmentation = self.feature_map(x, parts[1] if self.d_context else None)
            parts.append(as_matrix(augmentation, "augmentation", self.feature_map.width))
        elif augmentation is not None:
            raise InputError("augmentation given but classifier has no feature map")
        raw = np.concatenate(parts, axis=1)
        if raw.shape[1] != self.net.layer_sizes[0]:
            raise InputError(f"assembled input width {raw.shape[1]} does not match "
                             f"network input {self.net.layer_sizes[0]}")
        return (raw - self.shift) / self.scale

    def forward_logit(self, x, context=None, augmentation=None):
        single = np.asarray(x).ndim == 1
        z = self.net.forward(self._assemble(x, context, augmentation))[:, 0]
        return float(z[0]) if single else z

    def log_ratio(self, x, context=None, augmentation=None):
        """log(q_old/p) estimate: positive where the model overshoots the data."""
        out = self.forward_logit(x, context, augmentation)
        return -out

    def input_gradient(self, x, context=None):
        """d logit / d x (the x block only)."""
        single = np.asarray(x).ndim == 1
        if self.feature_map is not None and self.feature_map.jacobian is None:
            raise InputError(f"feature map {self.feature_map.name} has no jacobian; "
                             "input gradients unavailable")
        xm = as_matrix(x, "x", self.d_x)
        inp = self._assemble(xm, context)
        dinp = self.net.input_gradient(inp) / self.scale
        dx = dinp[:, :self.d_x]
        if self.feature_map is not None:
            start = self.d_x + self.d_context
            dg = dinp[:, start:start + self.feature_map.width]
            jac = self.feature_map.jacobian(xm, context)  # (n, width, d_x)
            dx = dx + np.einsum("nw,nwd->nd", dg, jac)
        return dx[0] if single else dx

    def log_ratio_gradient(self, x, context=None):
        return -self.input_gradient(x, context)

    def to_document(self):
        return {"version": 1, "type": "mlp_classifier",
                "layer_sizes": list(self.net.layer_sizes),
                "activation": self.net.activation,
                "d_x": self.d_x, "d_context": self.d_context,
                "feature_map": None if self.feature_map is None else self.feature_map.name,
                "shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "weights": [w.tolist() for w in self.net.weights],
                "biases": [b.tolist() for b in self.net.biases]}

    @classmethod
    def from_document(cls, doc, feature_map=None):
        if doc.get("feature_map") and feature_map is None:
            from .tasks import feature_map_from_name
            feature_map = feature_map_from_name(doc["feature_map"])
        net = Mlp(doc["layer_sizes"], doc["activation"],
                  weights=doc["weights"], biases=doc["biases"])
        return cls(net, doc["d_x"], doc["d_context"], feature_map,
                   shift=doc["shift"], scale=doc["scale"])


def train_ratio(p_samples, q_samples, cfg: TrainConfig, features: Optional[FeatureMap] = None,
                seed=0, p_context=None, q_context=None, init: Optional[MlpClassifier] = None):
    """Fit the density-ratio classifier: p-samples class 1, model samples class 0.

    Early-stops on held-out validation BCE and returns the best-validation
    snapshot together with the per-epoch training report. Pass `init` to warm
    start from a previously trained classifier.
    """
    rng = as_generator(seed)
    p_x = as_matrix(p_samples, "p_samples")
    q_x = as_matrix(q_samples, "q_samples", p_x.shape[1])
    if p_x.shape[0] == 0 or q_x.shape[0] == 0:
        raise InputError("both sample sets must be non-empty")
    d_x = p_x.shape[1]
    d_ctx = 0
    parts_p, parts_q = [p_x], [q_x]
    if p_context is not None or q_context is not None:
        p_ctx = as_matrix(p_context, "p_context", None)
        q_ctx = as_matrix(q_context, "q_context", p_ctx.shape[1])
        d_ctx = p_ctx.shape[1]
        parts_p.append(p_ctx)
        parts_q.append(q_ctx)
    if features is not None:
        parts_p.append(features(p_x, p_context))
        parts_q.append(features(q_x, q_context))
    raw_p = np.concatenate(parts_p, axis=1)
    raw_q = np.concatenate(parts_q, axis=1)

    # standardize on the data-class statistics so the transform is stable
    # across warm-started refits (the data never changes between iterations)
    shift = raw_p.mean(axis=0)
    scale = np.maximum(raw_p.std(axis=0), 1e-8)

    inputs = (np.concatenate([raw_p, raw_q], axis=0) - shift) / scale
    labels = np.concatenate([np.ones(len(raw_p)), np.zeros(len(raw_q))])

    perm = rng.permutation(len(inputs))
    inputs, labels = inputs[perm], labels[perm]
    n_val = max(1, int(round(cfg.validation_fraction * len(inputs))))
    if n_val >= len(inputs):
        raise InputError("validation split leaves no training data")
    val_x, val_y = inputs[:n_val], labels[:n_val]
    trn_x, trn_y = inputs[n_val:], labels[n_val:]

    if init is not None:
        net = init.net.copy()
        if net.layer_sizes[0] != inputs.shape[1]:
            raise InputError("warm-start classifier input width mismatch")
    else:
        net = Mlp([inputs.shape[1], *cfg.hidden_sizes, 1], cfg.activation, rng=rng)
    adam = Adam(net.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    n_train = len(trn_x)
    n_layers = len(net.weights)
    report = TrainReport()
    best = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
    stall = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = trn_x[idx], trn_y[idx]
            out, acts = net.forward_cached(xb)
            z = out[:, 0]
            loss_sum += bce_from_logits(z, yb) * len(idx)
            dz = (1.0 / (1.0 + np.exp(-z)) - yb) / len(idx)
            dws, dbs, _ = net.backward(acts, dz[:, None])
            if cfg.l2 > 0:
                for i in range(n_layers):
                    dws[i] += 2.0 * cfg.l2 * net.weights[i]
            adam.step(dws + dbs)
        train_bce = loss_sum / n_train
        val_bce = bce_from_logits(net.forward(val_x)[:, 0], val_y)
        if not np.isfinite(train_bce) or not np.isfinite(val_bce):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        report.rows.append((epoch, train_bce, val_bce))
        if val_bce < report.best_val_bce:
            report.best_val_bce = val_bce
            report.best_epoch = epoch
            best = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                break
    net.weights, net.biases = best
    clf = MlpClassifier(net, d_x, d_ctx, features, shift=shift, scale=scale)
    return clf, report
