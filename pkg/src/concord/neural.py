"""Two-hidden-layer survival networks (ReLU MLP and SELU self-normalizing net)
trained on the Cox loss with a hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cox import cox_loss
from .errors import NoEvents, NonFinite, SchemaMismatch
from .preprocessing import FeatureVector, Standardizer, as_matrix, validation_split
from .survival_stats import SurvivalRecord, survival_arrays

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
# value a dropped SELU unit is pinned to before the affine correction
ALPHA_PRIME = -SELU_LAMBDA * SELU_ALPHA

KINDS = ("mlp_relu", "snn_selu")
DEFAULT_DROPOUT = {"mlp_relu": 0.25, "snn_selu": 0.10}


def selu(x):
    x = np.asarray(x, dtype=float)
    out = SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def _selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _activate(kind, x):
    return selu(x) if kind == "snn_selu" else np.maximum(x, 0.0)


def _activate_grad(kind, x):
    return _selu_grad(x) if kind == "snn_selu" else (x > 0).astype(float)


@dataclass(frozen=True)
class DenseConfig:
    kind: str = "mlp_relu"
    hidden: tuple[int, int] = (8, 8)
    dropout_rate: Optional[float] = None
    l1: float = 1e-4
    l2: float = 1e-3
    lr: float = 0.01
    epochs: int = 500
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        rate = DEFAULT_DROPOUT[self.kind] if self.dropout_rate is None else self.dropout_rate
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        object.__setattr__(self, "dropout_rate", float(rate))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class DenseNetParams:
    """Weights ``w1 b1 w2 b2 w3 b3`` plus the config and input standardizer."""

    weights: dict
    config: DenseConfig
    standardizer: Standardizer
    seed: int = 0
    epochs_run: int = 0
    best_epoch: Optional[int] = None
    selu_lambda: float = field(default=SELU_LAMBDA)
    selu_alpha: float = field(default=SELU_ALPHA)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.standardizer.feature_names

    @property
    def dropout_rate(self) -> float:
        return self.config.dropout_rate


def init_weights(n_in: int, config: DenseConfig, rng: np.random.Generator) -> dict:
    """He-normal for ReLU, LeCun-normal for SELU; zero biases."""
    gain = 1.0 if config.kind == "snn_selu" else 2.0
    h1, h2 = config.hidden
    w = {}
    for name, fan_in, fan_out in (("1", n_in, h1), ("2", h1, h2), ("3", h2, 1)):
        sd = np.sqrt(gain / max(fan_in, 1))
        w["w" + name] = rng.normal(0.0, sd, size=(fan_in, fan_out))
        w["b" + name] = np.zeros(fan_out)
    return w


def draw_masks(n: int, config: DenseConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Keep-masks (1 = kept) for both hidden layers."""
    keep = 1.0 - config.dropout_rate
    return [(rng.random((n, h)) < keep).astype(float) for h in config.hidden]


def _dropout(kind: str, rate: float, a: np.ndarray, mask: np.ndarray):
    """Apply a dropout mask; returns ``(output, d output / d a)``."""
    keep = 1.0 - rate
    if kind == "snn_selu":
        scale = (keep + ALPHA_PRIME**2 * keep * rate) ** -0.5
        shift = -scale * ALPHA_PRIME * rate
        return scale * (a * mask + ALPHA_PRIME * (1.0 - mask)) + shift, scale * mask
    return a * mask / keep, mask / keep


def _forward(w: dict, Z: np.ndarray, config: DenseConfig, masks=None):
    kind = config.kind
    cache = {"z0": Z}
    a = Z
    for layer in (1, 2):
        pre = a @ w[f"w{layer}"] + w[f"b{layer}"]
        a = _activate(kind, pre)
        cache[f"pre{layer}"] = pre
        if masks is not None:
            a, dmask = _dropout(kind, config.dropout_rate, a, masks[layer - 1])
            cache[f"dmask{layer}"] = dmask
        cache[f"a{layer}"] = a
    risk = (a @ w["w3"] + w["b3"])[:, 0]
    return risk, a, cache


def _backward(w: dict, cache: dict, config: DenseConfig, grad_risk: np.ndarray) -> dict:
    g = {}
    g_out = grad_risk[:, None]
    g["w3"] = cache["a2"].T @ g_out
    g["b3"] = g_out.sum(axis=0)
    g_a = g_out @ w["w3"].T
    for layer in (2, 1):
        if f"dmask{layer}" in cache:
            g_a = g_a * cache[f"dmask{layer}"]
        g_pre = g_a * _activate_grad(config.kind, cache[f"pre{layer}"])
        below = cache["a1"] if layer == 2 else cache["z0"]
        g[f"w{layer}"] = below.T @ g_pre
        g[f"b{layer}"] = g_pre.sum(axis=0)
        g_a = g_pre @ w[f"w{layer}"].T
    return g


def _penalty(w: dict, l1: float, l2: float):
    """L1/L2 on weight matrices only; biases are not penalized."""
    value = 0.0
    grads = {}
    for name in ("w1", "w2", "w3"):
        value += l1 * np.abs(w[name]).sum() + 0.5 * l2 * np.sum(w[name] ** 2)
        grads[name] = l1 * np.sign(w[name]) + l2 * w[name]
    return value, grads


def forward(params: DenseNetParams, features, mode: str = "infer", seed: Optional[int] = None):
    """Risk scores and last-hidden-layer activations.

    ``mode="train"`` applies dropout masks drawn from ``seed`` (standard
    dropout for the MLP, alpha-dropout for the SNN). A single
    :class:`FeatureVector` or 1-D input gives ``(float, 8-vector)``.
    """
    single = isinstance(features, FeatureVector) or np.ndim(features) == 1
    X, names = as_matrix(features)
    Z = params.standardizer.transform(X, names)
    masks = None
    if mode == "train":
        masks = draw_masks(Z.shape[0], params.config, np.random.default_rng(seed))
    elif mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    risk, hidden, _ = _forward(params.weights, Z, params.config, masks)
    if single:
        return float(risk[0]), hidden[0]
    return risk, hidden


def objective_and_grad(weights: dict, Z: np.ndarray, times, events, config: DenseConfig, masks=None):
    """Cox loss plus penalties on standardized inputs, with weight gradients."""
    risk, _, cache = _forward(weights, Z, config, masks)
    loss, g_risk = cox_loss(risk, times, events, gradient=True)
    pen, g_pen = _penalty(weights, config.l1, config.l2)
    grads = _backward(weights, cache, config, g_risk)
    for name, gp in g_pen.items():
        grads[name] = grads[name] + gp
    return loss + pen, grads


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_dense(
    features,
    records: Sequence[SurvivalRecord],
    config: DenseConfig = DenseConfig(),
    seed: int = 0,
    validation: Optional[tuple] = None,
    feature_names: Optional[Sequence[str]] = None,
    binary=None,
) -> DenseNetParams:
    """Full-batch Adam on the Cox objective for ``config.epochs`` epochs.

    ``validation=(features, records)`` keeps the weights with the lowest
    validation loss instead of the last ones. Without it, a positive
    ``config.val_fraction`` carves an event-stratified validation slice out
    of the training data for the same purpose.
    """
    X, names = as_matrix(features)
    feature_names = feature_names if feature_names is not None else names
    times, events = survival_arrays(records)
    if X.shape[0] != times.size:
        raise SchemaMismatch(f"{X.shape[0]} feature rows for {times.size} records")
    if not events.any():
        raise NoEvents("cannot fit a network without events")

    rng = np.random.default_rng(seed)
    val = None
    if validation is None and config.val_fraction > 0:
        held = validation_split(events, config.val_fraction, rng)
        if held.any():
            val = (X[held], times[held], events[held])
            X, times, events = X[~held], times[~held], events[~held]

    std = Standardizer.fit(X, feature_names, binary)
    Z = std.transform(X)
    w = init_weights(Z.shape[1], config, rng)

    if val is not None:
        val = (std.transform(val[0]), val[1], val[2])
    elif validation is not None:
        Xv, _ = as_matrix(validation[0])
        tv, ev = survival_arrays(validation[1])
        if ev.any():
            val = (std.transform(Xv), tv, ev)

    opt = Adam(config.lr)
    best, best_loss, best_epoch = None, np.inf, None
    for epoch in range(config.epochs):
        masks = draw_masks(Z.shape[0], config, rng) if config.dropout_rate > 0 else None
        obj, grads = objective_and_grad(w, Z, times, events, config, masks)
        if not np.isfinite(obj):
            raise NonFinite(f"dense objective diverged at epoch {epoch}")
        opt.step(w, grads)
        if val is not None:
            risk_v, _, _ = _forward(w, val[0], config)
            loss_v = cox_loss(risk_v, val[1], val[2])
            if loss_v < best_loss:
                best_loss, best_epoch = loss_v, epoch + 1
                best = {k: v.copy() for k, v in w.items()}
    if best is not None:
        w = best
    for v in w.values():
        v.setflags(write=False)
    return DenseNetParams(w, config, std, seed=int(seed), epochs_run=config.epochs, best_epoch=best_epoch)


def with_weights(params: DenseNetParams, weights: dict) -> DenseNetParams:
    return replace(params, weights=weights)
