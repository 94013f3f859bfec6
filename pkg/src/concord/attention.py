"""Transformer aggregation of patch-embedding bags into a patient embedding
and risk score, with attention rollout for patch-level heatmaps.

The encoder is pre-norm, has no positional encoding (a bag is a set) and
pools through a learned CLS token. Forward and backward passes are written
out by hand in numpy and run on padded batches with key masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cox import cox_loss
from .errors import DimensionMismatch, NoEvents, NonFinite
from .neural import Adam
from .preprocessing import validation_split
from .survival_stats import SurvivalRecord, survival_arrays

EMBED_DIM = 32
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EmbeddingBag:
    """Unordered patch embeddings of one patient, shape ``(n_patches, d_in)``."""

    patient_id: str
    patch_ids: tuple
    vectors: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ValueError(f"bag {self.patient_id} needs a non-empty 2-D patch array")
        patch_ids = tuple(str(p) for p in self.patch_ids)
        if len(patch_ids) != vectors.shape[0]:
            raise ValueError(f"bag {self.patient_id}: {len(patch_ids)} ids for {vectors.shape[0]} patches")
        if len(set(patch_ids)) != len(patch_ids):
            raise ValueError(f"bag {self.patient_id}: duplicate patch ids")
        coords = self.coords
        if coords is not None:
            coords = np.asarray(coords, dtype=np.int64).reshape(len(patch_ids), 2)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "patch_ids", patch_ids)
        object.__setattr__(self, "coords", coords)

    @property
    def d_in(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def take(self, idx) -> "EmbeddingBag":
        idx = np.asarray(idx)
        coords = None if self.coords is None else self.coords[idx]
        return EmbeddingBag(self.patient_id, tuple(self.patch_ids[i] for i in idx), self.vectors[idx], coords)


@dataclass(frozen=True)
class TransformerConfig:
    d_in: int
    model_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 2
    out_dim: int = EMBED_DIM
    lr: float = 1e-3
    steps: int = 200
    max_patches: int = 64
    l2: float = 1e-4
    val_fraction: float = 0.2
    patience: int = 15
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def full_size(cls, d_in: int, model_dim: int = 64, **kw) -> "TransformerConfig":
        """Twelve layers of eight-head attention."""
        return cls(d_in=d_in, model_dim=model_dim, n_layers=12, n_heads=8, **kw)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass(frozen=True)
class TransformerParams:
    weights: dict
    config: TransformerConfig
    seed: int = 0
    steps_run: int = 0
    best_step: Optional[int] = None


@dataclass(frozen=True)
class AttentionTrace:
    """Per-layer attention of one bag, shape ``(heads, tokens, tokens)``;
    token 0 is CLS, then patches in bag order."""

    layers: tuple

    @property
    def n_patches(self) -> int:
        return self.layers[0].shape[-1] - 1


@dataclass(frozen=True)
class HeatmapWeights:
    patch_ids: tuple
    weights: np.ndarray
    coords: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AggregateOutput:
    embedding: np.ndarray
    risk: float
    trace: AttentionTrace


def init_transformer(config: TransformerConfig, seed: int = 0) -> TransformerParams:
    rng = np.random.default_rng(seed)
    D, F = config.model_dim, config.model_dim * config.ff_mult

    def lin(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))

    w = {
        "w_in": lin(config.d_in, D),
        "b_in": np.zeros(D),
        "cls": rng.normal(0.0, 0.1, size=D),
    }
    for i in range(config.n_layers):
        p = f"l{i}."
        w[p + "ln1_g"], w[p + "ln1_b"] = np.ones(D), np.zeros(D)
        for name in ("q", "k", "v", "o"):
            w[p + "w" + name] = lin(D, D)
            w[p + "b" + name] = np.zeros(D)
        w[p + "ln2_g"], w[p + "ln2_b"] = np.ones(D), np.zeros(D)
        w[p + "w_ff1"], w[p + "b_ff1"] = lin(D, F), np.zeros(F)
        # residual branches start small so the initial stack is near identity
        w[p + "w_ff2"], w[p + "b_ff2"] = lin(F, D, 0.5), np.zeros(D)
    w["lnf_g"], w["lnf_b"] = np.ones(D), np.zeros(D)
    w["w_out"], w["b_out"] = lin(D, config.out_dim), np.zeros(config.out_dim)
    w["w_risk"], w["b_risk"] = lin(config.out_dim, 1, 0.1), np.zeros(1)
    return TransformerParams(w, config, seed=int(seed))


# ---------------------------------------------------------------------------
# batched forward / backward


def pad_bags(bags: Sequence[EmbeddingBag], d_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack bags into ``(B, L, d_in)`` with a validity mask ``(B, L)``."""
    for bag in bags:
        if bag.d_in != d_in:
            raise DimensionMismatch(f"bag {bag.patient_id} has dimension {bag.d_in}, expected {d_in}")
    L = max(len(b) for b in bags)
    X = np.zeros((len(bags), L, d_in))
    valid = np.zeros((len(bags), L), dtype=bool)
    for i, bag in enumerate(bags):
        X[i, : len(bag)] = bag.vectors
        valid[i, : len(bag)] = True
    return X, valid


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _gelu(u):
    th = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + th), th


def _gelu_back(du_out, u, th):
    return du_out * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * u * u))


def _split(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _outer_sum(a, b):
    """``sum over batch and tokens of a^T b`` for ``(B, T, m)`` and ``(B, T, n)``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def forward_batch(w: dict, config: TransformerConfig, X: np.ndarray, valid: np.ndarray, keep_cache: bool = False):
    """Return ``(embeddings (B, out_dim), risks (B,), attention list, cache)``."""
    B = X.shape[0]
    H, eps = config.n_heads, config.ln_eps
    scale = 1.0 / math.sqrt(config.head_dim)
    tokens = X @ w["w_in"] + w["b_in"]
    x = np.concatenate([np.broadcast_to(w["cls"], (B, 1, config.model_dim)), tokens], axis=1)
    key_valid = np.concatenate([np.ones((B, 1), dtype=bool), valid], axis=1)
    key_mask = key_valid[:, None, None, :]

    caches = []
    attns = []
    for i in range(config.n_layers):
        p = f"l{i}."
        h, ln1 = _layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"], eps)
        q = _split(h @ w[p + "wq"] + w[p + "bq"], H)
        k = _split(h @ w[p + "wk"] + w[p + "bk"], H)
        v = _split(h @ w[p + "wv"] + w[p + "bv"], H)
        s = np.where(key_mask, q @ k.transpose(0, 1, 3, 2) * scale, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = _merge(a @ v)
        x = x + o @ w[p + "wo"] + w[p + "bo"]
        h2, ln2 = _layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"], eps)
        u = h2 @ w[p + "w_ff1"] + w[p + "b_ff1"]
        gu, th = _gelu(u)
        x = x + gu @ w[p + "w_ff2"] + w[p + "b_ff2"]
        attns.append(a)
        if keep_cache:
            caches.append(dict(h=h, ln1=ln1, q=q, k=k, v=v, a=a, o=o, h2=h2, ln2=ln2, u=u, gu=gu, th=th))

    c, lnf = _layer_norm(x[:, 0], w["lnf_g"], w["lnf_b"], eps)
    emb = c @ w["w_out"] + w["b_out"]
    risk = (emb @ w["w_risk"] + w["b_risk"])[:, 0]
    cache = dict(X=X, layers=caches, c=c, lnf=lnf, emb=emb, T=x.shape[1]) if keep_cache else None
    return emb, risk, attns, cache


def backward_batch(w: dict, config: TransformerConfig, cache: dict, grad_risk: np.ndarray) -> dict:
    """Gradients of ``sum(grad_risk * risk)`` with respect to every weight."""
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.head_dim)
    g = {}
    d_risk = grad_risk[:, None]
    g["w_risk"] = cache["emb"].T @ d_risk
    g["b_risk"] = d_risk.sum(axis=0)
    d_emb = d_risk @ w["w_risk"].T
    g["w_out"] = cache["c"].T @ d_emb
    g["b_out"] = d_emb.sum(axis=0)
    d_c = d_emb @ w["w_out"].T
    d_cls_state, g["lnf_g"], g["lnf_b"] = _layer_norm_back(d_c, w["lnf_g"], cache["lnf"])
    B = d_c.shape[0]
    dx = np.zeros((B, cache["T"], config.model_dim))
    dx[:, 0] = d_cls_state

    for i in reversed(range(config.n_layers)):
        p = f"l{i}."
        lc = cache["layers"][i]
        # feed-forward branch
        d_gu = dx @ w[p + "w_ff2"].T
        g[p + "w_ff2"] = _outer_sum(lc["gu"], dx)
        g[p + "b_ff2"] = dx.sum(axis=(0, 1))
        d_u = _gelu_back(d_gu, lc["u"], lc["th"])
        g[p + "w_ff1"] = _outer_sum(lc["h2"], d_u)
        g[p + "b_ff1"] = d_u.sum(axis=(0, 1))
        d_h2 = d_u @ w[p + "w_ff1"].T
        d_ln2, g[p + "ln2_g"], g[p + "ln2_b"] = _layer_norm_back(d_h2, w[p + "ln2_g"], lc["ln2"])
        dx = dx + d_ln2
        # attention branch
        g[p + "wo"] = _outer_sum(lc["o"], dx)
        g[p + "bo"] = dx.sum(axis=(0, 1))
        d_o = _split(dx @ w[p + "wo"].T, H)
        a, q, k, v = lc["a"], lc["q"], lc["k"], lc["v"]
        d_a = d_o @ v.transpose(0, 1, 3, 2)
        d_v = a.transpose(0, 1, 3, 2) @ d_o
        d_s = a * (d_a - (d_a * a).sum(axis=-1, keepdims=True)) * scale
        d_q = d_s @ k
        d_k = d_s.transpose(0, 1, 3, 2) @ q
        d_h = np.zeros_like(dx)
        for name, d_proj in (("q", d_q), ("k", d_k), ("v", d_v)):
            d_proj = _merge(d_proj)
            g[p + "w" + name] = _outer_sum(lc["h"], d_proj)
            g[p + "b" + name] = d_proj.sum(axis=(0, 1))
            d_h += d_proj @ w[p + "w" + name].T
        d_ln1, g[p + "ln1_g"], g[p + "ln1_b"] = _layer_norm_back(d_h, w[p + "ln1_g"], lc["ln1"])
        dx = dx + d_ln1

    g["cls"] = dx[:, 0].sum(axis=0)
    d_tokens = dx[:, 1:]
    g["w_in"] = _outer_sum(cache["X"], d_tokens)
    g["b_in"] = d_tokens.sum(axis=(0, 1))
    return g


def loss_and_grad(w: dict, config: TransformerConfig, X, valid, times, events):
    """Cox loss of the batch risks plus ``l2 / 2 * |w|^2`` on matrices, and its gradient."""
    _, risk, _, cache = forward_batch(w, config, X, valid, keep_cache=True)
    loss, g_risk = cox_loss(risk, times, events, gradient=True)
    grads = backward_batch(w, config, cache, g_risk)
    if config.l2:
        for name, val in w.items():
            if val.ndim == 2:
                loss += 0.5 * config.l2 * float(np.sum(val * val))
                grads[name] = grads[name] + config.l2 * val
    return loss, grads


# ---------------------------------------------------------------------------
# public operations


def aggregate(params: TransformerParams, bag: EmbeddingBag, mode: str = "infer", seed: Optional[int] = None) -> AggregateOutput:
    """Patient embedding, risk and attention trace for one bag.

    Inference always uses the full bag. ``mode="train"`` reproduces the
    training-time view, a random subset of at most ``max_patches`` patches
    drawn from ``seed``.
    """
    config = params.config
    if bag.d_in != config.d_in:
        raise DimensionMismatch(f"bag {bag.patient_id} has dimension {bag.d_in}, expected {config.d_in}")
    if mode == "train":
        bag = subsample_bag(bag, config.max_patches, np.random.default_rng(seed))
    elif mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    X, valid = bag.vectors[None], np.ones((1, len(bag)), dtype=bool)
    emb, risk, attns, _ = forward_batch(params.weights, config, X, valid)
    return AggregateOutput(emb[0], float(risk[0]), AttentionTrace(tuple(a[0] for a in attns)))


def aggregate_batch(params: TransformerParams, bags: Sequence[EmbeddingBag], batch_size: int = 256):
    """Embeddings ``(n, out_dim)`` and risks ``(n,)`` for many bags."""
    embs, risks = [], []
    for start in range(0, len(bags), batch_size):
        chunk = bags[start : start + batch_size]
        X, valid = pad_bags(chunk, params.config.d_in)
        emb, risk, _, _ = forward_batch(params.weights, params.config, X, valid)
        embs.append(emb)
        risks.append(risk)
    return np.concatenate(embs), np.concatenate(risks)


def subsample_bag(bag: EmbeddingBag, max_patches: int, rng: np.random.Generator) -> EmbeddingBag:
    if len(bag) <= max_patches:
        return bag
    idx = np.sort(rng.choice(len(bag), size=max_patches, replace=False))
    return bag.take(idx)


def fit_aggregator(
    bags: Sequence[EmbeddingBag],
    records: Sequence[SurvivalRecord],
    config: TransformerConfig,
    seed: int = 0,
) -> TransformerParams:
    """Full-batch Adam on the Cox loss of per-patient risks.

    Each step sees every training patient with bags capped at
    ``config.max_patches`` patches, drawn from the step's seed. With
    ``val_fraction > 0`` an event-stratified slice of the patients is held
    out and the weights with the lowest held-out loss are returned; training
    stops after ``patience`` steps without improvement.
    """
    times, events = survival_arrays(records)
    if len(bags) != times.size:
        raise ValueError(f"{len(bags)} bags for {times.size} records")
    if not events.any():
        raise NoEvents("cannot fit the aggregator without events")
    params = init_transformer(config, seed)
    w = {k: v.copy() for k, v in params.weights.items()}
    rng = np.random.default_rng([seed, 1])

    held = validation_split(events, config.val_fraction, rng)
    train_bags = [b for b, h in zip(bags, held) if not h]
    t_tr, e_tr = times[~held], events[~held]
    val = None
    if held.any():
        Xv, vv = pad_bags([b for b, h in zip(bags, held) if h], config.d_in)
        val = (Xv, vv, times[held], events[held])

    needs_sampling = any(len(b) > config.max_patches for b in train_bags)
    X, valid = pad_bags(train_bags, config.d_in)
    opt = Adam(config.lr)
    best, best_loss, best_step, since_best = None, np.inf, None, 0
    steps_run = 0
    for step in range(config.steps):
        if needs_sampling:
            X, valid = pad_bags([subsample_bag(b, config.max_patches, rng) for b in train_bags], config.d_in)
        loss, grads = loss_and_grad(w, config, X, valid, t_tr, e_tr)
        if not np.isfinite(loss):
            raise NonFinite(f"aggregator loss diverged at step {step}")
        opt.step(w, grads)
        steps_run = step + 1
        if val is not None:
            _, risk_v, _, _ = forward_batch(w, config, val[0], val[1])
            loss_v = cox_loss(risk_v, val[2], val[3])
            if loss_v < best_loss:
                best, best_loss, best_step, since_best = {k: v.copy() for k, v in w.items()}, loss_v, steps_run, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best is not None:
        w = best
    for v in w.values():
        v.setflags(write=False)
    return replace(params, weights=w, steps_run=steps_run, best_step=best_step)


def attention_rollout(trace: AttentionTrace, patch_ids: Optional[Sequence[str]] = None, coords=None) -> HeatmapWeights:
    """Residual-aware attention rollout from the CLS token to the patches.

    Each layer's head-averaged attention gets the identity added and rows
    renormalized; the layers are chained by matrix products and the CLS row
    over patch tokens is renormalized to sum to one. If that row carries no
    patch mass at all the weights are uniform.
    """
    n_tokens = trace.layers[0].shape[-1]
    rollout = np.eye(n_tokens)
    for layer in trace.layers:
        avg = np.asarray(layer).mean(axis=0) + np.eye(n_tokens)
        avg /= avg.sum(axis=-1, keepdims=True)
        rollout = avg @ rollout
    mass = rollout[0, 1:]
    total = mass.sum()
    n = n_tokens - 1
    weights = mass / total if total > 0 else np.full(n, 1.0 / n)
    if patch_ids is None:
        patch_ids = tuple(str(i) for i in range(n))
    return HeatmapWeights(tuple(patch_ids), weights, coords)


def bag_heatmap(params: TransformerParams, bag: EmbeddingBag) -> HeatmapWeights:
    out = aggregate(params, bag)
    return attention_rollout(out.trace, bag.patch_ids, bag.coords)
