"""Cox partial-likelihood loss and the L1/L2-regularized linear Cox model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NoEvents, NonFinite, SchemaMismatch
from .preprocessing import FeatureVector, Standardizer, _frozen, as_matrix
from .survival_stats import SurvivalRecord, fold_ci, survival_arrays, t_test_one_sample


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: Optional[np.ndarray] = None


def cox_loss(h: np.ndarray, times: np.ndarray, events: np.ndarray, gradient: bool = False):
    """Negative mean log partial likelihood (Breslow ties) on plain arrays.

    Returns ``value`` or ``(value, d value / d h)``.
    """
    h = np.asarray(h, dtype=float)
    n_event = int(np.count_nonzero(events))
    if n_event == 0:
        raise NoEvents("Cox loss is undefined without events")

    order = np.argsort(-times, kind="stable")
    h_s, neg_t, d_s = h[order], -times[order], events[order]
    # cumulative log-sum-exp over descending time; ties share the widest prefix
    cum = np.logaddexp.accumulate(h_s)
    group_last = np.searchsorted(neg_t, neg_t, side="right") - 1
    lse = cum[group_last]
    value = -float(np.sum(h_s[d_s] - lse[d_s])) / n_event
    if not gradient:
        return value

    # patient k gets exp(h_k - lse_i) from every event i with T_i <= T_k
    a = np.where(d_s, -lse, -np.inf)
    tail = np.logaddexp.accumulate(a[::-1])[::-1]
    group_first = np.searchsorted(neg_t, neg_t, side="left")
    grad_s = -(d_s - np.exp(h_s + tail[group_first])) / n_event
    grad = np.empty_like(grad_s)
    grad[order] = grad_s
    return value, grad


def cox_partial_likelihood_loss(risks, records: Sequence[SurvivalRecord], gradient: bool = False) -> LossValue:
    times, events = survival_arrays(records)
    risks = np.asarray(risks, dtype=float)
    if risks.shape != times.shape:
        raise ValueError(f"{risks.size} risks for {times.size} records")
    if gradient:
        value, grad = cox_loss(risks, times, events, gradient=True)
        return LossValue(value, grad)
    return LossValue(cox_loss(risks, times, events))


@dataclass(frozen=True)
class CoxParams:
    """A fitted linear Cox model; ``beta`` is aligned with the kept columns."""

    beta: np.ndarray
    l1: float
    l2: float
    standardizer: Standardizer
    n_iter: int = 0
    converged: bool = False
    seed: int = 0
    objective: float = float("nan")
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.standardizer.feature_names

    @property
    def dropped(self) -> tuple[str, ...]:
        return self.standardizer.dropped_names

    def full_beta(self) -> np.ndarray:
        """Coefficients over every input feature; dropped columns get 0."""
        full = np.zeros(len(self.feature_names))
        full[self.standardizer.keep] = self.beta
        return full

    def raw_beta(self) -> np.ndarray:
        """Coefficients per unit of the raw (unstandardized) features."""
        return self.full_beta() / self.standardizer.scale

    def transform(self, X) -> np.ndarray:
        return self.standardizer.transform(X)


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def fit_cox(
    features,
    records: Sequence[SurvivalRecord],
    l1: float = 0.0,
    l2: float = 0.0,
    seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
    binary=None,
    max_iter: int = 10_000,
    tol: float = 1e-7,
) -> CoxParams:
    """Fit an elastic-net Cox model by proximal gradient with backtracking.

    Minimizes ``loss + l1 * |beta|_1 + l2 / 2 * |beta|_2^2`` starting from
    ``beta = 0``. Iteration stops once the relative objective change drops
    below ``tol`` or after ``max_iter`` steps. ``seed`` is stored for
    provenance only; the fit is deterministic.
    """
    X, names = as_matrix(features)
    if feature_names is None:
        feature_names = names
    times, events = survival_arrays(records)
    if X.shape[0] != times.size:
        raise SchemaMismatch(f"{X.shape[0]} feature rows for {times.size} records")
    if times.size < 2:
        raise ValueError("fit_cox needs at least two records")
    if not events.any():
        raise NoEvents("cannot fit a Cox model without events")
    if l1 < 0 or l2 < 0:
        raise ValueError("penalties must be non-negative")

    std = Standardizer.fit(X, feature_names, binary)
    Z = std.transform(X)
    beta = np.zeros(Z.shape[1])

    def smooth(b):
        value, g_h = cox_loss(Z @ b, times, events, gradient=True)
        return value + 0.5 * l2 * b @ b, Z.T @ g_h + l2 * b

    f, g = smooth(beta)
    obj = f + l1 * np.abs(beta).sum()
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            cand = soft_threshold(beta - step * g, step * l1)
            f_c, g_c = smooth(cand)
            d = cand - beta
            if not np.isfinite(f_c):
                step *= 0.5
            elif f_c <= f + g @ d + (d @ d) / (2.0 * step) + 1e-15 * abs(f):
                break
            else:
                step *= 0.5
            if step < 1e-30:
                raise NonFinite("line search failed: objective is not finite near the iterate")
        obj_c = f_c + l1 * np.abs(cand).sum()
        if not np.isfinite(obj_c):
            raise NonFinite("Cox objective diverged")
        change = abs(obj - obj_c) / max(abs(obj), 1e-12)
        beta, f, g, obj = cand, f_c, g_c, obj_c
        if change < tol:
            converged = True
            break
        step *= 2.0
    else:
        it = max_iter

    return CoxParams(
        beta=_frozen(beta), l1=float(l1), l2=float(l2), standardizer=std,
        n_iter=it, converged=converged, seed=int(seed), objective=float(obj),
    )


def predict_risk(params: CoxParams, features) -> np.ndarray | float:
    """Linear risk score of standardized covariates.

    A single :class:`FeatureVector` or 1-D array gives a float; a matrix or
    list of vectors gives an array.
    """
    single = isinstance(features, FeatureVector) or np.ndim(features) == 1
    X, names = as_matrix(features)
    scores = params.standardizer.transform(X, names) @ params.beta
    return float(scores[0]) if single else scores


@dataclass(frozen=True)
class ImportanceRow:
    feature: str
    avg_coef: float
    ci_low: float
    ci_high: float
    p: float


def coefficient_importance(per_fold_params: Sequence[CoxParams], level: float = 0.95) -> list[ImportanceRow]:
    """Average coefficient, t-interval and one-sample t-test p per feature,
    sorted by decreasing absolute average coefficient."""
    if len(per_fold_params) < 2:
        raise ValueError("coefficient importance needs at least two folds")
    names = per_fold_params[0].feature_names
    if any(p.feature_names != names for p in per_fold_params):
        raise SchemaMismatch("fold models were fitted on different schemas")
    coefs = np.vstack([p.full_beta() for p in per_fold_params])
    rows = []
    for j, name in enumerate(names):
        col = coefs[:, j]
        low, high = fold_ci(col, level)
        rows.append(ImportanceRow(name, float(col.mean()), low, high, t_test_one_sample(col, 0.0).p_value))
    # stable sort keeps schema order among equal magnitudes
    return sorted(rows, key=lambda r: -abs(r.avg_coef))
