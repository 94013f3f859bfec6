"""Training-fold standardization shared by the Cox and dense models."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import SchemaMismatch


@dataclass(frozen=True)
class FeatureVector:
    """Covariates of one patient in a named schema."""

    values: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size != len(self.feature_names):
            raise SchemaMismatch(f"{values.size} values for {len(self.feature_names)} feature names")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Standardizer:
    """Per-column transform learned on a training fold.

    Continuous columns are z-scored, 0/1 columns pass through, and columns
    that are constant on the training fold are dropped.
    """

    feature_names: tuple[str, ...]
    keep: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    binary: np.ndarray

    @classmethod
    def fit(cls, X, feature_names: Optional[Sequence[str]] = None, binary=None) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        n, p = X.shape
        if feature_names is None:
            feature_names = [f"x{j}" for j in range(p)]
        if len(feature_names) != p:
            raise SchemaMismatch(f"{len(feature_names)} names for {p} columns")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature matrix contains non-finite values")
        if binary is None:
            binary = np.all((X == 0) | (X == 1), axis=0)
        binary = np.asarray(binary, dtype=bool)

        keep = np.ptp(X, axis=0) > 0 if n else np.zeros(p, dtype=bool)
        dropped = [name for name, k in zip(feature_names, keep) if not k]
        if dropped:
            warnings.warn(f"dropping constant columns: {', '.join(dropped)}", stacklevel=3)
        center = np.where(binary | ~keep, 0.0, X.mean(axis=0) if n else 0.0)
        sd = X.std(axis=0) if n else np.ones(p)
        scale = np.where(binary | ~keep, 1.0, sd)
        return cls(tuple(feature_names), _frozen(keep), _frozen(center), _frozen(scale), _frozen(binary))

    @property
    def kept_names(self) -> tuple[str, ...]:
        return tuple(n for n, k in zip(self.feature_names, self.keep) if k)

    @property
    def dropped_names(self) -> tuple[str, ...]:
        return tuple(n for n, k in zip(self.feature_names, self.keep) if not k)

    def check(self, X, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        if feature_names is not None and tuple(feature_names) != self.feature_names:
            raise SchemaMismatch("feature names differ from the fitted schema")
        return X

    def transform(self, X, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
        X = self.check(X, feature_names)
        return ((X - self.center) / self.scale)[:, self.keep]

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "keep": [bool(k) for k in self.keep],
            "center": [float(c) for c in self.center],
            "scale": [float(s) for s in self.scale],
            "binary": [bool(b) for b in self.binary],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            tuple(d["feature_names"]),
            _frozen(np.array(d["keep"], dtype=bool)),
            _frozen(np.array(d["center"], dtype=float)),
            _frozen(np.array(d["scale"], dtype=float)),
            _frozen(np.array(d["binary"], dtype=bool)),
        )


def as_matrix(features) -> tuple[np.ndarray, Optional[tuple[str, ...]]]:
    """Accept a 2-D array or a list of :class:`FeatureVector`; return (X, names)."""
    if isinstance(features, FeatureVector):
        return features.values[None, :], features.feature_names
    if len(features) and isinstance(features[0], FeatureVector):
        names = features[0].feature_names
        if any(f.feature_names != names for f in features):
            raise SchemaMismatch("feature vectors use different schemas")
        return np.vstack([f.values for f in features]), names
    return np.asarray(features, dtype=float), None


def validation_split(events: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of an event-stratified validation subset.

    Empty when either stratum would be left without a training member.
    """
    mask = np.zeros(events.size, dtype=bool)
    if fraction <= 0:
        return mask
    for stratum in (events, ~events):
        idx = np.flatnonzero(stratum)
        k = int(round(fraction * idx.size))
        if k >= idx.size:
            k = idx.size - 1
        if k > 0:
            mask[rng.choice(idx, size=k, replace=False)] = True
    if not events[mask].any() or not events[~mask].any():
        mask[:] = False
    return mask
