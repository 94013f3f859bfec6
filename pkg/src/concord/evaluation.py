"""Nested cross-validation, quartile hazard stratification and fold-level
model comparison."""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .attention import TransformerConfig, aggregate_batch, fit_aggregator
from .cox import CoxParams, fit_cox, predict_risk
from .data_io.synthetic import CohortBundle
from .errors import ConcordError, PlanMismatch, TooFewEvents
from .fusion import FusionConfig, fit_fusion_head, fit_nonimage, predict_multimodal
from .neural import DenseConfig, fit_dense, forward
from .survival_stats import (
    KmCurve,
    SurvivalRecord,
    TestResult,
    concordance_index,
    fold_ci,
    kaplan_meier,
    log_rank_test,
    survival_arrays,
    t_test_one_sample,
    t_test_paired,
)

log = logging.getLogger(__name__)

MIN_SUCCESSFUL_FOLDS = 3


def derive_seed(*parts: int) -> int:
    """Deterministic 31-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# fold plans


def _stratified_assign(events: np.ndarray, k: int, rng: np.random.Generator, stratify: bool) -> np.ndarray:
    """Fold label per item; events first, then non-events, dealt round-robin."""
    if stratify:
        order = np.concatenate([rng.permutation(np.flatnonzero(events)), rng.permutation(np.flatnonzero(~events))])
    else:
        order = rng.permutation(events.size)
    labels = np.empty(events.size, dtype=int)
    labels[order] = np.arange(events.size) % k
    return labels


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    patient_ids: tuple
    outer: tuple          # test indices per outer fold
    inner: tuple          # per outer fold: validation indices per inner fold
    stratified: bool = True
    warnings: tuple = ()

    @property
    def k_outer(self) -> int:
        return len(self.outer)

    def train_indices(self, k: int) -> np.ndarray:
        mask = np.ones(len(self.patient_ids), dtype=bool)
        mask[self.outer[k]] = False
        return np.flatnonzero(mask)

    def inner_split(self, k: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        train = self.train_indices(k)
        val = self.inner[k][j]
        return np.setdiff1d(train, val), val

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.patient_ids).encode())
        for k, test in enumerate(self.outer):
            h.update(f"|o{k}:".encode() + np.asarray(test, dtype=np.int64).tobytes())
            for j, val in enumerate(self.inner[k]):
                h.update(f"|i{k}.{j}:".encode() + np.asarray(val, dtype=np.int64).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stratified": self.stratified,
            "warnings": list(self.warnings),
            "fingerprint": self.fingerprint(),
            "outer": [[self.patient_ids[i] for i in test] for test in self.outer],
        }


def make_fold_plan(records: Sequence[SurvivalRecord], k_outer: int = 5, k_inner: int = 3, seed: int = 0) -> FoldPlan:
    """Event-stratified outer and inner folds, deterministic in ``seed``.

    With fewer events than folds the assignment falls back to unstratified
    shuffling and the plan carries a warning.
    """
    n = len(records)
    if n < k_outer:
        raise ValueError(f"{n} patients cannot fill {k_outer} folds")
    _, events = survival_arrays(records)
    notes = []
    stratify = int(events.sum()) >= k_outer
    if not stratify:
        msg = f"only {int(events.sum())} events for {k_outer} outer folds; folds are not event-stratified"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    rng = np.random.default_rng(derive_seed(seed, 0))
    labels = _stratified_assign(events, k_outer, rng, stratify)
    outer = tuple(np.flatnonzero(labels == k) for k in range(k_outer))

    inner = []
    for k in range(k_outer):
        mask = labels != k
        train = np.flatnonzero(mask)
        ev = events[train]
        strat_inner = int(ev.sum()) >= k_inner
        if not strat_inner:
            notes.append(f"outer fold {k}: inner folds are not event-stratified")
        sub = _stratified_assign(ev, k_inner, np.random.default_rng(derive_seed(seed, k + 1)), strat_inner)
        inner.append(tuple(train[sub == j] for j in range(k_inner)))
    return FoldPlan(int(seed), tuple(r.patient_id for r in records), outer, tuple(inner), stratify, tuple(notes))


# ---------------------------------------------------------------------------
# model families


class ModelFamily:
    """A trainable model kind: ``fit`` on cohort indices, ``predict`` on others."""

    name = "model"

    def fit(self, cohort: CohortBundle, idx: np.ndarray, hparams: dict, seed: int) -> Any:
        raise NotImplementedError

    def predict(self, model: Any, cohort: CohortBundle, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name}


def _records(cohort: CohortBundle, idx) -> list:
    return [cohort.records[i] for i in idx]


class CoxFamily(ModelFamily):
    name = "nonimage_cox"

    def fit(self, cohort, idx, hparams, seed):
        return fit_cox(
            cohort.features[idx], _records(cohort, idx), hparams.get("l1", 0.0), hparams.get("l2", 0.1),
            seed=seed, feature_names=cohort.feature_names, binary=cohort.binary_mask,
        )

    def predict(self, model, cohort, idx):
        return predict_risk(model, cohort.features[idx])


class DenseFamily(ModelFamily):
    def __init__(self, kind: str = "mlp_relu", config: Optional[DenseConfig] = None):
        self.config = config or DenseConfig(kind=kind, val_fraction=0.2)
        self.name = f"nonimage_{self.config.kind}"

    def fit(self, cohort, idx, hparams, seed):
        conf = DenseConfig(**{**self.config.__dict__, **{k: v for k, v in hparams.items() if k in ("l1", "l2")}})
        return fit_dense(
            cohort.features[idx], _records(cohort, idx), conf, seed=seed,
            feature_names=cohort.feature_names, binary=cohort.binary_mask,
        )

    def predict(self, model, cohort, idx):
        return forward(model, cohort.features[idx])[0]

    def describe(self):
        return {"name": self.name, "config": dict(self.config.__dict__, hidden=list(self.config.hidden))}


class FitCache:
    """Memo of unimodal fits keyed by (kind, training ids, seed, config).

    Lets the image-only and multimodal families share aggregator fits on
    identical training sets, and lets every fusion grid point reuse them.
    """

    def __init__(self):
        self._store: dict = {}

    def get(self, key, factory):
        if key not in self._store:
            self._store[key] = factory()
        return self._store[key]


def _idx_key(idx) -> bytes:
    return np.asarray(idx, dtype=np.int64).tobytes()


class ImageFamily(ModelFamily):
    name = "image"

    def __init__(self, config: Optional[TransformerConfig] = None, cache: Optional[FitCache] = None):
        self.config = config
        self.cache = cache if cache is not None else FitCache()

    def _config(self, cohort) -> TransformerConfig:
        return self.config or TransformerConfig(d_in=cohort.bags[0].d_in)

    def fit_image(self, cohort, idx, seed):
        # offset matches the multimodal image stage so fits can be shared
        conf = self._config(cohort)
        key = ("image", _idx_key(idx), seed + 2, conf)
        return self.cache.get(key, lambda: fit_aggregator([cohort.bags[i] for i in idx], _records(cohort, idx), conf, seed + 2))

    def fit(self, cohort, idx, hparams, seed):
        return self.fit_image(cohort, idx, seed)

    def predict(self, model, cohort, idx):
        return aggregate_batch(model, [cohort.bags[i] for i in idx])[1]

    def describe(self):
        d = {"name": self.name}
        if self.config is not None:
            d["config"] = dict(self.config.__dict__)
        return d


class MultimodalFamily(ModelFamily):
    """Grid points set the fusion head's ``l1``/``l2``; branches are shared."""

    def __init__(self, config: FusionConfig = FusionConfig(), cache: Optional[FitCache] = None):
        self.config = config
        self.cache = cache if cache is not None else FitCache()
        self.image_family = ImageFamily(config.transformer, self.cache)
        self.name = f"multimodal ({config.label})"

    def fit(self, cohort, idx, hparams, seed):
        conf = FusionConfig(**{
            **self.config.__dict__,
            "seed": seed,
            "fusion_l1": hparams.get("l1", self.config.fusion_l1),
            "fusion_l2": hparams.get("l2", self.config.fusion_l2),
        })
        records = _records(cohort, idx)
        ni_key = ("nonimage", _idx_key(idx), seed, conf.nonimage_kind, conf.nonimage_l1, conf.nonimage_l2, conf.dense)
        nonimage = self.cache.get(
            ni_key, lambda: fit_nonimage(cohort.features[idx], records, conf, cohort.feature_names, cohort.binary_mask)
        )
        image = self.image_family.fit_image(cohort, idx, seed)
        bags = [cohort.bags[i] for i in idx]
        return fit_fusion_head(nonimage, image, cohort.features[idx], bags, records, conf)

    def predict(self, model, cohort, idx):
        return predict_multimodal(model, cohort.features[idx], [cohort.bags[i] for i in idx])

    def describe(self):
        c = self.config
        return {
            "name": self.name,
            "nonimage_mode": c.nonimage_mode,
            "image_mode": c.image_mode,
            "nonimage_kind": c.nonimage_kind,
            "nonimage_l1": c.nonimage_l1,
            "nonimage_l2": c.nonimage_l2,
        }


class RandomFamily(ModelFamily):
    """Seeded random risks; a null baseline."""

    name = "random"

    def fit(self, cohort, idx, hparams, seed):
        return seed

    def predict(self, model, cohort, idx):
        return np.random.default_rng(model).normal(size=len(idx))


# ---------------------------------------------------------------------------
# nested CV


DEFAULT_GRID = tuple({"l1": l1, "l2": l2} for l1 in (0.0, 0.1) for l2 in (0.01, 0.1, 1.0))


def _regularization(hp: dict) -> float:
    return float(sum(v for k, v in hp.items() if k in ("l1", "l2")))


@dataclass
class CvReport:
    model: str
    plan: dict
    folds: list
    aggregate: dict
    sites: dict = field(default_factory=dict)
    family: dict = field(default_factory=dict)
    grid: list = field(default_factory=list)
    models: list = field(default_factory=list, repr=False)  # fitted outer models; not serialized

    @property
    def fold_cindices(self) -> list:
        return [f["c_index"] for f in self.folds]

    @property
    def ok_folds(self) -> list:
        return [f for f in self.folds if f["status"] == "ok"]

    @property
    def degraded(self) -> bool:
        return len(self.ok_folds) < len(self.folds)

    def pooled_predictions(self) -> list[dict]:
        rows = [p for f in self.ok_folds for p in f["predictions"]]
        return sorted(rows, key=lambda p: p["patient_id"])

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "family": self.family,
            "grid": self.grid,
            "plan": self.plan,
            "folds": self.folds,
            "aggregate": self.aggregate,
            "sites": self.sites,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvReport":
        return cls(d["model"], d["plan"], d["folds"], d["aggregate"], d.get("sites", {}), d.get("family", {}), d.get("grid", []))


def _aggregate(cindices: Sequence[float]) -> dict:
    x = np.asarray(cindices, dtype=float)
    out = {"n_folds": int(x.size), "mean": float(x.mean()) if x.size else None}
    if x.size >= 2:
        out["sd"] = float(x.std(ddof=1))
        low, high = fold_ci(x, 0.95, clip=(0.0, 1.0))
        out["ci95"] = [low, high]
    else:
        out["sd"] = None
        out["ci95"] = None
    return out


def _safe_cindex(records, risks) -> Optional[float]:
    try:
        return concordance_index(records, risks)
    except ConcordError:
        return None


def _select(family, cohort, plan, k, grid, fold_seed) -> tuple[dict, list]:
    """Inner CV over the grid; returns the chosen point and mean inner scores."""
    if len(grid) == 1:
        return dict(grid[0]), []
    test_ids = set(plan.outer[k].tolist())
    scores = [[] for _ in grid]
    for j in range(len(plan.inner[k])):
        tr, val = plan.inner_split(k, j)
        if test_ids & (set(tr.tolist()) | set(val.tolist())):
            raise AssertionError(f"outer test patients leaked into inner fold {k}.{j}")
        seed = derive_seed(fold_seed, j + 1)
        for g, hp in enumerate(grid):
            try:
                model = family.fit(cohort, tr, hp, seed)
                c = _safe_cindex(_records(cohort, val), family.predict(model, cohort, val))
            except ConcordError as exc:
                log.info("inner fit failed (outer %d, inner %d, %s): %s", k, j, hp, exc)
                c = None
            if c is not None:
                scores[g].append(c)
    means = [float(np.mean(s)) if s else -np.inf for s in scores]
    best = min(range(len(grid)), key=lambda g: (-means[g], _regularization(grid[g]), g))
    return dict(grid[best]), [m if np.isfinite(m) else None for m in means]


def run_nested_cv(
    cohort: CohortBundle,
    family: ModelFamily,
    plan: FoldPlan,
    grid: Sequence[dict] = DEFAULT_GRID,
    keep_models: bool = False,
) -> CvReport:
    """Outer folds estimate performance; inner folds pick the grid point.

    Inner selection maximizes mean validation c-index, breaking ties by the
    smaller total regularization and then grid order. A fold whose fit or
    scoring fails is marked failed; fewer than three good folds is an error.
    """
    grid = [dict(g) for g in grid]
    if not grid:
        raise ValueError("hyperparameter grid must be non-empty")
    if tuple(cohort.patient_ids) != plan.patient_ids:
        raise PlanMismatch("fold plan was built for another cohort")

    folds = []
    models = []
    for k in range(plan.k_outer):
        test = plan.outer[k]
        train = plan.train_indices(k)
        if set(test.tolist()) & set(train.tolist()):
            raise AssertionError(f"outer fold {k}: test patients in the training set")
        fold_seed = derive_seed(plan.seed, 1000 + k)
        entry = {"fold": k, "n_train": int(train.size), "n_test": int(test.size)}
        try:
            chosen, inner_scores = _select(family, cohort, plan, k, grid, fold_seed)
            model = family.fit(cohort, train, chosen, fold_seed)
            risks = np.asarray(family.predict(model, cohort, test), dtype=float)
            test_records = _records(cohort, test)
            c = concordance_index(test_records, risks)
            entry.update(status="ok", c_index=c, hyperparameters=chosen, inner_scores=inner_scores)
            entry["predictions"] = [
                {"patient_id": r.patient_id, "risk": float(s), "time": r.time, "event": r.event}
                for r, s in zip(test_records, risks)
            ]
            models.append(model)
        except ConcordError as exc:
            log.warning("outer fold %d failed: %s", k, exc)
            entry.update(status="failed", c_index=None, error=f"{type(exc).__name__}: {exc}", predictions=[])
            models.append(None)
        folds.append(entry)

    ok = [f["c_index"] for f in folds if f["status"] == "ok"]
    if len(ok) < MIN_SUCCESSFUL_FOLDS:
        raise ConcordError(f"only {len(ok)} of {plan.k_outer} folds succeeded for {family.name}")

    report = CvReport(
        model=family.name, plan=plan.to_dict(), folds=folds, aggregate=_aggregate(ok),
        family=family.describe(), grid=grid,
    )
    if cohort.sites is not None:
        report.sites = site_cindices(report, dict(zip(cohort.patient_ids, cohort.sites)))
    if keep_models:
        report.models = models
    return report


def site_cindices(report: CvReport, site_of: dict) -> dict:
    """c-index within each site on pooled out-of-fold predictions."""
    by_site: dict = {}
    for p in report.pooled_predictions():
        by_site.setdefault(site_of[p["patient_id"]], []).append(p)
    out = {}
    for site in sorted(by_site):
        rows = by_site[site]
        recs = [SurvivalRecord(p["patient_id"], p["time"], p["event"]) for p in rows]
        out[site] = {"n": len(rows), "c_index": _safe_cindex(recs, [p["risk"] for p in rows])}
    return out


# ---------------------------------------------------------------------------
# stratification and comparisons


@dataclass(frozen=True)
class StratificationResult:
    quartile: dict            # patient_id -> 1..4, 1 = lowest predicted risk
    curves: tuple             # KmCurve per group
    test: TestResult
    group_sizes: tuple

    def to_dict(self) -> dict:
        return {
            "quartile": dict(sorted(self.quartile.items())),
            "group_sizes": list(self.group_sizes),
            "log_rank": self.test.to_dict(),
            "curves": [
                [{"time": t, "survival": s, "at_risk": n, "events": d} for t, s, n, d in c.rows()]
                for c in self.curves
            ],
        }


def stratify_hazard(report_or_predictions, records: Optional[Sequence[SurvivalRecord]] = None, n_groups: int = 4) -> StratificationResult:
    """Quartiles of pooled out-of-fold risk, KM per group and a log-rank test.

    Ranks are broken by patient id so equal risks split deterministically.
    ``records`` override the follow-up stored with the predictions.
    """
    preds = report_or_predictions.pooled_predictions() if isinstance(report_or_predictions, CvReport) else list(report_or_predictions)
    if records is not None:
        by_id = {r.patient_id: r for r in records}
        missing = [p["patient_id"] for p in preds if p["patient_id"] not in by_id]
        if missing:
            raise ValueError(f"no records for predicted patients: {missing[:5]}")
        recs = [by_id[p["patient_id"]] for p in preds]
    else:
        recs = [SurvivalRecord(p["patient_id"], p["time"], p["event"]) for p in preds]
    order = sorted(range(len(preds)), key=lambda i: (preds[i]["risk"], preds[i]["patient_id"]))
    groups = np.array_split(np.array(order, dtype=int), n_groups)
    quartile = {}
    grouped = []
    for g, members in enumerate(groups, start=1):
        grouped.append([recs[i] for i in members])
        for i in members:
            quartile[recs[i].patient_id] = g
    curves = tuple(kaplan_meier(g) for g in grouped)
    return StratificationResult(quartile, curves, log_rank_test(grouped), tuple(len(g) for g in grouped))


def compare_models(report_a: CvReport, report_b: CvReport) -> TestResult:
    """Paired t-test of per-fold c-indices (a minus b) over folds where both succeeded."""
    if report_a.plan.get("fingerprint") != report_b.plan.get("fingerprint"):
        raise PlanMismatch("reports were produced from different fold plans")
    pairs = [
        (fa["c_index"], fb["c_index"])
        for fa, fb in zip(report_a.folds, report_b.folds)
        if fa["status"] == "ok" and fb["status"] == "ok"
    ]
    a, b = zip(*pairs) if pairs else ((), ())
    return t_test_paired(a, b)


def compare_to_random(report: CvReport, chance: float = 0.5) -> TestResult:
    return t_test_one_sample([f["c_index"] for f in report.ok_folds], chance)
