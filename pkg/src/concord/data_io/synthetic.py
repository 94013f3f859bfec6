"""Ground-truth synthetic cohorts with known covariate effects and a planted
image signal."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..attention import EmbeddingBag
from ..survival_stats import SurvivalRecord

CELL_TYPES = ("tumor", "normal", "inflammatory", "connective", "dead", "unclassifiable")
_CELL_BASE = np.log([0.45, 0.10, 0.15, 0.20, 0.05, 0.05])

_BINARY_NAMES = (
    "mut_RB1", "mut_TP53", "mut_KIT", "mut_KDR",
    "mut_EGFR_T790M", "mut_EGFR_L858R", "mut_EGFR_ex19del", "mut_EGFR_amp",
)
_CONTINUOUS_NAMES = ("age_z", "prior_lines_z")
PATCH_PIXELS = 224


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the simulator.

    Hazards are Weibull proportional hazards with log-relative risk
    ``beta @ x + image_signal * z`` where ``z`` is a hidden patient factor
    that also sets the share of "risk" patches in the bag.
    """

    n: int = 100
    p_binary: int = 4
    p_continuous: int = 2
    beta: Optional[tuple] = None
    weibull_shape: float = 1.5
    weibull_scale: float = 12.0
    censoring: float = 0.3
    image_signal: float = 1.0
    patches: tuple[int, int] = (8, 16)
    d_in: int = 512
    n_sites: int = 2
    cluster_separation: float = 3.0
    image_slope: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.censoring <= 0.9:
            raise ValueError("censoring target must lie in [0, 0.9]")
        if self.n < 1 or self.d_in < 1 or self.p_binary + self.p_continuous < 1:
            raise ValueError("sizes must be positive")
        if self.p_binary < 0 or self.p_continuous < 0:
            raise ValueError("feature counts must be non-negative")
        if self.image_signal < 0:
            raise ValueError("image signal strength must be non-negative")
        lo, hi = self.patches
        if not 1 <= lo <= hi:
            raise ValueError("patch range must satisfy 1 <= low <= high")
        beta = self.beta
        p = self.p_binary + self.p_continuous
        if beta is None:
            beta = tuple(0.0 if j % 3 == 2 else 0.8 * (-1) ** j for j in range(p))
        beta = tuple(float(b) for b in beta)
        if len(beta) != p:
            raise ValueError(f"beta has {len(beta)} entries for {p} features")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "patches", (int(lo), int(hi)))

    @property
    def feature_names(self) -> tuple[str, ...]:
        binary = [_BINARY_NAMES[j] if j < len(_BINARY_NAMES) else f"mut_G{j}" for j in range(self.p_binary)]
        cont = [_CONTINUOUS_NAMES[j] if j < len(_CONTINUOUS_NAMES) else f"cont_{j}" for j in range(self.p_continuous)]
        return tuple(binary + cont)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = list(self.beta)
        d["patches"] = list(self.patches)
        return d


@dataclass
class CohortBundle:
    """All modalities of a cohort aligned on ``records[i].patient_id``."""

    records: list
    feature_names: tuple
    features: np.ndarray
    bags: list
    sites: Optional[list] = None
    cells: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.feature_names = tuple(self.feature_names)
        n = len(self.records)
        if self.features.shape != (n, len(self.feature_names)):
            raise ValueError(f"feature matrix shape {self.features.shape} does not match {n} records")
        ids = self.patient_ids
        if len(set(ids)) != n:
            raise ValueError("patient ids must be unique")
        if len(self.bags) != n or any(b.patient_id != i for b, i in zip(self.bags, ids)):
            raise ValueError("bags are not aligned with records")
        if self.sites is not None and len(self.sites) != n:
            raise ValueError("site labels are not aligned with records")
        if self.cells is not None:
            self.cells = np.asarray(self.cells, dtype=float)
            if self.cells.shape != (n, len(CELL_TYPES)):
                raise ValueError("cell table must have one row per patient and six columns")
            if np.any(np.abs(self.cells.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError("cell fractions must sum to 1 per patient")

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([name.startswith("mut_") for name in self.feature_names])

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "CohortBundle":
        idx = [int(i) for i in idx]
        return CohortBundle(
            records=[self.records[i] for i in idx],
            feature_names=self.feature_names,
            features=self.features[idx],
            bags=[self.bags[i] for i in idx],
            sites=None if self.sites is None else [self.sites[i] for i in idx],
            cells=None if self.cells is None else self.cells[idx],
            metadata=dict(self.metadata),
        )


def _censor_scale(event_times: np.ndarray, u: np.ndarray, target: float) -> float:
    """Scale ``c`` so that censoring at ``c * u`` hits the target fraction."""
    if target <= 0:
        return np.inf
    lo, hi = np.log(event_times.min() * 1e-3), np.log(event_times.max() * 1e3)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        frac = np.mean(np.exp(mid) * u < event_times)
        if frac > target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(hi))


def generate_synthetic(spec: SyntheticSpec) -> CohortBundle:
    """Draw a cohort; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    beta = np.array(spec.beta)

    Xb = (rng.random((n, spec.p_binary)) < 0.3).astype(float)
    Xc = rng.normal(size=(n, spec.p_continuous))
    X = np.hstack([Xb, Xc])
    z = rng.normal(size=n)
    log_risk = X @ beta + spec.image_signal * z

    # Weibull PH: S(t) = exp(-(t / scale)^k * exp(r))
    u_event = rng.random(n)
    t_event = spec.weibull_scale * (-np.log(u_event) * np.exp(-log_risk)) ** (1.0 / spec.weibull_shape)
    u_cens = rng.random(n)
    c_scale = _censor_scale(t_event, u_cens, spec.censoring)
    t_cens = c_scale * u_cens
    events = t_event <= t_cens
    times = np.where(events, t_event, t_cens)

    width = len(str(n))
    ids = [f"P{i:0{width}d}" for i in range(n)]
    records = [SurvivalRecord(pid, float(t), bool(e)) for pid, t, e in zip(ids, times, events)]

    background = rng.normal(size=spec.d_in)
    direction = rng.normal(size=spec.d_in)
    direction /= np.linalg.norm(direction)
    risk_center = background + spec.cluster_separation * direction
    share = 1.0 / (1.0 + np.exp(-spec.image_slope * z))
    bags = []
    lo, hi = spec.patches
    for i, pid in enumerate(ids):
        m = int(rng.integers(lo, hi + 1))
        is_risk = rng.random(m) < share[i]
        vectors = np.where(is_risk[:, None], risk_center, background) + rng.normal(size=(m, spec.d_in))
        side = int(np.ceil(np.sqrt(m)))
        cells = rng.choice(side * side, size=m, replace=False)
        coords = np.stack([cells % side, cells // side], axis=1) * PATCH_PIXELS
        bags.append(EmbeddingBag(pid, tuple(f"{pid}_t{j:03d}" for j in range(m)), vectors, coords))

    sites = [f"site_{chr(ord('A') + int(s))}" for s in rng.integers(0, spec.n_sites, size=n)] if spec.n_sites > 0 else None

    r_std = (log_risk - log_risk.mean()) / (log_risk.std() + 1e-12)
    logits = _CELL_BASE + 0.3 * rng.normal(size=(n, len(CELL_TYPES)))
    logits[:, CELL_TYPES.index("inflammatory")] -= 0.7 * r_std
    logits[:, CELL_TYPES.index("normal")] += 0.3 * r_std
    cells = np.exp(logits - logits.max(axis=1, keepdims=True))
    cells /= cells.sum(axis=1, keepdims=True)

    metadata = {
        "synthetic_spec": spec.to_dict(),
        "realized_censoring": float(1.0 - events.mean()),
        "image_signal": spec.image_signal,
    }
    return CohortBundle(records, spec.feature_names, X, bags, sites, cells, metadata)
