"""Censored time-to-event estimators and the hypothesis tests built on them.

Everything here is pure and deterministic. Distribution tails come from the
regularized incomplete gamma and beta functions in :mod:`scipy.special`.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import DegenerateTest, NoComparablePairs


@dataclass(frozen=True)
class SurvivalRecord:
    """Follow-up of one patient. ``event`` is True when resistance was observed."""

    patient_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"{self.patient_id}: time must be positive and finite, got {self.time!r}")


def survival_arrays(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` as float and bool arrays."""
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([bool(r.event) for r in records], dtype=bool)
    return times, events


def make_records(times, events, ids=None) -> list[SurvivalRecord]:
    """Build records from parallel sequences; ids default to ``p0, p1, ...``."""
    times = list(times)
    events = list(events)
    if ids is None:
        ids = [f"p{i}" for i in range(len(times))]
    if not (len(ids) == len(times) == len(events)):
        raise ValueError("times, events and ids must have equal length")
    return [SurvivalRecord(str(i), float(t), bool(e)) for i, t, e in zip(ids, times, events)]


class RiskSetIndex:
    """Distinct event times and, for each, the records still at risk.

    The risk set at ``t`` is every record with ``time >= t`` (Breslow): tied
    events share it and a record censored at ``t`` still counts.
    """

    def __init__(self, records: Sequence[SurvivalRecord]):
        self.times, self.events = survival_arrays(records)
        self.event_times = np.unique(self.times[self.events])

    def at_risk(self, t: float) -> np.ndarray:
        """Indices of the records at risk at time ``t``."""
        return np.flatnonzero(self.times >= t)

    def __iter__(self):
        for t in self.event_times:
            yield t, self.at_risk(t)


# ---------------------------------------------------------------------------
# Concordance


def concordance_index(records: Sequence[SurvivalRecord], risks) -> float:
    """Harrell's concordance index.

    A pair is comparable when the patient with the shorter time had an event.
    It is concordant when that patient also has the strictly higher risk;
    equal risks earn half credit.

    Raises
    ------
    NoComparablePairs
        If no pair is comparable (all censored, or a single record).
    """
    times, events = survival_arrays(records)
    risks = np.asarray(risks, dtype=float)
    if risks.shape != times.shape:
        raise ValueError(f"{risks.size} risks for {times.size} records")
    return concordance_from_arrays(times, events, risks)


def concordance_from_arrays(times: np.ndarray, events: np.ndarray, risks: np.ndarray) -> float:
    # rows index the earlier (event) patient, columns the later one
    comparable = events[:, None] & (times[:, None] < times[None, :])
    n_pairs = np.count_nonzero(comparable)
    if n_pairs == 0:
        raise NoComparablePairs("no comparable pairs: c-index is undefined")
    diff = risks[:, None] - risks[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n_pairs)


# ---------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KmCurve:
    """Product-limit step function; one row per distinct event time."""

    time: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Survival probability at ``t`` (right-continuous steps)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.time, t, side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[idx]

    def rows(self) -> list[tuple[float, float, int, int]]:
        return [
            (float(t), float(s), int(n), int(d))
            for t, s, n, d in zip(self.time, self.survival, self.at_risk, self.events)
        ]


def kaplan_meier(records: Sequence[SurvivalRecord]) -> KmCurve:
    if len(records) == 0:
        raise ValueError("kaplan_meier needs at least one record")
    times, events = survival_arrays(records)
    event_times = np.unique(times[events])
    at_risk = np.array([np.count_nonzero(times >= t) for t in event_times], dtype=int)
    deaths = np.array([np.count_nonzero((times == t) & events) for t in event_times], dtype=int)
    survival = np.cumprod(1.0 - deaths / at_risk) if event_times.size else np.empty(0)
    return KmCurve(event_times, survival, at_risk, deaths)


# ---------------------------------------------------------------------------
# Tests


class TestMethod(str, Enum):
    __test__ = False

    LOG_RANK = "log_rank"
    MANN_WHITNEY_U = "mann_whitney_u"
    T_ONE_SAMPLE = "t_one_sample"
    T_PAIRED = "t_paired"


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: float
    p_value: float
    method: TestMethod
    degrees_of_freedom: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "degrees_of_freedom": self.degrees_of_freedom,
            "method": self.method.value,
        }


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_quantile(p: float, df: float) -> float:
    return float(special.stdtrit(df, p))


def log_rank_test(groups: Sequence[Sequence[SurvivalRecord]]) -> TestResult:
    """k-group log-rank chi-square with k-1 degrees of freedom."""
    if len(groups) < 2:
        raise ValueError("log_rank_test needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("log_rank_test groups must be non-empty")
    k = len(groups)
    arrays = [survival_arrays(g) for g in groups]
    all_times = np.concatenate([t for t, _ in arrays])
    all_events = np.concatenate([e for _, e in arrays])
    if not all_events.any():
        raise DegenerateTest("log-rank test needs at least one event")

    observed = np.zeros(k)
    expected = np.zeros(k)
    cov = np.zeros((k, k))
    for t in np.unique(all_times[all_events]):
        n_g = np.array([np.count_nonzero(tg >= t) for tg, _ in arrays], dtype=float)
        d_g = np.array([np.count_nonzero((tg == t) & eg) for tg, eg in arrays], dtype=float)
        n, d = n_g.sum(), d_g.sum()
        observed += d_g
        expected += d * n_g / n
        if n > 1:
            frac = n_g / n
            scale = d * (n - d) / (n - 1)
            cov += scale * (np.diag(frac) - np.outer(frac, frac))

    diff = (observed - expected)[: k - 1]
    stat = float(diff @ np.linalg.pinv(cov[: k - 1, : k - 1]) @ diff)
    stat = max(stat, 0.0)
    if stat < 1e-12:
        stat = 0.0
    return TestResult(stat, chi2_sf(stat, k - 1), TestMethod.LOG_RANK, float(k - 1))


@lru_cache(maxsize=None)
def _u_counts(m: int, n: int) -> tuple[int, ...]:
    """Number of orderings giving each value of U for sample sizes m, n (no ties)."""
    if m == 0 or n == 0:
        return (1,)
    # last (largest) element is from the first sample -> it beats all n others
    with_first = _u_counts(m - 1, n)
    with_second = _u_counts(m, n - 1)
    counts = [0] * (m * n + 1)
    for u, c in enumerate(with_first):
        counts[u + n] += c
    for u, c in enumerate(with_second):
        counts[u] += c
    return tuple(counts)


def mann_whitney_u(group_a, group_b) -> TestResult:
    """Two-sided Mann-Whitney U test; the statistic is U for ``group_a``.

    Small tie-free samples (combined size <= 12) use the exact null
    distribution, otherwise a tie-corrected normal approximation with
    continuity correction.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("mann_whitney_u groups must be non-empty")
    m, n = a.size, b.size
    diff = a[:, None] - b[None, :]
    u = float(np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0))

    pooled = np.concatenate([a, b])
    _, tie_counts = np.unique(pooled, return_counts=True)
    has_ties = bool((tie_counts > 1).any())
    if m + n <= 12 and not has_ties:
        p = _mwu_exact_p(int(u), m, n)
    else:
        p = _mwu_normal_p(u, m, n, tie_counts)
    return TestResult(u, p, TestMethod.MANN_WHITNEY_U)


def _mwu_exact_p(u: int, m: int, n: int) -> float:
    counts = np.array(_u_counts(m, n), dtype=float)
    total = counts.sum()
    lower = counts[: u + 1].sum() / total
    upper = counts[u:].sum() / total
    return float(min(1.0, 2.0 * min(lower, upper)))


def _mwu_normal_p(u: float, m: int, n: int, tie_counts: np.ndarray) -> float:
    big_n = m + n
    mu = m * n / 2.0
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (big_n * (big_n - 1)) if big_n > 1 else 0.0
    var = m * n / 12.0 * ((big_n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, special.erfc(z / math.sqrt(2.0))))


def t_test_one_sample(values, mu0: float = 0.0) -> TestResult:
    """Two-sided one-sample Student t test.

    Zero-variance samples do not raise: p is 1 when the mean equals ``mu0``
    and 0 otherwise, so degenerate folds cannot break report generation.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("t test needs at least two values")
    df = x.size - 1
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0.0 or sd < 1e-15 * max(1.0, abs(mean)):
        if mean == mu0:
            return TestResult(0.0, 1.0, TestMethod.T_ONE_SAMPLE, float(df))
        # the t statistic is unbounded here; keep it finite and signed
        return TestResult(math.copysign(sys.float_info.max, mean - mu0), 0.0, TestMethod.T_ONE_SAMPLE, float(df))
    t = (mean - mu0) / (sd / math.sqrt(x.size))
    return TestResult(t, t_sf_two_sided(t, df), TestMethod.T_ONE_SAMPLE, float(df))


def t_test_paired(a, b) -> TestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired t test needs equal-length samples")
    res = t_test_one_sample(a - b, 0.0)
    return TestResult(res.statistic, res.p_value, TestMethod.T_PAIRED, res.degrees_of_freedom)


def t_interval(mean: float, sd: float, n: int, level: float = 0.95) -> tuple[float, float]:
    if n < 2:
        raise ValueError("t interval needs n >= 2")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = t_quantile((1.0 + level) / 2.0, n - 1) * sd / math.sqrt(n)
    return mean - half, mean + half


def fold_ci(values, level: float = 0.95, clip: Optional[tuple[float, float]] = None) -> tuple[float, float]:
    """Student-t confidence interval for the mean of per-fold values.

    Pass ``clip=(0, 1)`` for bounded metrics such as the c-index.
    """
    x = np.asarray(values, dtype=float)
    low, high = t_interval(float(x.mean()), float(x.std(ddof=1)), x.size, level)
    if clip is not None:
        low, high = max(low, clip[0]), min(high, clip[1])
    return low, high
