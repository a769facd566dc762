"""Statistical tools available to agents.

Every p-value here goes through :func:`betainc`, a self-contained regularized
incomplete beta function, so results do not depend on the installed SciPy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .domain import Association, Cohort, FactorKind
from .errors import DegenerateInputError, ValidationError

log = logging.getLogger(__name__)

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 20000


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    Uses the continued fraction on whichever side of the mean converges
    fastest (x < (a+1)/(a+b+2)) and the symmetry I_x(a,b) = 1 - I_{1-x}(b,a)
    otherwise. Absolute error is below 1e-10 for the (a, b) ranges used by the
    t and F tails.
    """
    if a <= 0 or b <= 0:
        raise ValidationError("betainc needs a > 0 and b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValidationError("df must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t * t)))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return min(1.0, betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).ravel()


def pearson_corr(x, y) -> float:
    x, y = _vec(x), _vec(y)
    if x.size != y.size:
        raise DegenerateInputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise DegenerateInputError("pearson_corr needs at least 3 observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("zero variance")
    xd = x - x.mean()
    yd = y - y.mean()
    r = float(np.dot(xd, yd) / math.sqrt(float(np.dot(xd, xd)) * float(np.dot(yd, yd))))
    return max(-1.0, min(1.0, r))


def corr_p_value(r: float, n: int) -> float:
    """Two-sided p-value for a sample correlation under H0: rho = 0."""
    if n < 4:
        raise DegenerateInputError("corr_p_value needs n >= 4")
    if abs(r) > 1.0:
        raise ValidationError(f"|r| must be <= 1, got {r}")
    if abs(r) == 1.0:
        return 0.0
    df = n - 2
    # df / (df + t^2) with t = r sqrt(df) / sqrt(1 - r^2) simplifies to 1 - r^2
    x = (1.0 - r) * (1.0 + r)
    return min(1.0, betainc(df / 2.0, 0.5, x))


def effect_size_cohens_d(group_a, group_b) -> float:
    a, b = _vec(group_a), _vec(group_b)
    if a.size < 2 or b.size < 2:
        raise DegenerateInputError("each group needs at least 2 observations")
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled <= 0:
        raise DegenerateInputError("zero pooled variance")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


@dataclass(frozen=True)
class DistributionSummary:
    n: int
    mean: float
    sd: float
    min: float
    max: float
    q1: float
    median: float
    q3: float
    missing_count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def distribution_summary(x, missing=None) -> DistributionSummary:
    """Summary over the non-missing values of ``x``.

    ``missing`` is a boolean mask; NaN entries are also treated as missing.
    Quartiles interpolate linearly between closest ranks; sd is the sample
    standard deviation (0 for a singleton).
    """
    x = _vec(x)
    mask = np.isnan(x) if missing is None else (np.asarray(missing, dtype=bool).ravel() | np.isnan(x))
    vals = x[~mask]
    if vals.size == 0:
        raise DegenerateInputError("all values missing")
    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return DistributionSummary(
        n=int(vals.size), mean=float(vals.mean()), sd=sd,
        min=float(vals.min()), max=float(vals.max()),
        q1=float(q1), median=float(med), q3=float(q3),
        missing_count=int(mask.sum()),
    )


def bonferroni_adjust(p_values: Sequence[float], n_tests: int | None = None) -> list[float]:
    p = _vec(p_values)
    if p.size and (np.isnan(p).any() or (p < 0).any() or (p > 1).any()):
        raise ValidationError("p-values must lie in [0, 1]")
    m = p.size if n_tests is None else n_tests
    if m < p.size:
        raise ValidationError("n_tests smaller than the number of p-values")
    return [min(1.0, float(v) * m) for v in p]


def anova_oneway(values, groups) -> tuple[float, float, float]:
    """One-way ANOVA; returns (F, p, eta_squared)."""
    values = _vec(values)
    groups = np.asarray(groups).ravel()
    labels = np.unique(groups)
    if labels.size < 2:
        raise DegenerateInputError("ANOVA needs at least two observed groups")
    n = values.size
    k = labels.size
    if n - k < 1:
        raise DegenerateInputError("ANOVA needs more observations than groups")
    grand = values.mean()
    ss_total = float(((values - grand) ** 2).sum())
    if np.ptp(values) == 0:
        raise DegenerateInputError("zero variance")
    ss_between = 0.0
    ss_within = 0.0
    for g in labels:
        v = values[groups == g]
        m = v.mean()
        ss_between += v.size * (m - grand) ** 2
        ss_within += float(((v - m) ** 2).sum())
    eta2 = min(1.0, ss_between / ss_total)
    if ss_within == 0.0:
        return math.inf, 0.0, eta2
    f = (ss_between / (k - 1)) / (ss_within / (n - k))
    return float(f), f_sf(f, k - 1, n - k), float(eta2)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int


@dataclass(frozen=True)
class HypothesisTestResult:
    test: str
    statistic: float
    p_value: float
    df: tuple[float, ...] = ()


Payload = Union[CorrelationResult, HypothesisTestResult, DistributionSummary]

_TOOL_PAYLOADS = {
    "pearson_corr": CorrelationResult,
    "point_biserial": CorrelationResult,
    "anova_oneway": HypothesisTestResult,
    "bootstrap_mean": DistributionSummary,
    "distribution_summary": DistributionSummary,
}


@dataclass(frozen=True)
class ToolEvidence:
    tool_name: str
    targets: tuple[str, ...]
    payload: Payload
    n_used: int

    def __post_init__(self):
        expected = _TOOL_PAYLOADS.get(self.tool_name)
        if expected is None:
            raise ValidationError(f"unknown tool {self.tool_name!r}")
        if not isinstance(self.payload, expected):
            raise ValidationError(f"{self.tool_name} evidence needs a {expected.__name__} payload")
        if self.n_used < 0:
            raise ValidationError("n_used must be >= 0")

    def to_dict(self) -> dict:
        payload = dict(self.payload.__dict__)
        if "df" in payload:
            payload["df"] = list(payload["df"])
        return {"tool_name": self.tool_name, "targets": list(self.targets),
                "payload": payload, "n_used": self.n_used}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolEvidence":
        kind = _TOOL_PAYLOADS[d["tool_name"]]
        payload = dict(d["payload"])
        if kind is HypothesisTestResult:
            payload["df"] = tuple(payload.get("df", ()))
        return cls(d["tool_name"], tuple(d["targets"]), kind(**payload), int(d["n_used"]))


class ScanResult(list):
    """List of associations; skipped pairs are kept in ``warnings``."""

    def __init__(self, items=(), warnings=()):
        super().__init__(items)
        self.warnings = list(warnings)


MIN_COMPLETE = 10


def _test_pair(y: np.ndarray, fv: np.ndarray, kind: FactorKind):
    """(strength, p_raw, effect_size, tool evidence payload) for one complete-case pair."""
    if kind is FactorKind.CATEGORICAL:
        f, p, eta2 = anova_oneway(y, fv)
        return math.sqrt(eta2), p, eta2, HypothesisTestResult("anova_oneway", f, p)
    r = pearson_corr(y, fv)
    p = corr_p_value(r, y.size)
    if kind is FactorKind.BINARY:
        d = effect_size_cohens_d(y[fv == 1.0], y[fv == 0.0])
        return r, p, d, CorrelationResult(r, p, y.size)
    return r, p, r, CorrelationResult(r, p, y.size)


def association_scan(
    cohort: Cohort,
    phenotypes: Sequence[str],
    factors: Sequence[str],
    family_size: int | None = None,
) -> ScanResult:
    """Test every (phenotype, factor) pair on its pairwise-complete cases.

    Continuous factors: Pearson r. Binary factors: point-biserial r (Pearson
    against the 0/1 coding) with Cohen's d as effect size. Categorical
    factors: one-way ANOVA, strength = sqrt(eta^2).

    ``p_adjusted`` is Bonferroni over ``family_size`` tests, defaulting to the
    number of pairs actually computed. Rows are processed in participant-id
    order, so the result does not depend on the cohort's row order.
    """
    order = np.array(sorted(range(cohort.n), key=cohort.participant_ids.__getitem__), dtype=int)
    raw = []
    warnings = []
    for pid in phenotypes:
        pv, pm = cohort.phenotype_column(pid)
        pv, pm = pv[order], pm[order]
        for fid in factors:
            factor = cohort.factor(fid)
            fv, fm = cohort.factor_column(fid)
            fv, fm = fv[order], fm[order]
            ok = ~(pm | fm)
            n = int(ok.sum())
            if n < MIN_COMPLETE:
                warnings.append((pid, fid, f"only {n} complete cases"))
                continue
            try:
                strength, p, eff, _ = _test_pair(pv[ok], fv[ok], factor.kind)
            except DegenerateInputError as exc:
                warnings.append((pid, fid, str(exc)))
                continue
            raw.append((pid, fid, strength, p, eff, n))
    for w in warnings:
        log.debug("scan skipped %s x %s: %s", *w)
    m = len(raw) if family_size is None else max(family_size, len(raw))
    adjusted = bonferroni_adjust([r[3] for r in raw], m) if raw else []
    out = [
        Association(pid, fid, float(max(-1.0, min(1.0, s))), float(p), float(pa), float(e), n, 0.0)
        for (pid, fid, s, p, e, n), pa in zip(raw, adjusted)
    ]
    return ScanResult(out, warnings)


def evidence_for(assoc: Association, kind: FactorKind) -> ToolEvidence:
    """Tool-evidence record describing how ``assoc`` was computed."""
    targets = (assoc.phenotype_id, assoc.factor_id)
    if kind is FactorKind.CATEGORICAL:
        return ToolEvidence("anova_oneway", targets,
                            HypothesisTestResult("anova_oneway", assoc.effect_size, assoc.p_raw), assoc.n_complete)
    tool = "point_biserial" if kind is FactorKind.BINARY else "pearson_corr"
    return ToolEvidence(tool, targets, CorrelationResult(assoc.strength, assoc.p_raw, assoc.n_complete),
                        assoc.n_complete)
