"""Phenotype-set quality metrics: independence/validity score and coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import AnatomicalStructure, Cohort, PhenotypeCatalog
from .errors import ConfigurationError, DegenerateInputError, ValidationError
from .stats import pearson_corr

N_STRUCTURES = len(AnatomicalStructure)


@dataclass(frozen=True)
class MetricReport:
    q_score: float | None
    dependency: float | None
    coverage: float
    k: int
    k_valid: int
    structures_covered: tuple[str, ...]
    combos_covered: int

    def to_dict(self) -> dict:
        return {
            "q_score": self.q_score,
            "dependency": self.dependency,
            "coverage": self.coverage,
            "k": self.k,
            "k_valid": self.k_valid,
            "structures_covered": list(self.structures_covered),
            "combos_covered": self.combos_covered,
        }


def valid_ids(phenotype_ids: Sequence[str], cohort: Cohort, catalog: PhenotypeCatalog) -> list[str]:
    """Ids that match a catalog entry and a cohort column with nonzero variance."""
    out = []
    for pid in phenotype_ids:
        if pid not in catalog or pid not in cohort.phenotype_ids:
            continue
        values, missing = cohort.phenotype_column(pid)
        observed = values[~missing]
        if observed.size >= 2 and np.ptp(observed) > 0:
            out.append(pid)
    return out


def _abs_corr(cohort: Cohort, a: str, b: str) -> float:
    va, ma = cohort.phenotype_column(a)
    vb, mb = cohort.phenotype_column(b)
    ok = ~(ma | mb)
    try:
        return abs(pearson_corr(va[ok], vb[ok]))
    except (DegenerateInputError, ValidationError):
        # too few or constant pairwise-complete cases: no evidence of dependence
        return 0.0


def q_score(phenotype_ids: Sequence[str], cohort: Cohort, catalog: PhenotypeCatalog) -> tuple[float, int]:
    """Independence times validity ratio.

    ``(1 - mean |corr| over valid pairs) * k_valid / k``; with fewer than two
    valid ids the bracket is taken as 1. Every listed id counts towards k,
    duplicates included.
    """
    k = len(phenotype_ids)
    if k < 2:
        raise ValidationError("q_score needs at least two phenotypes")
    valid = valid_ids(phenotype_ids, cohort, catalog)
    kv = len(valid)
    if kv < 2:
        bracket = 1.0
    else:
        total = math.fsum(_abs_corr(cohort, valid[i], valid[j])
                          for i in range(kv) for j in range(i + 1, kv))
        bracket = 1.0 - 2.0 * total / (kv * (kv - 1))
    q = min(1.0, max(0.0, bracket)) * kv / k
    return q, kv


def dependency(q: float) -> float:
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"q {q} outside [0, 1]")
    return 1.0 - q


def coverage(phenotype_ids: Sequence[str], catalog: PhenotypeCatalog, w_s: float = 0.5, w_f: float = 0.5) -> float:
    """``w_s * structures / 6 + w_f * (structure, function) combos / catalog combos``.

    Ids absent from the catalog are ignored.
    """
    if w_s < 0 or w_f < 0 or not math.isclose(w_s + w_f, 1.0, abs_tol=1e-12):
        raise ConfigurationError("coverage weights must be non-negative and sum to 1")
    f_total = len(catalog.grid)
    if f_total == 0:
        raise ConfigurationError("catalog has no (structure, function) combinations")
    known = [catalog[p] for p in phenotype_ids if p in catalog]
    structures = {p.structure for p in known}
    combos = {(p.structure, p.function) for p in known}
    return w_s * len(structures) / N_STRUCTURES + w_f * len(combos) / f_total


def metric_report(phenotype_ids: Sequence[str], cohort: Cohort, catalog: PhenotypeCatalog,
                  w_s: float = 0.5, w_f: float = 0.5) -> MetricReport:
    """All metrics for a set; q and dependency are None when fewer than two ids are given."""
    ids = list(phenotype_ids)
    if len(ids) >= 2:
        q, kv = q_score(ids, cohort, catalog)
        dep = dependency(q)
    else:
        q = dep = None
        kv = len(valid_ids(ids, cohort, catalog))
    known = [catalog[p] for p in ids if p in catalog]
    structures = sorted({p.structure.value for p in known})
    combos = len({(p.structure, p.function) for p in known})
    return MetricReport(q, dep, coverage(ids, catalog, w_s, w_f), len(ids), kv, tuple(structures), combos)
