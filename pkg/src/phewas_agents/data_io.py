"""Cohort CSV ingestion/serialisation and the seeded synthetic cohort generator.

Randomness
----------
Every random column draws from its own stream: a Philox4x64 counter-based
generator (``numpy.random.Philox``) keyed by BLAKE2b-128 of ``"<seed>/<label>"``.
Streams are therefore independent of one another and of draw order, and a
given (seed, label) always yields the same sequence for a fixed NumPy
release.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .domain import (
    DISEASE_PREFIX, DISEASES, FACTOR_PREFIX, PHENO_PREFIX,
    AnatomicalStructure, Cohort, Factor, FactorCategory, FactorKind, PhenotypeCatalog,
    build_default_catalog, default_factors, load_factors,
)
from .errors import SchemaError, SpecError

log = logging.getLogger(__name__)

MAX_PLANTED_R = 0.9
MAX_MISSING_RATE = 0.5
MAX_REPAIR_DELTA = 0.05
EIG_FLOOR = 1e-8


def stream(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{int(seed)}/{label}".encode("utf-8"), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def derive_seed(*parts) -> int:
    """64-bit seed derived deterministically from arbitrary labels."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def format_number(v: float) -> str:
    """Plain decimal notation with 9 significant digits."""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    s = format(v, ".9g")
    if "e" in s or "E" in s:
        s = np.format_float_positional(v, precision=9, unique=False, fractional=False, trim="-")
    return s


def round_sig9(a: np.ndarray) -> np.ndarray:
    return np.array([float(format(v, ".9g")) for v in np.ravel(a)], dtype=float).reshape(np.shape(a))


# --------------------------------------------------------------------------- CSV


def write_cohort_csv(cohort: Cohort, path) -> None:
    header = (["participant_id"]
              + [PHENO_PREFIX + p for p in cohort.phenotype_ids]
              + [FACTOR_PREFIX + f.id for f in cohort.factors]
              + [DISEASE_PREFIX + d for d in cohort.disease_names])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, pid in enumerate(cohort.participant_ids):
            row = [pid]
            for j in range(len(cohort.phenotype_ids)):
                row.append("" if cohort.pheno_missing[i, j] else format_number(cohort.pheno_values[i, j]))
            for j, f in enumerate(cohort.factors):
                if cohort.factor_missing[i, j]:
                    row.append("")
                elif f.kind is FactorKind.CATEGORICAL:
                    row.append(f.levels[int(cohort.factor_values[i, j])])
                else:
                    row.append(format_number(cohort.factor_values[i, j]))
            row.extend(str(int(v)) for v in cohort.disease_labels[i])
            w.writerow(row)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise SchemaError(f"row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def _infer_factor(fid: str, cells: list[str]) -> Factor:
    present = [c for c in cells if c != ""]
    try:
        nums = {float(c) for c in present}
    except ValueError:
        levels = tuple(sorted(set(present)))
        if len(levels) < 2:
            levels = levels + ("_other",) * (2 - len(levels))
        return Factor(fid, fid, FactorCategory.RISK_FACTOR, FactorKind.CATEGORICAL, levels)
    kind = FactorKind.BINARY if nums and nums <= {0.0, 1.0} else FactorKind.CONTINUOUS
    return Factor(fid, fid, FactorCategory.RISK_FACTOR, kind)


def load_cohort_csv(path, factors: Sequence[Factor] | None = None) -> Cohort:
    """Read a cohort CSV; empty cells become missing flags.

    ``factors`` declares factor kinds and levels; factor columns without a
    declaration are inferred (0/1 -> Binary, numeric -> Continuous,
    otherwise Categorical with sorted levels).
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: missing header")
    header, body = rows[0], rows[1:]
    if not header or header[0] != "participant_id":
        raise SchemaError(f"{path}: first header column must be 'participant_id'")
    pheno_cols, factor_cols, disease_cols = [], [], []
    for j, name in enumerate(header[1:], start=1):
        if name.startswith(PHENO_PREFIX):
            pheno_cols.append((j, name[len(PHENO_PREFIX):]))
        elif name.startswith(FACTOR_PREFIX):
            factor_cols.append((j, name[len(FACTOR_PREFIX):]))
        elif name.startswith(DISEASE_PREFIX):
            disease_cols.append((j, name[len(DISEASE_PREFIX):]))
        else:
            raise SchemaError(f"{path}: header column {name!r} has no known prefix")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate header column")
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {i} has {len(r)} cells, expected {len(header)}")

    ids = [r[0] for r in body]
    seen = set()
    for i, pid in enumerate(ids, start=2):
        if pid == "":
            raise SchemaError(f"{path}: row {i}: empty participant_id")
        if pid in seen:
            raise SchemaError(f"{path}: row {i}: duplicate participant id {pid!r}")
        seen.add(pid)

    n = len(body)
    pv = np.full((n, len(pheno_cols)), np.nan)
    pm = np.zeros((n, len(pheno_cols)), dtype=bool)
    for k, (j, pid) in enumerate(pheno_cols):
        for i, r in enumerate(body):
            cell = r[j].strip()
            if cell == "":
                pm[i, k] = True
            else:
                pv[i, k] = _parse_float(cell, i + 2, header[j])

    declared = {f.id: f for f in (factors or ())}
    flist = []
    fv = np.full((n, len(factor_cols)), np.nan)
    fm = np.zeros((n, len(factor_cols)), dtype=bool)
    for k, (j, fid) in enumerate(factor_cols):
        cells = [r[j].strip() for r in body]
        f = declared.get(fid) or _infer_factor(fid, cells)
        flist.append(f)
        for i, cell in enumerate(cells):
            if cell == "":
                fm[i, k] = True
            elif f.kind is FactorKind.CATEGORICAL:
                try:
                    fv[i, k] = f.levels.index(cell)
                except ValueError:
                    raise SchemaError(f"{path}: row {i + 2}, column {header[j]!r}: unknown level {cell!r}") from None
            else:
                v = _parse_float(cell, i + 2, header[j])
                if f.kind is FactorKind.BINARY and v not in (0.0, 1.0):
                    raise SchemaError(f"{path}: row {i + 2}, column {header[j]!r}: binary value {cell!r}")
                fv[i, k] = v

    dl = np.zeros((n, len(disease_cols)), dtype=np.int8)
    for k, (j, _) in enumerate(disease_cols):
        for i, r in enumerate(body):
            cell = r[j].strip()
            if cell not in ("0", "1"):
                raise SchemaError(f"{path}: row {i + 2}, column {header[j]!r}: disease label must be 0 or 1")
            dl[i, k] = int(cell)

    return Cohort(ids, [p for _, p in pheno_cols], pv, pm, flist, fv, fm,
                  [d for _, d in disease_cols], dl)


def read_cohort(path, factors_path=None) -> Cohort:
    """Load a cohort, picking up ``<stem>.factors.json`` next to it when present."""
    path = Path(path)
    if factors_path is None:
        sidecar = path.with_suffix(".factors.json")
        if sidecar.exists():
            factors_path = sidecar
    factors = load_factors(factors_path) if factors_path else None
    return load_cohort_csv(path, factors)


# --------------------------------------------------------------------- synthetic

# (mean, sd) on the natural scale; loosely follows published UK Biobank CMR reference ranges
TYPICAL_VALUES = {
    "lvedv": (150.0, 32.0), "lvesv": (62.0, 18.0), "lvsv": (88.0, 18.0), "lvef": (59.0, 6.0),
    "lvco": (5.4, 1.2), "lvm": (88.0, 22.0), "wt_aha_2": (6.2, 1.1), "ell_4": (-18.5, 3.0),
    "rvedv": (160.0, 36.0), "rvesv": (71.0, 21.0), "rvsv": (89.0, 19.0), "rvef": (56.0, 6.0),
    "lav_max": (72.0, 22.0), "lav_min": (31.0, 13.0), "lasv": (41.0, 12.0), "laef": (58.0, 9.0),
    "rav_max": (84.0, 26.0), "rav_min": (42.0, 17.0), "rasv": (42.0, 14.0), "raef": (51.0, 10.0),
    "aao_max_area": (860.0, 190.0), "aao_min_area": (770.0, 180.0), "aao_distensibility": (2.3, 1.1),
    "dao_max_area": (470.0, 95.0), "dao_min_area": (400.0, 85.0), "dao_distensibility": (3.0, 1.2),
    "age": (55.0, 7.5), "weight": (76.0, 15.0), "height": (170.0, 9.0),
    "physical_activity": (40.0, 20.0), "systolic_bp": (138.0, 19.0), "diastolic_bp": (80.0, 10.0),
    "cholesterol": (5.7, 1.1),
}
DEFAULT_TYPICAL = (100.0, 15.0)


@dataclass(frozen=True)
class DiseaseModel:
    """Logistic model on standardised latent columns (``pheno.<id>`` / ``factor.<id>``)."""

    intercept: float = -1.3862943611198906  # logit(0.2)
    coefficients: Mapping[str, float] = field(default_factory=dict)


@dataclass
class SynthSpec:
    seed: int
    n_participants: int
    catalog: PhenotypeCatalog = field(default_factory=build_default_catalog)
    factors: list = field(default_factory=default_factors)
    planted_associations: list = field(default_factory=list)   # (phenotype_id, factor_id, r)
    planted_confounders: list = field(default_factory=list)    # (factor_id, [structures], r)
    disease_models: dict = field(default_factory=dict)          # disease name -> DiseaseModel
    missing_rate: object = 0.0                                  # float or {column id: rate}
    diseases: tuple = DISEASES
    binary_prevalence: dict = field(default_factory=dict)
    id_prefix: str = "P"

    def validate(self) -> None:
        if self.n_participants < 1:
            raise SpecError("n_participants must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        fids = {f.id for f in self.factors}
        for pid, fid, r in self.planted_associations:
            if pid not in self.catalog or fid not in fids:
                raise SpecError(f"planted association references unknown column ({pid}, {fid})")
            if abs(r) > MAX_PLANTED_R:
                raise SpecError(f"|r| = {abs(r)} exceeds {MAX_PLANTED_R}")
        for fid, structures, r in self.planted_confounders:
            if fid not in fids:
                raise SpecError(f"planted confounder references unknown factor {fid!r}")
            for s in structures:
                AnatomicalStructure(s)
            if abs(r) > MAX_PLANTED_R:
                raise SpecError(f"|r| = {abs(r)} exceeds {MAX_PLANTED_R}")
        rates = self.missing_rate.values() if isinstance(self.missing_rate, Mapping) else [self.missing_rate]
        for rate in rates:
            if not 0.0 <= float(rate) <= MAX_MISSING_RATE:
                raise SpecError(f"missing rate {rate} outside [0, {MAX_MISSING_RATE}]")
        for name, model in self.disease_models.items():
            if name not in self.diseases:
                raise SpecError(f"disease model for unknown disease {name!r}")

    def rate_for(self, column: str) -> float:
        if isinstance(self.missing_rate, Mapping):
            return float(self.missing_rate.get(column, 0.0))
        return float(self.missing_rate)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "SynthSpec":
        base = Path(base_dir) if base_dir else Path(".")
        catalog = build_default_catalog()
        if d.get("catalog"):
            catalog = PhenotypeCatalog.load(base / d["catalog"])
        if d.get("phenotypes"):
            catalog = catalog.subset(d["phenotypes"])
        if isinstance(d.get("factors"), str):
            factors = load_factors(base / d["factors"])
        elif d.get("factors"):
            factors = [Factor.from_dict(f) for f in d["factors"]]
        else:
            factors = default_factors()
        models = {
            name: DiseaseModel(float(m.get("intercept", DiseaseModel.intercept)), dict(m.get("coefficients", {})))
            for name, m in d.get("disease_models", {}).items()
        }
        return cls(
            seed=int(d.get("seed", 0)),
            n_participants=int(d["n_participants"]),
            catalog=catalog,
            factors=factors,
            planted_associations=[tuple(x) for x in d.get("planted_associations", [])],
            planted_confounders=[(x[0], list(x[1]), x[2]) for x in d.get("planted_confounders", [])],
            disease_models=models,
            missing_rate=d.get("missing_rate", 0.0),
            diseases=tuple(d.get("diseases", DISEASES)),
            binary_prevalence=dict(d.get("binary_prevalence", {})),
        )

    @classmethod
    def load(cls, path) -> "SynthSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


def loading_matrix(spec: SynthSpec) -> np.ndarray:
    """Phenotype x factor loadings b[p, f] implied by the planted effects.

    Confounders load every phenotype of the touched structures; an explicit
    planted association overrides the confounder loading for its pair.
    """
    pids = spec.catalog.ids
    fids = [f.id for f in spec.factors]
    b = np.zeros((len(pids), len(fids)))
    for fid, structures, r in spec.planted_confounders:
        touched = {AnatomicalStructure(s) for s in structures}
        j = fids.index(fid)
        for i, p in enumerate(spec.catalog):
            if p.structure in touched:
                b[i, j] = r
    for pid, fid, r in spec.planted_associations:
        b[pids.index(pid), fids.index(fid)] = r
    return b


def nearest_correlation(c: np.ndarray) -> tuple[np.ndarray, float]:
    """Eigenvalue clipping at 1e-8 then unit-diagonal renormalisation.

    Returns the repaired matrix and the Frobenius norm of the change.
    """
    w, v = np.linalg.eigh(c)
    if w.min() > EIG_FLOOR:
        return c, 0.0
    fixed = (v * np.maximum(w, EIG_FLOOR)) @ v.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return fixed, float(np.linalg.norm(fixed - c, "fro"))


def latent_correlation(spec: SynthSpec) -> tuple[np.ndarray, float]:
    """Correlation matrix of the latent normals (phenotypes, then factors).

    Phenotypes follow z_p = sum_f b[p,f] z_f + noise with independent
    factor latents, so corr(p, f) = b[p, f] and corr(p, q) = sum_f b[p,f] b[q,f].
    The matrix is positive definite whenever every phenotype's loadings
    satisfy sum_f b[p,f]^2 < 1; otherwise it is repaired.
    """
    b = loading_matrix(spec)
    d, m = b.shape
    c = np.eye(d + m)
    c[:d, :d] = b @ b.T
    np.fill_diagonal(c, 1.0)
    c[:d, d:] = b
    c[d:, :d] = b.T
    fixed, delta = nearest_correlation(c)
    if delta > MAX_REPAIR_DELTA:
        raise SpecError(f"planted correlation structure infeasible: repair delta {delta:.4f} > {MAX_REPAIR_DELTA}")
    if delta > 0:
        log.warning("latent correlation repaired to nearest PD matrix (Frobenius delta %.3g)", delta)
    return fixed, delta


def generate_synthetic_cohort(spec: SynthSpec) -> Cohort:
    """Gaussian-copula cohort; fully determined by ``spec``."""
    spec.validate()
    c, _ = latent_correlation(spec)
    n = spec.n_participants
    pids = list(spec.catalog.ids)
    names = [PHENO_PREFIX + p for p in pids] + [FACTOR_PREFIX + f.id for f in spec.factors]
    chol = np.linalg.cholesky(c)
    e = np.column_stack([stream(spec.seed, f"latent/{name}").standard_normal(n) for name in names])
    z = e @ chol.T
    d = len(pids)

    pheno = np.empty((n, d))
    for i, pid in enumerate(pids):
        mean, sd = TYPICAL_VALUES.get(pid, DEFAULT_TYPICAL)
        pheno[:, i] = mean + sd * z[:, i]
    pheno = round_sig9(pheno)

    nd = NormalDist()
    fvals = np.empty((n, len(spec.factors)))
    for j, f in enumerate(spec.factors):
        col = z[:, d + j]
        if f.kind is FactorKind.CONTINUOUS:
            mean, sd = TYPICAL_VALUES.get(f.id, DEFAULT_TYPICAL)
            fvals[:, j] = round_sig9(mean + sd * col)
        elif f.kind is FactorKind.BINARY:
            prev = float(spec.binary_prevalence.get(f.id, 0.5))
            fvals[:, j] = (col > nd.inv_cdf(1.0 - prev)).astype(float)
        else:
            k = len(f.levels)
            cuts = [nd.inv_cdf(q / k) for q in range(1, k)]
            fvals[:, j] = np.searchsorted(cuts, col).astype(float)

    pm = np.column_stack([stream(spec.seed, f"missing/{PHENO_PREFIX}{p}").random(n) < spec.rate_for(PHENO_PREFIX + p)
                          for p in pids]) if d else np.zeros((n, 0), bool)
    fm = np.column_stack([stream(spec.seed, f"missing/{FACTOR_PREFIX}{f.id}").random(n) < spec.rate_for(FACTOR_PREFIX + f.id)
                          for f in spec.factors]) if spec.factors else np.zeros((n, 0), bool)

    col_index = {name: k for k, name in enumerate(names)}
    labels = np.zeros((n, len(spec.diseases)), dtype=np.int8)
    for k, name in enumerate(spec.diseases):
        model = spec.disease_models.get(name, DiseaseModel())
        logit = np.full(n, float(model.intercept))
        for col, beta in model.coefficients.items():
            if col not in col_index:
                raise SpecError(f"disease {name!r} references unknown column {col!r}")
            logit += float(beta) * z[:, col_index[col]]
        prob = 1.0 / (1.0 + np.exp(-logit))
        labels[:, k] = stream(spec.seed, f"disease/{name}").random(n) < prob

    width = max(6, len(str(n)))
    ids = [f"{spec.id_prefix}{i + 1:0{width}d}" for i in range(n)]
    return Cohort(ids, pids, pheno, pm, spec.factors, fvals, fm, spec.diseases, labels)
