"""Core entities: anatomical catalog, factors, cohorts and associations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, ValidationError

DISEASES = (
    "Hypertension",
    "High cholesterol",
    "Cardiac disease",
    "PVD",
    "Stroke",
    "Asthma",
    "COPD",
    "Diabetes",
    "Depression",
)

PHENO_PREFIX = "pheno."
FACTOR_PREFIX = "factor."
DISEASE_PREFIX = "disease."


class AnatomicalStructure(str, Enum):
    LV = "LV"
    RV = "RV"
    LA = "LA"
    RA = "RA"
    AAo = "AAo"
    DAo = "DAo"


class FunctionCategory(str, Enum):
    VOLUME = "Volume"
    EJECTION_FRACTION = "EjectionFraction"
    MASS = "Mass"
    STROKE_VOLUME = "StrokeVolume"
    CARDIAC_OUTPUT = "CardiacOutput"
    AREA = "Area"
    DISTENSIBILITY = "Distensibility"
    WALL_THICKNESS = "WallThickness"
    STRAIN = "Strain"


class FactorCategory(str, Enum):
    DEMOGRAPHICS = "Demographics"
    ANTHROPOMETRICS = "Anthropometrics"
    LIFESTYLE = "Lifestyle"
    RISK_FACTOR = "RiskFactor"


class FactorKind(str, Enum):
    CONTINUOUS = "Continuous"
    BINARY = "Binary"
    CATEGORICAL = "Categorical"


@dataclass(frozen=True)
class Phenotype:
    id: str
    name: str
    structure: AnatomicalStructure
    function: FunctionCategory
    units: str
    # regional measures whose structure is a convention, not a measurement fact
    assumed_structure: bool = False

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "name": self.name,
            "structure": self.structure.value,
            "function": self.function.value,
            "units": self.units,
        }
        if self.assumed_structure:
            d["assumed_structure"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Phenotype":
        try:
            return cls(
                id=str(d["id"]),
                name=str(d["name"]),
                structure=AnatomicalStructure(d["structure"]),
                function=FunctionCategory(d["function"]),
                units=str(d["units"]),
                assumed_structure=bool(d.get("assumed_structure", False)),
            )
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad catalog entry {d!r}: {exc}") from exc


class PhenotypeCatalog:
    """Ordered, immutable collection of phenotypes.

    ``grid`` is the set of (structure, function) pairs present; it doubles as
    the denominator of the coverage metric, so coverage is always relative to
    an explicit catalog.
    """

    def __init__(self, entries: Iterable[Phenotype]):
        self._entries = tuple(entries)
        self._by_id = {}
        for p in self._entries:
            if p.id in self._by_id:
                raise SchemaError(f"duplicate phenotype id {p.id!r}")
            self._by_id[p.id] = p
        self._grid = frozenset((p.structure, p.function) for p in self._entries)

    @property
    def entries(self) -> tuple[Phenotype, ...]:
        return self._entries

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self._entries)

    @property
    def grid(self) -> frozenset:
        return self._grid

    @property
    def structures(self) -> frozenset:
        return frozenset(p.structure for p in self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, phenotype_id) -> bool:
        return phenotype_id in self._by_id

    def __getitem__(self, phenotype_id: str) -> Phenotype:
        return self._by_id[phenotype_id]

    def __eq__(self, other):
        return isinstance(other, PhenotypeCatalog) and self._entries == other._entries

    def __hash__(self):
        return hash(self._entries)

    def get(self, phenotype_id: str) -> Phenotype | None:
        return self._by_id.get(phenotype_id)

    def for_structure(self, structure: AnatomicalStructure) -> tuple[Phenotype, ...]:
        return tuple(p for p in self._entries if p.structure == structure)

    def order_index(self, phenotype_id: str) -> int:
        return self.ids.index(phenotype_id)

    def sort_ids(self, ids: Iterable[str]) -> list[str]:
        """Catalog order for known ids; unknown ids follow, sorted."""
        ids = set(ids)
        known = [p.id for p in self._entries if p.id in ids]
        return known + sorted(ids - set(known))

    def subset(self, ids: Iterable[str]) -> "PhenotypeCatalog":
        wanted = set(ids)
        return PhenotypeCatalog(p for p in self._entries if p.id in wanted)

    def to_json(self) -> str:
        return json.dumps([p.to_dict() for p in self._entries], indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PhenotypeCatalog":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"catalog is not valid JSON: {exc}") from exc
        if not isinstance(raw, list):
            raise SchemaError("catalog must be a JSON array")
        return cls(Phenotype.from_dict(d) for d in raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "PhenotypeCatalog":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_default_catalog() -> PhenotypeCatalog:
    text = resources.files("phewas_agents").joinpath("data/default_catalog.json").read_text(encoding="utf-8")
    return PhenotypeCatalog.from_json(text)


@dataclass(frozen=True)
class Factor:
    id: str
    name: str
    category: FactorCategory
    kind: FactorKind
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.kind is FactorKind.CATEGORICAL and len(self.levels) < 2:
            raise ValidationError(f"categorical factor {self.id!r} needs at least two levels")

    def to_dict(self) -> dict:
        d = {"id": self.id, "name": self.name, "category": self.category.value, "kind": self.kind.value}
        if self.kind is FactorKind.CATEGORICAL:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Factor":
        try:
            return cls(
                id=str(d["id"]),
                name=str(d.get("name", d["id"])),
                category=FactorCategory(d.get("category", "RiskFactor")),
                kind=FactorKind(d["kind"]),
                levels=tuple(d.get("levels", ())),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise SchemaError(f"bad factor entry {d!r}: {exc}") from exc


def load_factors(path) -> list[Factor]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Factor.from_dict(d) for d in raw]


def save_factors(factors: Sequence[Factor], path) -> None:
    text = json.dumps([f.to_dict() for f in factors], indent=2, ensure_ascii=False) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def default_factors() -> list[Factor]:
    text = resources.files("phewas_agents").joinpath("data/default_factors.json").read_text(encoding="utf-8")
    return [Factor.from_dict(d) for d in json.loads(text)]


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Cohort:
    """Participants x (phenotypes, factors, disease labels), with explicit masks.

    Missing cells are tracked by the boolean masks; the value arrays hold NaN
    there only so that accidental use fails loudly. Categorical factor values
    are stored as level indices. Instances are immutable.
    """

    __slots__ = (
        "participant_ids", "phenotype_ids", "pheno_values", "pheno_missing",
        "factors", "factor_values", "factor_missing", "disease_names", "disease_labels",
        "_digest",
    )

    def __init__(
        self,
        participant_ids: Sequence[str],
        phenotype_ids: Sequence[str],
        pheno_values,
        pheno_missing,
        factors: Sequence[Factor],
        factor_values,
        factor_missing,
        disease_names: Sequence[str] = DISEASES,
        disease_labels=None,
    ):
        ids = tuple(str(p) for p in participant_ids)
        n = len(ids)
        if len(set(ids)) != n:
            raise SchemaError("participant ids must be unique")
        pv = np.asarray(pheno_values, dtype=float).reshape(n, len(phenotype_ids))
        pm = np.asarray(pheno_missing, dtype=bool).reshape(n, len(phenotype_ids))
        fv = np.asarray(factor_values, dtype=float).reshape(n, len(factors))
        fm = np.asarray(factor_missing, dtype=bool).reshape(n, len(factors))
        if disease_labels is None:
            disease_labels = np.zeros((n, len(disease_names)), dtype=np.int8)
        dl = np.asarray(disease_labels).reshape(n, len(disease_names))
        if dl.size and not np.isin(dl, (0, 1)).all():
            raise SchemaError("disease labels must be 0 or 1")
        if len(set(phenotype_ids)) != len(phenotype_ids):
            raise SchemaError("duplicate phenotype column")
        if len({f.id for f in factors}) != len(factors):
            raise SchemaError("duplicate factor column")
        if np.isnan(pv[~pm]).any() or np.isnan(fv[~fm]).any():
            raise SchemaError("NaN in a cell not flagged missing")
        pv = np.where(pm, np.nan, pv)
        fv = np.where(fm, np.nan, fv)
        for j, f in enumerate(factors):
            col = fv[~fm[:, j], j]
            if f.kind is FactorKind.BINARY and not np.isin(col, (0.0, 1.0)).all():
                raise SchemaError(f"binary factor {f.id!r} holds values other than 0/1")
            if f.kind is FactorKind.CATEGORICAL and not np.isin(col, np.arange(len(f.levels))).all():
                raise SchemaError(f"categorical factor {f.id!r} holds an unknown level index")
        s = object.__setattr__
        s(self, "participant_ids", ids)
        s(self, "phenotype_ids", tuple(phenotype_ids))
        s(self, "pheno_values", _frozen(pv, float))
        s(self, "pheno_missing", _frozen(pm, bool))
        s(self, "factors", tuple(factors))
        s(self, "factor_values", _frozen(fv, float))
        s(self, "factor_missing", _frozen(fm, bool))
        s(self, "disease_names", tuple(disease_names))
        s(self, "disease_labels", _frozen(dl, np.int8))
        s(self, "_digest", None)

    def __setattr__(self, name, value):
        raise AttributeError("Cohort is immutable")

    @property
    def n(self) -> int:
        return len(self.participant_ids)

    @property
    def factor_ids(self) -> tuple[str, ...]:
        return tuple(f.id for f in self.factors)

    def factor(self, factor_id: str) -> Factor:
        for f in self.factors:
            if f.id == factor_id:
                return f
        raise SchemaError(f"unknown factor {factor_id!r}")

    def phenotype_column(self, phenotype_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            j = self.phenotype_ids.index(phenotype_id)
        except ValueError:
            raise SchemaError(f"unknown phenotype column {phenotype_id!r}") from None
        return self.pheno_values[:, j], self.pheno_missing[:, j]

    def factor_column(self, factor_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            j = self.factor_ids.index(factor_id)
        except ValueError:
            raise SchemaError(f"unknown factor column {factor_id!r}") from None
        return self.factor_values[:, j], self.factor_missing[:, j]

    def disease(self, name: str) -> np.ndarray:
        try:
            j = self.disease_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown disease {name!r}") from None
        return self.disease_labels[:, j]

    def column(self, column_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Resolve ``pheno.<id>``, ``factor.<id>``, ``disease.<name>`` or an unambiguous bare id."""
        if column_id.startswith(PHENO_PREFIX):
            return self.phenotype_column(column_id[len(PHENO_PREFIX):])
        if column_id.startswith(FACTOR_PREFIX):
            return self.factor_column(column_id[len(FACTOR_PREFIX):])
        if column_id.startswith(DISEASE_PREFIX):
            labels = self.disease(column_id[len(DISEASE_PREFIX):])
            return labels.astype(float), np.zeros(self.n, dtype=bool)
        in_p = column_id in self.phenotype_ids
        in_f = column_id in self.factor_ids
        if in_p and in_f:
            raise SchemaError(f"column id {column_id!r} is ambiguous; qualify it")
        if in_p:
            return self.phenotype_column(column_id)
        if in_f:
            return self.factor_column(column_id)
        raise SchemaError(f"unknown column {column_id!r}")

    def take(self, rows: Sequence[int]) -> "Cohort":
        """New cohort made of the given rows (in that order)."""
        rows = np.asarray(rows, dtype=int)
        return Cohort(
            [self.participant_ids[i] for i in rows],
            self.phenotype_ids,
            self.pheno_values[rows],
            self.pheno_missing[rows],
            self.factors,
            self.factor_values[rows],
            self.factor_missing[rows],
            self.disease_names,
            self.disease_labels[rows],
        )

    @property
    def digest(self) -> str:
        """Content hash; pipeline outputs refer to a cohort by this id."""
        if self._digest is None:
            h = hashlib.sha256()
            h.update(json.dumps([self.participant_ids, self.phenotype_ids,
                                 [f.to_dict() for f in self.factors],
                                 self.disease_names]).encode())
            for a in (self.pheno_missing, self.factor_missing, self.disease_labels):
                h.update(np.ascontiguousarray(a).tobytes())
            for a, m in ((self.pheno_values, self.pheno_missing), (self.factor_values, self.factor_missing)):
                h.update(np.ascontiguousarray(np.where(m, 0.0, a)).tobytes())
            object.__setattr__(self, "_digest", h.hexdigest())
        return self._digest

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.participant_ids == other.participant_ids
            and self.phenotype_ids == other.phenotype_ids
            and self.factors == other.factors
            and self.disease_names == other.disease_names
            and np.array_equal(self.pheno_missing, other.pheno_missing)
            and np.array_equal(self.factor_missing, other.factor_missing)
            and np.array_equal(self.pheno_values, other.pheno_values, equal_nan=True)
            and np.array_equal(self.factor_values, other.factor_values, equal_nan=True)
            and np.array_equal(self.disease_labels, other.disease_labels)
        )

    __hash__ = None

    def __repr__(self):
        return (f"Cohort(n={self.n}, phenotypes={len(self.phenotype_ids)}, "
                f"factors={len(self.factors)}, diseases={len(self.disease_names)})")


def complete_cases(cohort: Cohort, columns: Sequence[str]) -> list[int]:
    """Ascending row indices with no missing cell among ``columns``."""
    ok = np.ones(cohort.n, dtype=bool)
    for c in columns:
        _, missing = cohort.column(c)
        ok &= ~missing
    return np.flatnonzero(ok).tolist()


@dataclass(frozen=True)
class Association:
    phenotype_id: str
    factor_id: str
    strength: float
    p_raw: float
    p_adjusted: float
    effect_size: float
    n_complete: int
    relevance: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.strength <= 1.0:
            raise ValidationError(f"strength {self.strength} outside [-1, 1]")
        for name in ("p_raw", "p_adjusted", "relevance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} {v} outside [0, 1]")
        if self.p_adjusted < self.p_raw:
            raise ValidationError("p_adjusted must not be below p_raw")
        if self.n_complete < 3:
            raise ValidationError("an association needs at least 3 complete cases")

    @property
    def key(self) -> tuple[str, str]:
        return (self.phenotype_id, self.factor_id)

    def with_relevance(self, relevance: float) -> "Association":
        return Association(self.phenotype_id, self.factor_id, self.strength, self.p_raw,
                           self.p_adjusted, self.effect_size, self.n_complete, float(relevance))

    def to_dict(self) -> dict:
        return {
            "phenotype_id": self.phenotype_id,
            "factor_id": self.factor_id,
            "strength": self.strength,
            "p_raw": self.p_raw,
            "p_adjusted": self.p_adjusted,
            "effect_size": self.effect_size,
            "n_complete": self.n_complete,
            "relevance": self.relevance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Association":
        return cls(d["phenotype_id"], d["factor_id"], float(d["strength"]), float(d["p_raw"]),
                   float(d["p_adjusted"]), float(d["effect_size"]), int(d["n_complete"]),
                   float(d.get("relevance", 0.0)))


@dataclass(frozen=True)
class FeatureVector:
    participant_id: str
    values: tuple[float, ...]
    columns: tuple[str, ...] = field(repr=False)
