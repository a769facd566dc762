import json

import numpy as np
import pytest

from phewas_agents.domain import (
    DISEASES, AnatomicalStructure, Association, Cohort, Factor, FactorCategory, FactorKind,
    FunctionCategory, Phenotype, PhenotypeCatalog, build_default_catalog, complete_cases, default_factors,
)
from phewas_agents.errors import SchemaError, ValidationError

from conftest import tiny_cohort


def test_default_catalog_shape(catalog):
    assert len(catalog) == 26
    assert len(set(catalog.ids)) == 26
    assert catalog.structures == frozenset(AnatomicalStructure)
    assert len(catalog.grid) == 20
    per = {s: len(catalog.for_structure(s)) for s in AnatomicalStructure}
    assert per == {AnatomicalStructure.LV: 8, AnatomicalStructure.RV: 4, AnatomicalStructure.LA: 4,
                   AnatomicalStructure.RA: 4, AnatomicalStructure.AAo: 3, AnatomicalStructure.DAo: 3}


def test_regional_measures_flagged(catalog):
    flagged = {p.id for p in catalog if p.assumed_structure}
    assert flagged == {"wt_aha_2", "ell_4"}


def test_catalog_json_roundtrip(catalog, tmp_path):
    path = tmp_path / "cat.json"
    catalog.save(path)
    assert PhenotypeCatalog.load(path) == catalog


def test_catalog_rejects_duplicates():
    p = Phenotype("x", "X", AnatomicalStructure.LV, FunctionCategory.MASS, "g")
    with pytest.raises(SchemaError):
        PhenotypeCatalog([p, p])


def test_catalog_rejects_unknown_structure():
    bad = json.dumps([{"id": "x", "name": "X", "structure": "Pulmonary", "function": "Mass", "units": "g"}])
    with pytest.raises(SchemaError):
        PhenotypeCatalog.from_json(bad)


def test_sort_ids_catalog_order_then_unknown(catalog):
    assert catalog.sort_ids(["rvef", "zzz", "lvedv", "aaa"]) == ["lvedv", "rvef", "aaa", "zzz"]


def test_default_factors():
    fs = default_factors()
    assert len(fs) == 10
    kinds = {f.id: f.kind for f in fs}
    assert kinds["sex"] is FactorKind.BINARY
    assert kinds["smoking"] is FactorKind.CATEGORICAL


def test_categorical_factor_needs_levels():
    with pytest.raises(ValidationError):
        Factor("x", "x", FactorCategory.LIFESTYLE, FactorKind.CATEGORICAL, ("only",))


def test_diseases_in_table_order():
    assert len(DISEASES) == 9
    assert DISEASES[0] == "Hypertension" and DISEASES[-1] == "Depression"


def test_cohort_masks_and_immutability():
    c = tiny_cohort({"a": [1.0, None, 3.0]}, {"f": [1.0, 2.0, None]})
    v, m = c.phenotype_column("a")
    assert m.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        v[0] = 5.0
    with pytest.raises(AttributeError):
        c.n = 4
    assert complete_cases(c, ["pheno.a", "factor.f"]) == [0]


def test_cohort_validation():
    f = Factor("s", "s", FactorCategory.DEMOGRAPHICS, FactorKind.BINARY)
    with pytest.raises(SchemaError):
        Cohort(["a", "a"], [], np.zeros((2, 0)), np.zeros((2, 0)), [], np.zeros((2, 0)), np.zeros((2, 0)))
    with pytest.raises(SchemaError):
        Cohort(["a", "b"], [], np.zeros((2, 0)), np.zeros((2, 0)), [f], [[0.0], [2.0]], [[False], [False]])
    with pytest.raises(SchemaError):
        Cohort(["a"], [], np.zeros((1, 0)), np.zeros((1, 0)), [], np.zeros((1, 0)), np.zeros((1, 0)),
               disease_labels=[[2] * 9])


def test_column_resolution():
    c = tiny_cohort({"a": [1.0, 2.0]}, {"a": [3.0, 4.0], "b": [5.0, 6.0]})
    with pytest.raises(SchemaError):
        c.column("a")
    assert c.column("factor.a")[0].tolist() == [3.0, 4.0]
    assert c.column("b")[0].tolist() == [5.0, 6.0]
    assert c.column("disease.Stroke")[0].tolist() == [0.0, 0.0]


def test_take_and_digest():
    c = tiny_cohort({"a": [1.0, 2.0, 3.0]})
    assert c.take([2, 1, 0]).take([2, 1, 0]) == c
    assert c.take([0, 1, 2]).digest == c.digest
    assert c.take([1, 0, 2]).digest != c.digest


def test_association_invariants():
    a = Association("p", "f", 0.3, 0.01, 0.02, 0.3, 100)
    assert a.key == ("p", "f")
    assert Association.from_dict(a.to_dict()) == a
    with pytest.raises(ValidationError):
        Association("p", "f", 1.2, 0.01, 0.02, 0.3, 100)
    with pytest.raises(ValidationError):
        Association("p", "f", 0.3, 0.02, 0.01, 0.3, 100)
    with pytest.raises(ValidationError):
        Association("p", "f", 0.3, 0.01, 0.02, 0.3, 2)
    with pytest.raises(ValidationError):
        a.with_relevance(1.5)


def test_default_catalog_loads_fresh():
    assert build_default_catalog() == build_default_catalog()
