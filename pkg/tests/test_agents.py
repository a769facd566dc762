import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phewas_agents.agents import (
    AgentRole, Opinion, RemoteBackend, RemoteConfig, ScriptedPolicy, assess_factors, case_text,
    evaluate_phenotypes, form_opinion, parse_remote_opinion, summarize_round, validate_panel,
)
from phewas_agents.consensus import DiscussionTranscript, RoundRecord
from phewas_agents.data_io import generate_synthetic_cohort
from phewas_agents.domain import AnatomicalStructure, build_default_catalog
from phewas_agents.errors import ConfigurationError, ProtocolError, ValidationError
from phewas_agents.memory import MemoryBank, MemoryCase, embed, store
from phewas_agents.pipeline import PipelineConfig, build_panel, working_catalog
from phewas_agents.stats import association_scan

from conftest import ORACLE_PLANTED, oracle_spec, tiny_cohort


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(oracle_spec(seed=5, n=1500))


@pytest.fixture(scope="module")
def wcat(cohort):
    return working_catalog(build_default_catalog(), cohort)


@pytest.fixture
def panel():
    return build_panel(PipelineConfig())


def _lv(panel):
    return next(a for a in panel if a.agent_id == "lv")


def _remote(url, **kw):
    return RemoteBackend(RemoteConfig(url, retries=0, backoff=0.0, timeout=2.0, **kw))


def test_panel_shape(panel):
    assert [a.agent_id for a in panel] == ["lv", "rv", "la", "ra", "aao", "dao", "coordinator"]
    assert sum(a.is_coordinator for a in panel) == 1


def test_validate_panel_rejects_bad_rosters(panel):
    with pytest.raises(ConfigurationError):
        validate_panel(panel[:-1])
    with pytest.raises(ConfigurationError):
        validate_panel(panel + [AgentRole("lv2", AnatomicalStructure.LV)])


def test_valuation_components(panel, cohort, wcat):
    agent = _lv(panel)
    v = evaluate_phenotypes(agent, cohort, wcat)
    ids = [p.id for p in wcat.for_structure(AnatomicalStructure.LV)]
    assert list(v.phenotype_ids) == ids
    scan = association_scan(cohort, ids, cohort.factor_ids)
    for e in v.entries:
        min_p = min(a.p_raw for a in scan if a.phenotype_id == e.phenotype_id)
        assert e.significance_score == pytest.approx(1 - min_p)
        assert e.overall == pytest.approx(
            (e.significance_score + e.clinical_relevance + float(e.distribution_ok) + e.stability) / 4)
        # sd of a bootstrap mean is about sd/sqrt(n), so stability sits near 1
        assert e.stability == pytest.approx(1 - 1 / np.sqrt(cohort.n), abs=0.02)
    tools = {ev.tool_name for ev in v.evidence}
    assert {"distribution_summary", "bootstrap_mean", "pearson_corr"} <= tools


def test_valuation_is_deterministic(panel, cohort, wcat):
    agent = _lv(panel)
    assert evaluate_phenotypes(agent, cohort, wcat) == evaluate_phenotypes(agent, cohort, wcat)


def test_heavy_missingness_fails_distribution_check():
    vals = [float(i % 7) for i in range(40)]
    vals[:10] = [None] * 10
    c = tiny_cohort({"lvef": vals}, {"age": [float(i) for i in range(40)]})
    agent = AgentRole("lv", AnatomicalStructure.LV)
    v = evaluate_phenotypes(agent, c, build_default_catalog())
    assert v.entries[0].distribution_ok is False


def test_valuation_guards(panel, cohort, wcat):
    with pytest.raises(ValidationError):
        evaluate_phenotypes(panel[-1], cohort, wcat)
    c = tiny_cohort({"rvef": [1.0, 2.0, 3.0]})
    with pytest.raises(ConfigurationError):
        evaluate_phenotypes(AgentRole("lv", AnatomicalStructure.LV), c, build_default_catalog())


def test_assess_factors_relevance_rule(panel, cohort, wcat):
    agent = _lv(panel)
    v = evaluate_phenotypes(agent, cohort, wcat)
    fx = assess_factors(agent, v, cohort, cohort.factor_ids, family_size=200)
    assert len(fx.entries) == len(v.entries) * len(cohort.factor_ids)
    for a in fx.entries:
        expected = min(1.0, v.overall(a.phenotype_id) * min(1.0, abs(a.strength) / 0.3))
        assert a.relevance == pytest.approx(expected)
        assert a.p_adjusted == pytest.approx(min(1.0, 200 * a.p_raw))
    other = evaluate_phenotypes(panel[1], cohort, wcat)
    with pytest.raises(ValidationError):
        assess_factors(agent, other, cohort, cohort.factor_ids)
    with pytest.raises(ValidationError):
        assess_factors(agent, v, cohort, [])


def _products(agent, cohort, wcat):
    v = evaluate_phenotypes(agent, cohort, wcat)
    return v, assess_factors(agent, v, cohort, cohort.factor_ids, family_size=200)


def test_scripted_opinion_rules(panel, cohort, wcat):
    agent = _lv(panel)
    v, fx = _products(agent, cohort, wcat)
    op = form_opinion(agent, v, fx, DiscussionTranscript([]), 1, catalog=wcat)
    assert set(op.recommended_phenotype_ids) == {e.phenotype_id for e in v.entries if e.overall >= 0.6}
    expected = {(a.phenotype_id, a.factor_id) for a in fx.entries if a.p_adjusted < 0.05 and a.relevance > 0.3}
    assert {(p, f) for p, f, _ in op.endorsed_associations} == expected
    assert ("lvef", "systolic_bp") in expected
    assert not op.fallback and op.hallucinated_ids == ()


def test_confounders_need_three_structures(panel, cohort, wcat):
    # age touches LV, RV, LA and AAo; sex touches LV, RV and RA
    transcript = DiscussionTranscript([(a.agent_id, a.specialty_name) for a in panel])
    ops = []
    for agent in panel[:-1]:
        v, fx = _products(agent, cohort, wcat)
        ops.append(form_opinion(agent, v, fx, transcript, 1, catalog=wcat))
    ops.append(summarize_round(panel[-1], ops, 1, wcat))
    transcript.append(RoundRecord(1, tuple(ops)))
    agent = _lv(panel)
    v, fx = _products(agent, cohort, wcat)
    op = form_opinion(agent, v, fx, transcript, 2, catalog=wcat)
    assert {"age", "sex"} <= set(op.proposed_confounders)
    planted_factors = {f for _, f, _ in ORACLE_PLANTED}
    assert not planted_factors & set(op.proposed_confounders)


def test_history_must_precede_round(panel, cohort, wcat):
    agent = _lv(panel)
    v, fx = _products(agent, cohort, wcat)
    t = DiscussionTranscript([(a.agent_id, a.specialty_name) for a in panel])
    t.append(RoundRecord(1, tuple(Opinion(a.agent_id, 1, ()) for a in panel)))
    with pytest.raises(ValidationError):
        form_opinion(agent, v, fx, t, 1, catalog=wcat)
    with pytest.raises(ValidationError):
        form_opinion(agent, v, fx, DiscussionTranscript([]), 0, catalog=wcat)


def test_compromise_adopts_majority_phenotypes(panel, cohort, wcat):
    agent = AgentRole("lv", AnatomicalStructure.LV, ScriptedPolicy(fixed_recommendations=("lvm",)))
    v, fx = _products(agent, cohort, wcat)
    t = DiscussionTranscript([(a.agent_id, a.specialty_name) for a in panel])
    ops = [Opinion(a.agent_id, 1, ("rvedv",) if i < 3 else ("lav_max",)) for i, a in enumerate(panel[:-1])]
    t.append(RoundRecord(1, tuple(ops) + (Opinion("coordinator", 1, ("rvedv", "lav_max")),)))
    op = form_opinion(agent, v, fx, t, 2, catalog=wcat)
    # rvedv had 3 of 6 specialists, lav_max also 3 of 6: both adopted; the coordinator does not vote
    assert set(op.recommended_phenotype_ids) == {"lvm", "rvedv", "lav_max"}
    t2 = DiscussionTranscript([(a.agent_id, a.specialty_name) for a in panel])
    ops = [Opinion(a.agent_id, 1, ("rvedv",) if i < 2 else ()) for i, a in enumerate(panel[:-1])]
    t2.append(RoundRecord(1, tuple(ops) + (Opinion("coordinator", 1, ("rvedv",)),)))
    assert form_opinion(agent, v, fx, t2, 2, catalog=wcat).recommended_phenotype_ids == ("lvm",)


def test_memory_is_cited(cohort, wcat):
    agent = AgentRole("lv", AnatomicalStructure.LV)
    ids = [p.id for p in wcat.for_structure(AnatomicalStructure.LV)]
    text = case_text(agent, ids)
    store(agent.memory, MemoryCase("lv-old", tuple(embed(agent.embedding, text, ids)), text, tuple(ids)))
    v, fx = _products(agent, cohort, wcat)
    op = form_opinion(agent, v, fx, DiscussionTranscript([]), 1, catalog=wcat)
    assert op.cited_memory_case_ids == ("lv-old",)


def test_opinion_validation_and_roundtrip():
    op = Opinion("lv", 2, ("lvef",), (("lvef", "age", 0.5),), ("age",), 0.7, "why", ("c1",))
    assert Opinion.from_dict(op.to_dict()) == op
    with pytest.raises(ValidationError):
        Opinion("lv", 0, ())
    with pytest.raises(ValidationError):
        Opinion("lv", 1, (), confidence=1.2)
    with pytest.raises(ValidationError):
        Opinion("lv", 1, (), (("lvef", "age", 1.5),))


def _ops(seed):
    rng = np.random.default_rng(seed)
    ids = ["lvef", "lvm", "rvedv", "lav_max", "raef"]
    facs = ["age", "sex", "weight"]
    out = []
    for i in range(6):
        rec = tuple(i2 for i2 in ids if rng.random() < 0.5)
        end = tuple((p, f, float(rng.random())) for p in ids for f in facs if rng.random() < 0.2)
        conf = tuple(f for f in facs if rng.random() < 0.4)
        out.append(Opinion(f"a{i}", 1, rec, end, conf, float(rng.random())))
    return out


@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_summary_is_order_independent(seed, shuffler):
    coordinator = AgentRole("coordinator", "Coordinator")
    cat = build_default_catalog()
    ops = _ops(seed)
    shuffled = list(ops)
    shuffler.shuffle(shuffled)
    a = summarize_round(coordinator, ops, 1, cat)
    b = summarize_round(coordinator, shuffled, 1, cat)
    assert a.recommended_phenotype_ids == b.recommended_phenotype_ids
    assert a.endorsed_associations == b.endorsed_associations
    assert a.proposed_confounders == b.proposed_confounders
    assert a.confidence == pytest.approx(b.confidence)


def test_summary_rules():
    coordinator = AgentRole("coordinator", "Coordinator")
    ops = [Opinion("a", 1, ("lvef",), (("lvef", "age", 0.4),), ("age", "sex")),
           Opinion("b", 1, ("rvef",), (("lvef", "age", 0.9),), ("age",))]
    s = summarize_round(coordinator, ops, 1, build_default_catalog())
    assert s.recommended_phenotype_ids == ("lvef", "rvef")
    assert s.endorsed_associations == (("lvef", "age", 0.9),)
    assert s.proposed_confounders == ("age",)


# ------------------------------------------------------------------ remote


def _good_answer(payload):
    return 200, {"recommended_phenotype_ids": ["lvef", "made_up_pheno"],
                 "endorsed_associations": [{"phenotype_id": "lvef", "factor_id": "systolic_bp", "relevance": 0.8},
                                           ["lvef", "moon_phase", 0.9]],
                 "proposed_confounders": ["age", "zodiac"], "confidence": 0.8, "rationale": "ok"}


def test_remote_opinion_strips_hallucinations(endpoint, cohort, wcat):
    ep = endpoint(lambda p: (200, {"scores": {}}) if p["task"] != "opinion" else _good_answer(p))
    agent = AgentRole("lv", AnatomicalStructure.LV, _remote(ep.url))
    v, fx = _products(agent, cohort, wcat)
    op = form_opinion(agent, v, fx, DiscussionTranscript([]), 1, catalog=wcat, factor_ids=cohort.factor_ids)
    assert op.recommended_phenotype_ids == ("lvef",)
    assert op.endorsed_associations == (("lvef", "systolic_bp", 0.8),)
    assert op.proposed_confounders == ("age",)
    assert set(op.hallucinated_ids) == {"made_up_pheno", "lvef:moon_phase", "zodiac"}
    assert not op.fallback
    payload = ep.requests[-1][1]
    assert payload["task"] == "opinion" and payload["role"] == "specialist" and payload["round"] == 1


@pytest.mark.parametrize("status, body", [
    (200, {"recommended_phenotype_ids": ["lvef"]}),           # missing fields
    (200, b"<html>"),                                          # not JSON
    (500, {}),                                                 # server error
    (200, {**_good_answer(None)[1], "confidence": 7}),         # out of range
])
def test_remote_failure_uses_scripted_fallback(endpoint, cohort, wcat, status, body):
    ep = endpoint(lambda p: (status, body))
    agent = AgentRole("lv", AnatomicalStructure.LV, _remote(ep.url))
    scripted = AgentRole("lv", AnatomicalStructure.LV)
    v, fx = _products(scripted, cohort, wcat)
    op = form_opinion(agent, v, fx, DiscussionTranscript([]), 1, catalog=wcat)
    ref = form_opinion(scripted, v, fx, DiscussionTranscript([]), 1, catalog=wcat)
    assert op.fallback
    assert op.recommended_phenotype_ids == ref.recommended_phenotype_ids
    assert op.endorsed_associations == ref.endorsed_associations


def test_remote_relevance_scores_used(endpoint, cohort, wcat):
    ids = [p.id for p in wcat.for_structure(AnatomicalStructure.LV)]

    def respond(p):
        if p["task"] == "score_phenotypes":
            return 200, {"scores": {i: 0.5 for i in ids}}
        return 500, {}

    ep = endpoint(respond)
    agent = AgentRole("lv", AnatomicalStructure.LV, _remote(ep.url))
    v = evaluate_phenotypes(agent, cohort, wcat)
    assert all(e.clinical_relevance == 0.5 for e in v.entries)
    # association scoring failed -> scripted relevance rule
    fx = assess_factors(agent, v, cohort, cohort.factor_ids)
    a = fx.entries[0]
    assert a.relevance == pytest.approx(min(1.0, v.overall(a.phenotype_id) * min(1.0, abs(a.strength) / 0.3)))


def test_parse_remote_rejects_bad_relevance(catalog):
    body = {**_good_answer(None)[1], "endorsed_associations": [["lvef", "age", 2.0]]}
    with pytest.raises(ProtocolError):
        parse_remote_opinion(body, "lv", 1, catalog, ["age"], [])


def test_remote_config_from_env(monkeypatch):
    monkeypatch.delenv("PHEWAS_AGENT_ENDPOINT", raising=False)
    with pytest.raises(ConfigurationError):
        RemoteConfig.from_env()
    monkeypatch.setenv("PHEWAS_AGENT_ENDPOINT", "http://x/")
    monkeypatch.setenv("PHEWAS_AGENT_KEY", "k")
    c = RemoteConfig.from_env(timeout=3.0)
    assert (c.endpoint, c.api_key, c.timeout) == ("http://x/", "k", 3.0)


def test_empty_bank_not_required(cohort, wcat):
    agent = AgentRole("lv", AnatomicalStructure.LV, memory=MemoryBank("lv", 4096))
    v, fx = _products(agent, cohort, wcat)
    assert form_opinion(agent, v, fx, DiscussionTranscript([]), 1, catalog=wcat).cited_memory_case_ids == ()
