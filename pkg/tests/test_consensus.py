import json

import pytest
from hypothesis import given, strategies as st

from phewas_agents.agents import AgentRole, FactorEffectSet, Opinion, ScriptedPolicy
from phewas_agents.consensus import (
    ConsensusConfig, DiscussionTranscript, RoundRecord, aggregate_f_ap, check_convergence, jaccard,
    load_transcript, merge_global_effects, replay, run_consensus, save_transcript,
)
from phewas_agents.data_io import generate_synthetic_cohort
from phewas_agents.domain import AnatomicalStructure, Association, build_default_catalog
from phewas_agents.errors import SchemaError, ValidationError
from phewas_agents.pipeline import working_catalog

from conftest import ORACLE_PLANTED, oracle_spec

SPECIALISTS = [(s.value.lower(), s) for s in AnatomicalStructure]


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(oracle_spec(seed=9, n=1500))


@pytest.fixture(scope="module")
def wcat(cohort):
    return working_catalog(build_default_catalog(), cohort)


def make_panel(policies=None):
    policies = policies or {}
    panel = [AgentRole(aid, s, policies.get(aid, ScriptedPolicy())) for aid, s in SPECIALISTS]
    return panel + [AgentRole("coordinator", "Coordinator")]


def _assoc(p, f, p_adj, rel=0.0, strength=0.4, n=100):
    return Association(p, f, strength, p_raw=p_adj, p_adjusted=p_adj, effect_size=strength, n_complete=n,
                       relevance=rel)


def _transcript(final_ops, coordinator_op=None):
    ids = [o.agent_id for o in final_ops]
    t = DiscussionTranscript([(a, "LV") for a in ids] + [("coordinator", "Coordinator")])
    coordinator_op = coordinator_op or Opinion("coordinator", 1, ())
    t.append(RoundRecord(1, tuple(final_ops) + (coordinator_op,)))
    return t


# ----------------------------------------------------------------- helpers


def test_jaccard():
    assert jaccard(set(), set()) == 1.0
    assert jaccard({"a"}, set()) == 0.0
    assert jaccard({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)


@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
def test_jaccard_properties(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == jaccard(b, a)
    assert (j == 1.0) == (a == b)


def test_check_convergence():
    r1 = RoundRecord(1, (Opinion("a", 1, ("x", "y")), Opinion("b", 1, ("z",))))
    same = RoundRecord(2, (Opinion("a", 2, ("y", "x")), Opinion("b", 2, ("z",))))
    moved = RoundRecord(2, (Opinion("a", 2, ("x",)), Opinion("b", 2, ("z", "y"))))
    assert check_convergence(same, r1)
    # union unchanged but per-agent sets moved
    assert not check_convergence(moved, r1)
    assert check_convergence(moved, r1, jaccard_threshold=0.5)
    with pytest.raises(ValidationError):
        check_convergence(same, r1, jaccard_threshold=0.0)


def test_transcript_append_checks_order():
    t = DiscussionTranscript([("a", "LV"), ("coordinator", "Coordinator")])
    with pytest.raises(ValidationError):
        t.append(RoundRecord(2, (Opinion("a", 2, ()), Opinion("coordinator", 2, ()))))
    with pytest.raises(ValidationError):
        t.append(RoundRecord(1, (Opinion("coordinator", 1, ()), Opinion("a", 1, ()))))
    t.append(RoundRecord(1, (Opinion("a", 1, ()), Opinion("coordinator", 1, ()))))
    assert DiscussionTranscript.from_dict(t.to_dict()) == t
    assert t.specialist_ids == ("a",)


def test_config_validation():
    with pytest.raises(ValidationError):
        ConsensusConfig(max_rounds=0)
    with pytest.raises(ValidationError):
        ConsensusConfig(alpha=1.0)


# -------------------------------------------------------------- aggregation


def test_thresholds_are_strict():
    ops = [Opinion("a", 1, (), (("lvef", "age", 0.9), ("lvm", "age", 0.3), ("rvef", "age", 0.31),
                                ("laef", "age", 0.9)))]
    evidence = [_assoc("lvef", "age", 0.049), _assoc("lvm", "age", 0.001), _assoc("rvef", "age", 0.001),
                _assoc("laef", "age", 0.05)]
    r = aggregate_f_ap(_transcript(ops), {}, evidence, alpha=0.05, rho=0.3)
    # p exactly alpha and relevance exactly rho both fall out
    assert {a.key for a in r.associations} == {("lvef", "age"), ("rvef", "age")}


def test_weight_formula_and_order():
    ops = [Opinion("a", 1, (), (("lvef", "age", 0.5), ("lvm", "sex", 0.8))),
           Opinion("b", 1, (), (("lvef", "age", 0.9),))]
    evidence = [_assoc("lvef", "age", 0.01), _assoc("lvm", "sex", 0.02)]
    memory = {"a": [{"case_id": "a-old", "recommended_phenotype_ids": ["lvm"]}]}
    r = aggregate_f_ap(_transcript(ops), memory, evidence)
    weights = {a.key: (w, a.relevance) for a, w in zip(r.associations, r.weights)}
    # relevance is the max over endorsers; remembered phenotypes get the 10% bonus
    assert weights[("lvef", "age")] == (pytest.approx(0.99 * 0.9), 0.9)
    assert weights[("lvm", "sex")] == (pytest.approx(0.98 * 0.8 * 1.1), 0.8)
    assert list(r.weights) == sorted(r.weights, reverse=True)


def test_phenotypes_and_confounders_rules():
    ops = [Opinion("a", 1, ("lvef", "rvef"), (), ("age", "sex")),
           Opinion("b", 1, ("lvef",), (), ("age",)),
           Opinion("c", 1, ("lvef", "rvef"), (), ())]
    r = aggregate_f_ap(_transcript(ops), {}, [])
    # lvef 3/3, rvef 2/3: both strict majorities; sex has only one proposer
    assert r.final_phenotype_ids == ("lvef", "rvef")
    assert r.final_confounder_ids == ("age",)
    ops = [Opinion("a", 1, ("lvef",)), Opinion("b", 1, ("rvef",))]
    assert aggregate_f_ap(_transcript(ops), {}, []).final_phenotype_ids == ()


def test_unscored_endorsements_dropped():
    ops = [Opinion("a", 1, (), (("lvef", "age", 0.9),))]
    assert aggregate_f_ap(_transcript(ops), {}, []).associations == ()
    with pytest.raises(ValidationError):
        aggregate_f_ap(DiscussionTranscript([]), {}, [])


def test_merge_global_effects():
    a1 = _assoc("lvef", "age", 0.01, rel=0.2, n=90)
    a2 = _assoc("lvef", "age", 0.02, rel=0.6, n=100)
    b = _assoc("rvef", "age", 0.001, rel=0.5)
    merged = merge_global_effects([FactorEffectSet("x", (a1, b), ("lvef", "rvef")),
                                   FactorEffectSet("y", (a2,), ("lvef",))])
    assert [a.key for a in merged] == [("rvef", "age"), ("lvef", "age")]
    assert merged[1].n_complete == 100 and merged[1].relevance == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        merge_global_effects([])


# ---------------------------------------------------------------- dynamics


def test_agreement_converges_at_round_two(cohort, wcat):
    shared = ScriptedPolicy(fixed_recommendations=("lvef", "rvedv"))
    panel = make_panel({aid: shared for aid, _ in SPECIALISTS})
    run = run_consensus(panel, cohort, wcat, cohort.factor_ids)
    assert run.result.converged and run.result.rounds_used == 2
    assert {"lvef", "rvedv"} <= set(run.result.final_phenotype_ids)


def test_oscillation_hits_round_cap(cohort, wcat):
    policies = {aid: ScriptedPolicy(fixed_recommendations=(p,))
                for (aid, _), p in zip(SPECIALISTS, ["lvedv", "rvsv", "lav_min", "rasv", "aao_max_area",
                                                     "dao_min_area"])}
    policies["lv"] = ScriptedPolicy(fixed_recommendations=("lvedv",), alternate_recommendations=("lvm",))
    run = run_consensus(make_panel(policies), cohort, wcat, cohort.factor_ids)
    assert run.result.rounds_used == 10
    assert run.result.converged is False
    assert all(not r.converged for r in run.result.transcript.rounds)
    capped = run_consensus(make_panel(policies), cohort, wcat, cohort.factor_ids, ConsensusConfig(max_rounds=3))
    assert capped.result.rounds_used == 3


def test_evidence_driven_run_recovers_planted(cohort, wcat):
    run = run_consensus(make_panel(), cohort, wcat, cohort.factor_ids)
    keys = {a.key for a in run.result.associations}
    assert {(p, f) for p, f, _ in ORACLE_PLANTED} <= keys
    assert set(run.result.final_confounder_ids) == {"age", "sex"}
    for a in run.result.associations:
        assert a.p_adjusted < 0.05 and a.relevance > 0.3
    assert run.result.converged


def test_parallel_opinions_match_sequential(cohort, wcat):
    seq = run_consensus(make_panel(), cohort, wcat, cohort.factor_ids)
    par = run_consensus(make_panel(), cohort, wcat, cohort.factor_ids, ConsensusConfig(jobs=4))
    assert seq.result.core_dict() == par.result.core_dict()
    assert seq.result.transcript == par.result.transcript


def test_transcript_roundtrip_and_replay(cohort, wcat, tmp_path):
    config = ConsensusConfig()
    run = run_consensus(make_panel(), cohort, wcat, cohort.factor_ids, config)
    path = tmp_path / "transcript.json"
    save_transcript(path, run, config)
    transcript, evidence, _, loaded_config, stored = load_transcript(path)
    assert transcript == run.result.transcript
    assert loaded_config == config
    assert evidence == run.evidence
    assert replay(path).core_dict() == run.result.core_dict() == stored
    # specialists never saw their own round
    for rec in transcript.rounds:
        assert all(o.round == rec.round for o in rec.opinions)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"agents": []}))
    with pytest.raises(SchemaError):
        load_transcript(p)


def test_precomputed_products_required_without_cohort(wcat):
    with pytest.raises(ValidationError):
        run_consensus(make_panel(), None, wcat, ["age"])
