"""Specialist and coordinator agents.

A specialist owns one anatomical structure. It values the phenotypes of that
structure (``evaluate_phenotypes``), measures their associations with the
non-imaging factors (``assess_factors``) and, each discussion round, turns
those products plus the prior-round transcript and its memory into an
:class:`Opinion` (``form_opinion``). The coordinator summarises each round.

Two interchangeable backends exist. :class:`ScriptedPolicy` is deterministic
and is the correctness reference; :class:`RemoteBackend` calls an HTTP model
endpoint and falls back to its scripted policy when the call fails or the
answer does not validate.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .data_io import derive_seed, stream
from .domain import AnatomicalStructure, Association, Cohort, Factor, FunctionCategory, PhenotypeCatalog
from .errors import ConfigurationError, DegenerateInputError, PhewasError, ProtocolError, ValidationError
from .memory import EmbeddingSpec, MemoryBank, MemoryCase, embed, retrieve
from .stats import (
    DistributionSummary, ToolEvidence, association_scan, distribution_summary, evidence_for,
)
from .wire import post_json

log = logging.getLogger(__name__)

COORDINATOR = "Coordinator"
AGENT_ENDPOINT_ENV = "PHEWAS_AGENT_ENDPOINT"
AGENT_KEY_ENV = "PHEWAS_AGENT_KEY"

BOOTSTRAP_RESAMPLES = 100
MAX_MISSING_FRACTION = 0.2
MAX_SKEW_PROXY = 1.0

# fixed clinical-relevance table of the scripted backend, by function category
DEFAULT_RELEVANCE = {
    FunctionCategory.EJECTION_FRACTION: 0.9,
    FunctionCategory.VOLUME: 0.8,
    FunctionCategory.MASS: 0.8,
    FunctionCategory.STROKE_VOLUME: 0.7,
    FunctionCategory.CARDIAC_OUTPUT: 0.7,
    FunctionCategory.AREA: 0.7,
    FunctionCategory.DISTENSIBILITY: 0.75,
    FunctionCategory.WALL_THICKNESS: 0.6,
    FunctionCategory.STRAIN: 0.6,
}


@dataclass(frozen=True)
class ScriptedPolicy:
    """Deterministic opinion policy.

    ``fixed_recommendations`` / ``alternate_recommendations`` script
    scenario panels: the former replaces the evidence-driven recommendation
    set, the latter replaces it on even-numbered rounds.
    """

    alpha: float = 0.05
    rho: float = 0.3
    theta_rec: float = 0.6
    theta_conf: int = 3
    strength_scale: float = 0.3
    clinical_relevance: Mapping[str, float] = field(default_factory=dict)
    fixed_recommendations: tuple | None = None
    alternate_recommendations: tuple | None = None

    def relevance_for(self, phenotype) -> float:
        if phenotype.id in self.clinical_relevance:
            return float(self.clinical_relevance[phenotype.id])
        return DEFAULT_RELEVANCE.get(phenotype.function, 0.7)

    def association_relevance(self, strength: float, overall: float) -> float:
        return min(1.0, max(0.0, overall * min(1.0, abs(strength) / self.strength_scale)))


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    api_key: str | None = None
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5

    @classmethod
    def from_env(cls, **overrides) -> "RemoteConfig":
        endpoint = overrides.pop("endpoint", None) or os.environ.get(AGENT_ENDPOINT_ENV)
        if not endpoint:
            raise ConfigurationError(f"remote agent endpoint not configured (set {AGENT_ENDPOINT_ENV})")
        key = overrides.pop("api_key", None) or os.environ.get(AGENT_KEY_ENV)
        return cls(endpoint, key, **overrides)


@dataclass(frozen=True)
class RemoteBackend:
    config: RemoteConfig
    fallback: ScriptedPolicy = field(default_factory=ScriptedPolicy)

    def call(self, payload: dict) -> dict:
        c = self.config
        return post_json(c.endpoint, payload, timeout=c.timeout, retries=c.retries,
                         api_key=c.api_key, backoff=c.backoff)


Backend = Union[ScriptedPolicy, RemoteBackend]


@dataclass
class AgentRole:
    agent_id: str
    specialty: Union[AnatomicalStructure, str]
    backend: Backend = field(default_factory=ScriptedPolicy)
    memory: MemoryBank | None = None
    seed: int = 0
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)

    def __post_init__(self):
        if self.specialty != COORDINATOR:
            self.specialty = AnatomicalStructure(self.specialty)
        if self.memory is None:
            self.memory = MemoryBank(self.agent_id, self.embedding.dimension)

    @property
    def is_coordinator(self) -> bool:
        return self.specialty == COORDINATOR

    @property
    def specialty_name(self) -> str:
        return COORDINATOR if self.is_coordinator else self.specialty.value

    @property
    def policy(self) -> ScriptedPolicy:
        return self.backend if isinstance(self.backend, ScriptedPolicy) else self.backend.fallback

    @property
    def is_remote(self) -> bool:
        return isinstance(self.backend, RemoteBackend)


def validate_panel(panel: Sequence[AgentRole]) -> None:
    coordinators = [a for a in panel if a.is_coordinator]
    if len(coordinators) != 1:
        raise ConfigurationError(f"panel needs exactly one coordinator, found {len(coordinators)}")
    specs = [a.specialty for a in panel if not a.is_coordinator]
    if len(set(specs)) != len(specs):
        raise ConfigurationError("specialist specialties must be unique")
    ids = [a.agent_id for a in panel]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("agent ids must be unique")


# ------------------------------------------------------------------ valuation


@dataclass(frozen=True)
class ValuationEntry:
    phenotype_id: str
    significance_score: float
    clinical_relevance: float
    distribution_ok: bool
    stability: float
    overall: float

    def __post_init__(self):
        for name in ("significance_score", "clinical_relevance", "stability", "overall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PhenotypeValuation:
    agent_id: str
    entries: tuple[ValuationEntry, ...]
    evidence: tuple[ToolEvidence, ...] = ()

    @property
    def phenotype_ids(self) -> tuple[str, ...]:
        return tuple(e.phenotype_id for e in self.entries)

    def overall(self, phenotype_id: str) -> float:
        for e in self.entries:
            if e.phenotype_id == phenotype_id:
                return e.overall
        raise KeyError(phenotype_id)

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id,
                "entries": [e.to_dict() for e in self.entries],
                "evidence": [ev.to_dict() for ev in self.evidence]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhenotypeValuation":
        return cls(d["agent_id"], tuple(ValuationEntry(**e) for e in d["entries"]),
                   tuple(ToolEvidence.from_dict(ev) for ev in d.get("evidence", ())))


def _skew_proxy(summary: DistributionSummary) -> float:
    if summary.sd <= 0.0:
        raise DegenerateInputError("zero variance: skewness proxy undefined")
    return (summary.mean - summary.median) / summary.sd


def _bootstrap_means(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, values.size, size=(BOOTSTRAP_RESAMPLES, values.size))
    return values[idx].mean(axis=1)


def evaluate_phenotypes(agent: AgentRole, cohort: Cohort, catalog: PhenotypeCatalog,
                        factors: Sequence[str] | None = None) -> PhenotypeValuation:
    """Score every phenotype of the agent's structure on four criteria.

    significance  1 - smallest raw p-value against any factor
    distribution  |mean - median| / sd < 1 and at most 20% missing
    stability     1 - bootstrap sd of the mean / sd (100 seeded resamples)
    relevance     backend-provided clinical relevance
    """
    if agent.is_coordinator:
        raise ValidationError("the coordinator does not value phenotypes")
    slice_ = [p for p in catalog.for_structure(agent.specialty) if p.id in cohort.phenotype_ids]
    if not slice_:
        raise ConfigurationError(f"no catalog phenotypes for {agent.specialty.value} in the cohort")
    factor_ids = list(cohort.factor_ids if factors is None else factors)
    scan = association_scan(cohort, [p.id for p in slice_], factor_ids)
    kinds = {f.id: f.kind for f in cohort.factors}
    min_p = {}
    evidence: list[ToolEvidence] = []
    for a in scan:
        min_p[a.phenotype_id] = min(min_p.get(a.phenotype_id, 1.0), a.p_raw)
        evidence.append(evidence_for(a, kinds[a.factor_id]))

    relevances = _clinical_relevance(agent, slice_)
    entries = []
    for p in slice_:
        values, missing = cohort.phenotype_column(p.id)
        # significance defaults to 0 when no factor could be tested
        significance = min(1.0, max(0.0, 1.0 - min_p.get(p.id, 1.0)))
        dist_ok = False
        stability = 0.0
        try:
            summary = distribution_summary(values, missing)
        except PhewasError:
            summary = None
        if summary is not None:
            evidence.append(ToolEvidence("distribution_summary", (p.id,), summary, summary.n))
            missing_frac = summary.missing_count / cohort.n
            try:
                dist_ok = abs(_skew_proxy(summary)) < MAX_SKEW_PROXY and missing_frac <= MAX_MISSING_FRACTION
            except PhewasError:
                dist_ok = False
            if summary.sd > 0 and summary.n >= 2:
                rng = stream(derive_seed(agent.seed, agent.agent_id, p.id), "bootstrap")
                means = _bootstrap_means(values[~missing], rng)
                boot = distribution_summary(means)
                evidence.append(ToolEvidence("bootstrap_mean", (p.id,), boot, summary.n))
                stability = min(1.0, max(0.0, 1.0 - boot.sd / summary.sd))
        rel = relevances[p.id]
        overall = (significance + rel + float(dist_ok) + stability) / 4.0
        entries.append(ValuationEntry(p.id, significance, rel, dist_ok, stability, overall))
    return PhenotypeValuation(agent.agent_id, tuple(entries), tuple(evidence))


def _clinical_relevance(agent: AgentRole, phenotypes) -> dict[str, float]:
    scripted = {p.id: agent.policy.relevance_for(p) for p in phenotypes}
    if not agent.is_remote:
        return scripted
    payload = {"task": "score_phenotypes", "role": "specialist", "specialty": agent.specialty_name,
               "phenotypes": [{"id": p.id, "name": p.name, "function": p.function.value} for p in phenotypes]}
    try:
        body = agent.backend.call(payload)
        scores = body["scores"]
        out = {p.id: float(scores[p.id]) for p in phenotypes}
        if not all(0.0 <= v <= 1.0 for v in out.values()):
            raise ProtocolError("relevance score outside [0, 1]")
        return out
    except (PhewasError, KeyError, TypeError, ValueError) as exc:
        log.warning("agent %s: remote relevance scoring failed (%s); using scripted table", agent.agent_id, exc)
        return scripted


# ------------------------------------------------------------ factor effects


@dataclass(frozen=True)
class FactorEffectSet:
    agent_id: str
    entries: tuple[Association, ...]
    scope: tuple[str, ...]
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "scope": list(self.scope),
                "entries": [a.to_dict() for a in self.entries],
                "warnings": [list(w) for w in self.warnings]}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorEffectSet":
        return cls(d["agent_id"], tuple(Association.from_dict(a) for a in d["entries"]),
                   tuple(d["scope"]), tuple(tuple(w) for w in d.get("warnings", ())))


def assess_factors(agent: AgentRole, valuation: PhenotypeValuation, cohort: Cohort,
                   factors: Sequence[Factor | str], family_size: int | None = None) -> FactorEffectSet:
    """Associations of the agent's phenotypes with every factor, with relevance.

    ``family_size`` sets the Bonferroni family (the pipeline passes the size
    of the whole phenome-wide scan so local and global p_adjusted agree).
    """
    if valuation.agent_id != agent.agent_id:
        raise ValidationError("valuation was produced by a different agent")
    if not factors:
        raise ValidationError("no factors to assess")
    fids = [f.id if isinstance(f, Factor) else f for f in factors]
    scope = valuation.phenotype_ids
    scan = association_scan(cohort, scope, fids, family_size=family_size)
    policy = agent.policy
    rel = [policy.association_relevance(a.strength, valuation.overall(a.phenotype_id)) for a in scan]
    if agent.is_remote:
        rel = _remote_association_relevance(agent, list(scan), rel)
    entries = tuple(a.with_relevance(r) for a, r in zip(scan, rel))
    return FactorEffectSet(agent.agent_id, entries, tuple(scope), tuple(scan.warnings))


def _remote_association_relevance(agent, assocs, fallback):
    payload = {"task": "score_associations", "role": "specialist", "specialty": agent.specialty_name,
               "associations": [{"phenotype_id": a.phenotype_id, "factor_id": a.factor_id,
                                 "strength": a.strength, "p_adjusted": a.p_adjusted} for a in assocs]}
    try:
        scores = [float(s) for s in agent.backend.call(payload)["scores"]]
        if len(scores) != len(assocs) or not all(0.0 <= s <= 1.0 for s in scores):
            raise ProtocolError("association scores malformed")
        return scores
    except (PhewasError, KeyError, TypeError, ValueError) as exc:
        log.warning("agent %s: remote association scoring failed (%s); using scripted relevance",
                    agent.agent_id, exc)
        return fallback


# ------------------------------------------------------------------ opinions


@dataclass(frozen=True)
class Opinion:
    agent_id: str
    round: int
    recommended_phenotype_ids: tuple[str, ...]
    endorsed_associations: tuple[tuple[str, str, float], ...] = ()
    proposed_confounders: tuple[str, ...] = ()
    confidence: float = 0.0
    rationale: str = ""
    cited_memory_case_ids: tuple[str, ...] = ()
    fallback: bool = False
    hallucinated_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.round < 1:
            raise ValidationError("round must be >= 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        for _, _, r in self.endorsed_associations:
            if not 0.0 <= r <= 1.0:
                raise ValidationError(f"relevance {r} outside [0, 1]")
        object.__setattr__(self, "recommended_phenotype_ids", tuple(self.recommended_phenotype_ids))
        object.__setattr__(self, "endorsed_associations",
                           tuple((str(p), str(f), float(r)) for p, f, r in self.endorsed_associations))
        object.__setattr__(self, "proposed_confounders", tuple(self.proposed_confounders))
        object.__setattr__(self, "cited_memory_case_ids", tuple(self.cited_memory_case_ids))
        object.__setattr__(self, "hallucinated_ids", tuple(self.hallucinated_ids))

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "round": self.round,
            "recommended_phenotype_ids": list(self.recommended_phenotype_ids),
            "endorsed_associations": [list(e) for e in self.endorsed_associations],
            "proposed_confounders": list(self.proposed_confounders),
            "confidence": self.confidence,
            "rationale": self.rationale,
            "cited_memory_case_ids": list(self.cited_memory_case_ids),
            "fallback": self.fallback,
            "hallucinated_ids": list(self.hallucinated_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Opinion":
        return cls(
            d["agent_id"], int(d["round"]), tuple(d["recommended_phenotype_ids"]),
            tuple(tuple(e) for e in d.get("endorsed_associations", ())),
            tuple(d.get("proposed_confounders", ())), float(d.get("confidence", 0.0)),
            d.get("rationale", ""), tuple(d.get("cited_memory_case_ids", ())),
            bool(d.get("fallback", False)), tuple(d.get("hallucinated_ids", ())),
        )


def case_text(agent: AgentRole, phenotype_ids: Sequence[str]) -> str:
    return f"{agent.specialty_name} analysis of " + " ".join(phenotype_ids)


def recall_memory(agent: AgentRole, phenotype_ids: Sequence[str], k: int = 1) -> list[tuple[MemoryCase, float]]:
    if not len(agent.memory):
        return []
    query = embed(agent.embedding, case_text(agent, phenotype_ids), phenotype_ids)
    return retrieve(agent.memory, query, k)


def _specialist_opinions(record, coordinator_id):
    return [o for o in record.opinions if o.agent_id != coordinator_id]


def _check_history(history, round_):
    if round_ < 1:
        raise ValidationError("round must be >= 1")
    for rec in getattr(history, "rounds", ()):
        if rec.round >= round_:
            raise ValidationError(f"history contains round {rec.round}, not before round {round_}")


def _scripted_opinion(agent, valuation, effects, history, round_, catalog, memory_hits,
                      known_factor_ids=None) -> Opinion:
    policy = agent.policy
    if policy.fixed_recommendations is not None:
        base = list(policy.fixed_recommendations)
    else:
        base = [e.phenotype_id for e in valuation.entries if e.overall >= policy.theta_rec]
    if policy.alternate_recommendations is not None and round_ % 2 == 0:
        base = list(policy.alternate_recommendations)

    adopted = []
    rounds = list(getattr(history, "rounds", ()))
    if rounds:
        prior = _specialist_opinions(rounds[-1], getattr(history, "coordinator_id", None))
        if prior:
            counts: dict[str, int] = {}
            for o in prior:
                for pid in set(o.recommended_phenotype_ids):
                    counts[pid] = counts.get(pid, 0) + 1
            adopted = [pid for pid, c in counts.items() if 2 * c >= len(prior) and pid not in base]
    recommended = catalog.sort_ids(base + adopted)

    endorsed = [(a.phenotype_id, a.factor_id, a.relevance) for a in effects.entries
                if a.p_adjusted < policy.alpha and a.relevance > policy.rho]

    structures: dict[str, set] = {}

    def note(pid, fid):
        p = catalog.get(pid)
        if p is not None:
            structures.setdefault(fid, set()).add(p.structure)

    for a in effects.entries:
        if a.p_adjusted < policy.alpha:
            note(a.phenotype_id, a.factor_id)
    for rec in rounds:
        for o in rec.opinions:
            for pid, fid, _ in o.endorsed_associations:
                note(pid, fid)
    confounders = sorted(f for f, s in structures.items() if len(s) >= policy.theta_conf)

    own = [e.overall for e in valuation.entries if e.phenotype_id in recommended]
    confidence = float(np.mean(own)) if own else 0.0
    rationale = (f"{agent.specialty_name}: {len(base)} phenotype(s) selected, "
                 f"{len(adopted)} adopted from the prior round, {len(endorsed)} association(s) endorsed "
                 f"at p_adj < {policy.alpha} and relevance > {policy.rho}; "
                 f"confounders spanning >= {policy.theta_conf} structures: {', '.join(confounders) or 'none'}")
    return Opinion(agent.agent_id, round_, tuple(recommended), tuple(endorsed), tuple(confounders),
                   min(1.0, max(0.0, confidence)), rationale, tuple(c.case_id for c, _ in memory_hits))


def _digest_valuation(valuation):
    return [{"phenotype_id": e.phenotype_id, "overall": round(e.overall, 4),
             "significance": round(e.significance_score, 4), "distribution_ok": e.distribution_ok}
            for e in valuation.entries]


def _digest_effects(effects, limit=50):
    ranked = sorted(effects.entries, key=lambda a: (a.p_adjusted, -abs(a.strength)))[:limit]
    return [{"phenotype_id": a.phenotype_id, "factor_id": a.factor_id, "strength": round(a.strength, 4),
             "p_adjusted": a.p_adjusted, "relevance": round(a.relevance, 4)} for a in ranked]


def opinion_request(agent, valuation, effects, history, round_, catalog, memory_hits) -> dict:
    """Wire payload sent to a remote agent."""
    tail = [{"round": rec.round, "opinions": [o.to_dict() for o in rec.opinions]}
            for rec in list(getattr(history, "rounds", ()))[-2:]]
    return {
        "task": "opinion",
        "role": "coordinator" if agent.is_coordinator else "specialist",
        "specialty": agent.specialty_name,
        "round": round_,
        "valuation_digest": _digest_valuation(valuation),
        "effects_digest": _digest_effects(effects),
        "transcript_tail": tail,
        "memory": [{"case_id": c.case_id, "summary": c.summary, "similarity": s} for c, s in memory_hits],
        "catalog_ids": list(catalog.ids),
    }


def parse_remote_opinion(body: dict, agent_id: str, round_: int, catalog: PhenotypeCatalog,
                         factor_ids, cited) -> Opinion:
    """Validate a remote answer; unknown ids are stripped and reported."""
    try:
        recommended = [str(x) for x in body["recommended_phenotype_ids"]]
        endorsed_raw = body["endorsed_associations"]
        confounders = [str(x) for x in body["proposed_confounders"]]
        confidence = float(body["confidence"])
        rationale = str(body["rationale"])
        endorsed = []
        for e in endorsed_raw:
            if isinstance(e, Mapping):
                endorsed.append((str(e["phenotype_id"]), str(e["factor_id"]), float(e["relevance"])))
            else:
                p, f, r = e
                endorsed.append((str(p), str(f), float(r)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"remote opinion fails schema validation: {exc!r}") from exc
    if not 0.0 <= confidence <= 1.0 or not math.isfinite(confidence):
        raise ProtocolError(f"confidence {confidence} outside [0, 1]")
    if any(not 0.0 <= r <= 1.0 for _, _, r in endorsed):
        raise ProtocolError("endorsed relevance outside [0, 1]")
    factor_ids = set(factor_ids)
    hallucinated = [p for p in recommended if p not in catalog]
    hallucinated += [f"{p}:{f}" for p, f, _ in endorsed if p not in catalog or f not in factor_ids]
    hallucinated += [f for f in confounders if f not in factor_ids]
    return Opinion(
        agent_id, round_,
        tuple(catalog.sort_ids(p for p in recommended if p in catalog)),
        tuple((p, f, r) for p, f, r in endorsed if p in catalog and f in factor_ids),
        tuple(sorted({f for f in confounders if f in factor_ids})),
        confidence, rationale, tuple(cited), False, tuple(hallucinated),
    )


def form_opinion(agent: AgentRole, valuation: PhenotypeValuation, effects: FactorEffectSet,
                 history, round: int, *, catalog: PhenotypeCatalog,
                 factor_ids: Sequence[str] | None = None) -> Opinion:
    """One specialist's opinion for ``round`` given only rounds before it."""
    _check_history(history, round)
    if agent.is_coordinator:
        raise ValidationError("use summarize_round for the coordinator")
    hits = recall_memory(agent, valuation.phenotype_ids)
    if not agent.is_remote:
        return _scripted_opinion(agent, valuation, effects, history, round, catalog, hits)
    if factor_ids is None:
        factor_ids = sorted({a.factor_id for a in effects.entries})
    payload = opinion_request(agent, valuation, effects, history, round, catalog, hits)
    try:
        body = agent.backend.call(payload)
        op = parse_remote_opinion(body, agent.agent_id, round, catalog, factor_ids,
                                  [c.case_id for c, _ in hits])
        if op.hallucinated_ids:
            log.warning("agent %s round %d: stripped %d hallucinated id(s)", agent.agent_id, round,
                        len(op.hallucinated_ids))
        return op
    except PhewasError as exc:
        log.warning("agent %s round %d: remote opinion failed (%s); scripted fallback used",
                    agent.agent_id, round, exc)
        op = _scripted_opinion(agent, valuation, effects, history, round, catalog, hits)
        return Opinion(**{**op.__dict__, "fallback": True})


def summarize_round(coordinator: AgentRole, opinions: Sequence[Opinion], round: int,
                    catalog: PhenotypeCatalog) -> Opinion:
    """Coordinator's closing opinion for a round.

    Union of recommendations, union of endorsements (max relevance per pair),
    and confounders proposed by at least two specialists. The summary is a
    set function of the specialists' opinions, so their evaluation order
    does not matter.
    """
    recommended = catalog.sort_ids({p for o in opinions for p in o.recommended_phenotype_ids})
    best: dict[tuple[str, str], float] = {}
    for o in opinions:
        for p, f, r in o.endorsed_associations:
            best[(p, f)] = max(best.get((p, f), 0.0), r)
    endorsed = tuple((p, f, best[(p, f)]) for p, f in sorted(best))
    votes: dict[str, int] = {}
    for o in opinions:
        for f in set(o.proposed_confounders):
            votes[f] = votes.get(f, 0) + 1
    confounders = tuple(sorted(f for f, v in votes.items() if v >= 2))
    confidence = float(np.mean([o.confidence for o in opinions])) if opinions else 0.0
    hits = recall_memory(coordinator, recommended) if recommended else []
    rationale = (f"round {round}: {len(recommended)} phenotype(s) recommended across "
                 f"{len(opinions)} specialist(s); {len(endorsed)} association(s) endorsed; "
                 f"shared confounders: {', '.join(confounders) or 'none'}")
    return Opinion(coordinator.agent_id, round, tuple(recommended), endorsed, confounders,
                   min(1.0, max(0.0, confidence)), rationale, tuple(c.case_id for c, _ in hits))
