"""Round-based discussion, convergence detection and final aggregation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .agents import (
    AgentRole, FactorEffectSet, Opinion, PhenotypeValuation, assess_factors, evaluate_phenotypes,
    form_opinion, summarize_round, validate_panel,
)
from .domain import Association, Cohort, PhenotypeCatalog
from .errors import SchemaError, ValidationError

log = logging.getLogger(__name__)

MEMORY_BONUS = 0.1


@dataclass(frozen=True)
class ConsensusConfig:
    max_rounds: int = 10
    alpha: float = 0.05
    rho: float = 0.3
    jaccard_threshold: float = 1.0
    jobs: int = 1

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValidationError("max_rounds must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError("rho must lie in [0, 1)")
        if not 0.0 < self.jaccard_threshold <= 1.0:
            raise ValidationError("jaccard threshold must lie in (0, 1]")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    opinions: tuple[Opinion, ...]
    converged: bool = False

    @property
    def failures(self) -> tuple[str, ...]:
        """Agents whose opinion is a scripted fallback."""
        return tuple(o.agent_id for o in self.opinions if o.fallback)

    def opinion(self, agent_id: str) -> Opinion:
        for o in self.opinions:
            if o.agent_id == agent_id:
                return o
        raise KeyError(agent_id)

    def to_dict(self) -> dict:
        return {"round": self.round, "converged": self.converged, "failures": list(self.failures),
                "opinions": [o.to_dict() for o in self.opinions]}

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(int(d["round"]), tuple(Opinion.from_dict(o) for o in d["opinions"]),
                   bool(d.get("converged", False)))


class DiscussionTranscript:
    """Ordered rounds of opinions from a fixed panel (coordinator last)."""

    def __init__(self, agents: Sequence[tuple[str, str]], rounds: Sequence[RoundRecord] = ()):
        self.agents = tuple((str(a), str(s)) for a, s in agents)
        coords = [a for a, s in self.agents if s == "Coordinator"]
        self.coordinator_id = coords[0] if coords else None
        self.rounds: list[RoundRecord] = []
        for r in rounds:
            self.append(r)

    @property
    def agent_ids(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.agents)

    @property
    def specialist_ids(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.agents if a != self.coordinator_id)

    def append(self, record: RoundRecord) -> None:
        expected = len(self.rounds) + 1
        if record.round != expected:
            raise ValidationError(f"expected round {expected}, got {record.round}")
        if tuple(o.agent_id for o in record.opinions) != self.agent_ids:
            raise ValidationError("round must hold exactly one opinion per panel agent, in panel order")
        self.rounds.append(record)

    def mark_converged(self) -> None:
        last = self.rounds[-1]
        self.rounds[-1] = RoundRecord(last.round, last.opinions, True)

    def __len__(self):
        return len(self.rounds)

    def to_dict(self) -> dict:
        return {"agents": [{"agent_id": a, "specialty": s} for a, s in self.agents],
                "rounds": [r.to_dict() for r in self.rounds]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscussionTranscript":
        return cls([(a["agent_id"], a["specialty"]) for a in d["agents"]],
                   [RoundRecord.from_dict(r) for r in d["rounds"]])

    def __eq__(self, other):
        return isinstance(other, DiscussionTranscript) and self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class ConsensusResult:
    final_phenotype_ids: tuple[str, ...]
    final_confounder_ids: tuple[str, ...]
    associations: tuple[Association, ...]
    weights: tuple[float, ...]
    rounds_used: int
    converged: bool
    transcript: DiscussionTranscript = field(compare=False, repr=False)
    hallucination_event_count: int = 0

    def core_dict(self) -> dict:
        return {
            "final_phenotype_ids": list(self.final_phenotype_ids),
            "final_confounder_ids": list(self.final_confounder_ids),
            "associations": [dict(a.to_dict(), weight=w) for a, w in zip(self.associations, self.weights)],
            "rounds_used": self.rounds_used,
            "converged": self.converged,
            "hallucination_event_count": self.hallucination_event_count,
        }


@dataclass
class ConsensusState:
    """Everything a round needs: the transcript plus frozen stage products."""

    transcript: DiscussionTranscript
    catalog: PhenotypeCatalog
    factor_ids: tuple[str, ...]
    valuations: Mapping[str, PhenotypeValuation]
    effects: Mapping[str, FactorEffectSet]
    jobs: int = 1


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def run_round(panel: Sequence[AgentRole], state: ConsensusState, round: int) -> ConsensusState:
    """Collect one opinion per agent for ``round`` and append it to the transcript.

    Specialists only see rounds before ``round``, so they may run
    concurrently; the coordinator then summarises their opinions.
    """
    if round != len(state.transcript) + 1:
        raise ValidationError(f"round {round} does not follow round {len(state.transcript)}")
    specialists = [a for a in panel if not a.is_coordinator]
    coordinator = next(a for a in panel if a.is_coordinator)

    def speak(agent):
        return form_opinion(agent, state.valuations[agent.agent_id], state.effects[agent.agent_id],
                            state.transcript, round, catalog=state.catalog, factor_ids=state.factor_ids)

    if state.jobs > 1 and len(specialists) > 1:
        with ThreadPoolExecutor(max_workers=state.jobs) as pool:
            spoken = list(pool.map(speak, specialists))
    else:
        spoken = [speak(a) for a in specialists]
    by_id = {o.agent_id: o for o in spoken}
    by_id[coordinator.agent_id] = summarize_round(coordinator, spoken, round, state.catalog)
    record = RoundRecord(round, tuple(by_id[a.agent_id] for a in panel))
    for agent_id in record.failures:
        log.warning("round %d: agent %s used its scripted fallback", round, agent_id)
    state.transcript.append(record)
    return state


def check_convergence(current: RoundRecord, previous: RoundRecord, jaccard_threshold: float = 1.0) -> bool:
    """Every agent's recommendation set is stable (Jaccard >= threshold) and the union is unchanged."""
    if not 0.0 < jaccard_threshold <= 1.0:
        raise ValidationError("jaccard threshold must lie in (0, 1]")
    prev = {o.agent_id: set(o.recommended_phenotype_ids) for o in previous.opinions}
    cur = {o.agent_id: set(o.recommended_phenotype_ids) for o in current.opinions}
    if prev.keys() != cur.keys():
        return False
    if any(jaccard(cur[a], prev[a]) < jaccard_threshold for a in cur):
        return False
    return set().union(*cur.values()) == set().union(*prev.values())


def merge_global_effects(local_effects: Sequence[FactorEffectSet]) -> list[Association]:
    """Union of local associations keyed by (phenotype, factor).

    A key reported by several agents keeps the entry with the most complete
    cases and the mean of the relevances.
    """
    if not local_effects:
        raise ValidationError("no local effect sets to merge")
    groups: dict[tuple[str, str], list[Association]] = {}
    for es in local_effects:
        for a in es.entries:
            groups.setdefault(a.key, []).append(a)
    merged = []
    for entries in groups.values():
        best = max(entries, key=lambda a: a.n_complete)
        merged.append(best.with_relevance(sum(a.relevance for a in entries) / len(entries)))
    merged.sort(key=lambda a: (a.p_adjusted, -abs(a.strength), a.phenotype_id, a.factor_id))
    return merged


def aggregate_f_ap(transcript: DiscussionTranscript, memory_retrievals: Mapping[str, Sequence],
                   tool_evidence: Sequence[Association], alpha: float = 0.05, rho: float = 0.3
                   ) -> ConsensusResult:
    """Final filter over the last round.

    Candidates are the endorsed associations of the last round (relevance =
    max over endorsers), joined with the global evidence for their p-values.
    Kept iff p_adjusted < alpha and relevance > rho. ``memory_retrievals``
    maps agent id to retrieved cases (dicts with ``recommended_phenotype_ids``);
    a retained association whose phenotype appears there gets a weight bonus.
    """
    if not transcript.rounds:
        raise ValidationError("empty transcript")
    final = transcript.rounds[-1]
    relevance: dict[tuple[str, str], float] = {}
    for o in final.opinions:
        for p, f, r in o.endorsed_associations:
            relevance[(p, f)] = max(relevance.get((p, f), 0.0), r)
    evidence = {a.key: a for a in tool_evidence}
    remembered = {pid for cases in memory_retrievals.values() for c in cases
                  for pid in c.get("recommended_phenotype_ids", ())}

    kept = []
    for key in sorted(relevance):
        ev = evidence.get(key)
        if ev is None:
            continue
        rel = relevance[key]
        if ev.p_adjusted < alpha and rel > rho:
            support = 1.0 if key[0] in remembered else 0.0
            weight = (1.0 - ev.p_adjusted) * rel * (1.0 + MEMORY_BONUS * support)
            kept.append((ev.with_relevance(rel), weight))
    kept.sort(key=lambda aw: (-aw[1], aw[0].phenotype_id, aw[0].factor_id))

    specialists = [o for o in final.opinions if o.agent_id != transcript.coordinator_id]
    votes: dict[str, int] = {}
    for o in specialists:
        for pid in set(o.recommended_phenotype_ids):
            votes[pid] = votes.get(pid, 0) + 1
    phenos = {a.phenotype_id for a, _ in kept}
    phenos |= {pid for pid, v in votes.items() if 2 * v > len(specialists)}

    conf_votes: dict[str, int] = {}
    for o in final.opinions:
        for f in set(o.proposed_confounders):
            conf_votes[f] = conf_votes.get(f, 0) + 1
    confounders = sorted(f for f, v in conf_votes.items() if v >= 2)

    hallucinations = sum(len(o.hallucinated_ids) for r in transcript.rounds for o in r.opinions)
    return ConsensusResult(
        tuple(sorted(phenos)), tuple(confounders),
        tuple(a for a, _ in kept), tuple(w for _, w in kept),
        len(transcript.rounds), final.converged, transcript, hallucinations,
    )


def memory_retrievals_for(panel: Sequence[AgentRole], record: RoundRecord) -> dict[str, list[dict]]:
    """Cases cited in ``record``, resolved against each agent's bank."""
    out = {}
    for agent in panel:
        cited = set(record.opinion(agent.agent_id).cited_memory_case_ids)
        out[agent.agent_id] = [
            {"case_id": c.case_id, "recommended_phenotype_ids": list(c.recommended_phenotype_ids)}
            for c in agent.memory.cases if c.case_id in cited
        ]
    return out


def stage_products(panel, cohort, catalog, factor_ids, family_size=None):
    """Per-specialist valuations and local effect sets."""
    valuations, effects = {}, {}
    for agent in panel:
        if agent.is_coordinator:
            continue
        v = evaluate_phenotypes(agent, cohort, catalog, factor_ids)
        valuations[agent.agent_id] = v
        effects[agent.agent_id] = assess_factors(agent, v, cohort, factor_ids, family_size)
    return valuations, effects


@dataclass
class ConsensusRun:
    result: ConsensusResult
    evidence: list[Association]
    memory_retrievals: dict


def run_consensus(panel: Sequence[AgentRole], cohort: Cohort | None, catalog: PhenotypeCatalog,
                  factors: Sequence[str], config: ConsensusConfig = ConsensusConfig(), *,
                  valuations=None, effects=None, evidence=None) -> ConsensusRun:
    """Discuss until convergence or ``max_rounds``, then aggregate.

    Stage products (valuations, local effects, global evidence) are computed
    from ``cohort`` unless supplied.
    """
    validate_panel(panel)
    factor_ids = tuple(f if isinstance(f, str) else f.id for f in factors)
    if valuations is None or effects is None:
        if cohort is None:
            raise ValidationError("either a cohort or precomputed stage products are required")
        family = len([p for p in catalog.ids if p in cohort.phenotype_ids]) * len(factor_ids)
        valuations, effects = stage_products(panel, cohort, catalog, factor_ids, family)
    if evidence is None:
        evidence = merge_global_effects([effects[a.agent_id] for a in panel if not a.is_coordinator])

    transcript = DiscussionTranscript([(a.agent_id, a.specialty_name) for a in panel])
    state = ConsensusState(transcript, catalog, factor_ids, valuations, effects, config.jobs)
    for t in range(1, config.max_rounds + 1):
        run_round(panel, state, t)
        if t > 1 and check_convergence(transcript.rounds[-1], transcript.rounds[-2], config.jaccard_threshold):
            transcript.mark_converged()
            break
    log.info("consensus: %d round(s), converged=%s", len(transcript), transcript.rounds[-1].converged)
    retrievals = memory_retrievals_for(panel, transcript.rounds[-1])
    result = aggregate_f_ap(transcript, retrievals, evidence, config.alpha, config.rho)
    return ConsensusRun(result, list(evidence), retrievals)


# ------------------------------------------------------------- persistence


def transcript_document(run: ConsensusRun, config: ConsensusConfig) -> dict:
    return {
        "config": asdict(config),
        **run.result.transcript.to_dict(),
        "evidence": [a.to_dict() for a in run.evidence],
        "memory_retrievals": run.memory_retrievals,
        "result": run.result.core_dict(),
    }


def save_transcript(path, run: ConsensusRun, config: ConsensusConfig) -> None:
    text = json.dumps(transcript_document(run, config), indent=2, sort_keys=True, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8", newline="\n")


def load_transcript(path) -> tuple[DiscussionTranscript, list[Association], dict, ConsensusConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        transcript = DiscussionTranscript.from_dict(doc)
        evidence = [Association.from_dict(a) for a in doc["evidence"]]
        config = ConsensusConfig(**doc["config"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: not a transcript document ({exc})") from exc
    return transcript, evidence, doc.get("memory_retrievals", {}), config, doc.get("result", {})


def replay(path) -> ConsensusResult:
    """Re-run the final aggregation from a persisted transcript."""
    transcript, evidence, retrievals, config, _ = load_transcript(path)
    return aggregate_f_ap(transcript, retrievals, evidence, config.alpha, config.rho)
