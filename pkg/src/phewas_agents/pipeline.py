"""Three-stage run: phenotype valuation, factor discovery, discussion and report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .agents import (
    COORDINATOR, AgentRole, FactorEffectSet, PhenotypeValuation, RemoteBackend, RemoteConfig,
    ScriptedPolicy, assess_factors, case_text, evaluate_phenotypes, validate_panel,
)
from .consensus import (
    ConsensusConfig, ConsensusResult, ConsensusRun, load_transcript, merge_global_effects,
    run_consensus, save_transcript, aggregate_f_ap,
)
from .domain import AnatomicalStructure, Association, Cohort, PhenotypeCatalog
from .errors import ConfigurationError, SchemaError, ValidationError
from .memory import EmbeddingSpec, MemoryBank, MemoryCase, embed, store
from .metrics import metric_report
from .stats import association_scan

log = logging.getLogger(__name__)

STAGE1 = "stage1.json"
STAGE2 = "stage2.json"
TRANSCRIPT = "transcript.json"
REPORT = "report.json"
MATRIX = "associations.csv"
RUN_META = "run_meta.json"

_PATH_FIELDS = ("catalog_path", "cohort_path", "validate_path", "out_dir", "memory_dir")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    alpha: float = 0.05
    rho: float = 0.3
    theta_rec: float = 0.6
    theta_conf: int = 3
    max_rounds: int = 10
    jaccard_threshold: float = 1.0
    w_s: float = 0.5
    w_f: float = 0.5
    backend: str = "scripted"
    # per-agent backend overrides, e.g. {"lv": "remote"}
    panel: dict = field(default_factory=dict)
    embedding_dimension: int = 4096
    remote_timeout: float = 30.0
    remote_retries: int = 2
    jobs: int = 1
    catalog_path: str | None = None
    cohort_path: str | None = None
    validate_path: str | None = None
    out_dir: str | None = None
    memory_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError("rho must lie in [0, 1)")
        if self.w_s < 0 or self.w_f < 0 or abs(self.w_s + self.w_f - 1.0) > 1e-12:
            raise ValidationError("coverage weights must be non-negative and sum to 1")
        if self.max_rounds < 1:
            raise ValidationError("max_rounds must be >= 1")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        for name in [self.backend, *self.panel.values()]:
            if name not in ("scripted", "remote"):
                raise ValidationError(f"unknown backend {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc

    def replace(self, **changes) -> "PipelineConfig":
        return PipelineConfig.from_dict({**self.to_dict(), **changes})

    @property
    def digest(self) -> str:
        """Hash of everything that affects results; file locations are left out."""
        body = {k: v for k, v in self.to_dict().items() if k not in _PATH_FIELDS}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def consensus_config(self) -> ConsensusConfig:
        return ConsensusConfig(self.max_rounds, self.alpha, self.rho, self.jaccard_threshold, self.jobs)

    def policy(self) -> ScriptedPolicy:
        return ScriptedPolicy(alpha=self.alpha, rho=self.rho, theta_rec=self.theta_rec, theta_conf=self.theta_conf)


def run_key(config: PipelineConfig, cohort: Cohort) -> str:
    return hashlib.sha256((config.digest + cohort.digest).encode()).hexdigest()[:12]


def build_panel(config: PipelineConfig, memory_dir=None, exclude_run: str | None = None) -> list[AgentRole]:
    """Six specialists (LV, RV, LA, RA, AAo, DAo) plus the coordinator.

    With ``memory_dir`` each agent's bank is loaded from ``<agent>.jsonl``;
    cases stored by the run ``exclude_run`` are hidden so a repeated run does
    not learn from its own earlier output.
    """
    policy = config.policy()
    embedding = EmbeddingSpec(dimension=config.embedding_dimension)
    roles = [(s.value.lower(), s) for s in AnatomicalStructure] + [("coordinator", COORDINATOR)]
    panel = []
    for agent_id, specialty in roles:
        kind = config.panel.get(agent_id, config.backend)
        if kind == "remote":
            remote = RemoteConfig.from_env(timeout=config.remote_timeout, retries=config.remote_retries)
            backend = RemoteBackend(remote, policy)
        else:
            backend = policy
        memory = None
        if memory_dir is not None:
            path = Path(memory_dir) / f"{agent_id}.jsonl"
            loaded = MemoryBank.load(path, agent_id, config.embedding_dimension)
            own = {c.case_id for c in loaded.cases if exclude_run and c.case_id.endswith(exclude_run)}
            cases = [c for c in loaded.cases if c.case_id not in own]
            memory = MemoryBank(agent_id, config.embedding_dimension, cases, path=path, hidden_ids=own)
        panel.append(AgentRole(agent_id, specialty, backend, memory,
                               seed=config.seed, embedding=embedding))
    validate_panel(panel)
    return panel


def working_catalog(catalog: PhenotypeCatalog, cohort: Cohort) -> PhenotypeCatalog:
    absent = [p for p in catalog.ids if p not in cohort.phenotype_ids]
    if absent:
        log.warning("%d catalog phenotype(s) have no cohort column and are skipped: %s",
                    len(absent), ", ".join(absent))
    return catalog.subset(p for p in catalog.ids if p in cohort.phenotype_ids)


def _fan_out(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _specialists(panel):
    specs = [a for a in panel if not a.is_coordinator]
    missing = set(AnatomicalStructure) - {a.specialty for a in specs}
    if missing:
        raise ConfigurationError(f"panel lacks specialists for {sorted(m.value for m in missing)}")
    return specs


def run_stage1(config: PipelineConfig, cohort: Cohort, catalog: PhenotypeCatalog,
               panel: Sequence[AgentRole]) -> list[PhenotypeValuation]:
    """One valuation per specialist, in panel order."""
    return _fan_out(lambda a: evaluate_phenotypes(a, cohort, catalog), _specialists(panel), config.jobs)


def run_stage2(config: PipelineConfig, cohort: Cohort, factors: Sequence[str],
               valuations: Sequence[PhenotypeValuation], panel: Sequence[AgentRole]
               ) -> tuple[list[FactorEffectSet], list[Association]]:
    """Local effect sets per specialist and their global merge.

    Bonferroni uses the whole phenome-wide family (all valued phenotypes x
    factors) so local and global adjusted p-values coincide.
    """
    by_agent = {v.agent_id: v for v in valuations}
    specs = _specialists(panel)
    family = sum(len(v.entries) for v in valuations) * len(factors)
    effects = _fan_out(lambda a: assess_factors(a, by_agent[a.agent_id], cohort, list(factors), family),
                       specs, config.jobs)
    return effects, merge_global_effects(effects)


def run_stage3(config: PipelineConfig, panel: Sequence[AgentRole], catalog: PhenotypeCatalog,
               factors: Sequence[str], valuations, effects, evidence, memory_key: str | None = None
               ) -> ConsensusRun:
    """Discussion plus one new memory case per agent."""
    run = run_consensus(panel, None, catalog, factors, config.consensus_config(),
                        valuations={v.agent_id: v for v in valuations},
                        effects={e.agent_id: e for e in effects}, evidence=evidence)
    if memory_key is not None:
        update_memory(panel, run.result, memory_key)
    return run


def update_memory(panel: Sequence[AgentRole], result: ConsensusResult, key: str) -> None:
    final = result.transcript.rounds[-1]
    for agent in panel:
        recs = final.opinion(agent.agent_id).recommended_phenotype_ids
        case_id = f"{agent.agent_id}-{key}"
        if agent.memory.has_case(case_id):
            continue
        text = case_text(agent, recs) if recs else f"{agent.specialty_name} analysis with no recommendation"
        note = (f"rounds={result.rounds_used} converged={result.converged} "
                f"associations={len(result.associations)} confounders={','.join(result.final_confounder_ids)}")
        case = MemoryCase(case_id, tuple(embed(agent.embedding, text, recs)),
                          f"{agent.specialty_name}: recommended {', '.join(recs) or 'nothing'}", recs, note)
        store(agent.memory, case)


# ------------------------------------------------------------------ reporting


def stars(p_adjusted: float) -> str:
    if p_adjusted < 0.01:
        return "**"
    if p_adjusted < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class PheWASReport:
    config_digest: str
    cohort_digest: str
    consensus: dict
    matrix: dict
    metrics: dict
    validation: dict | None = None
    transcript: str = TRANSCRIPT

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def association_matrix(phenotype_ids: Sequence[str], factor_ids: Sequence[str],
                       evidence: Sequence[Association]) -> dict:
    """Cells ``strength|p_adjusted|stars`` looked up in the global evidence."""
    by_key = {a.key: a for a in evidence}
    cells = []
    for p in phenotype_ids:
        row = []
        for f in factor_ids:
            a = by_key.get((p, f))
            row.append("" if a is None else f"{a.strength:.4f}|{a.p_adjusted:.4g}|{stars(a.p_adjusted)}")
        cells.append(row)
    return {"rows": list(phenotype_ids), "columns": list(factor_ids), "cells": cells}


def matrix_csv(matrix: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["phenotype_id", *matrix["columns"]])
    for pid, row in zip(matrix["rows"], matrix["cells"]):
        wr.writerow([pid, *row])
    return buf.getvalue()


def validate_associations(associations: Sequence[Association], cohort: Cohort) -> dict:
    """Re-score (never re-select) associations on a second cohort; Bonferroni over |A|."""
    out = []
    usable = [a for a in associations
              if a.phenotype_id in cohort.phenotype_ids and a.factor_id in cohort.factor_ids]
    for a in usable:
        scan = association_scan(cohort, [a.phenotype_id], [a.factor_id], family_size=len(usable))
        out.append(scan[0].to_dict() if scan else {"phenotype_id": a.phenotype_id, "factor_id": a.factor_id,
                                                   "skipped": scan.warnings[0][2]})
    return {"cohort_digest": cohort.digest, "associations": out}


def generate_report(result: ConsensusResult, config: PipelineConfig, cohort: Cohort,
                    catalog: PhenotypeCatalog, factor_ids: Sequence[str], evidence: Sequence[Association],
                    out_dir=None, validation_cohort: Cohort | None = None) -> PheWASReport:
    """Build the report; with ``out_dir`` also write report.json and associations.csv."""
    rows = catalog.sort_ids(result.final_phenotype_ids)
    matrix = association_matrix(rows, factor_ids, evidence)
    metrics = metric_report(rows, cohort, catalog, config.w_s, config.w_f)
    validation = validate_associations(result.associations, validation_cohort) if validation_cohort else None
    report = PheWASReport(config.digest, cohort.digest, result.core_dict(), matrix, metrics.to_dict(), validation)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / REPORT, report.to_json())
        _write(out / MATRIX, matrix_csv(matrix))
    return report


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _dump(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


# ------------------------------------------------------------------ end to end


@dataclass
class PipelineOutcome:
    report: PheWASReport
    run: ConsensusRun
    valuations: list[PhenotypeValuation]
    effects: list[FactorEffectSet]
    evidence: list[Association]
    panel: list[AgentRole]
    timings: dict


def run_pipeline(config: PipelineConfig, cohort: Cohort, catalog: PhenotypeCatalog, out_dir=None,
                 validation_cohort: Cohort | None = None, panel: Sequence[AgentRole] | None = None
                 ) -> PipelineOutcome:
    """All three stages. Per-stage timings go to run_meta.json, not the report,
    so that the report stays byte-identical across identical runs."""
    out = Path(out_dir) if out_dir is not None else None
    key = run_key(config, cohort)
    if panel is None:
        memory_dir = config.memory_dir or (out / "memory" if out is not None else None)
        panel = build_panel(config, memory_dir, exclude_run=key)
    factor_ids = list(cohort.factor_ids)
    work = working_catalog(catalog, cohort)
    timings = {}

    t0 = time.perf_counter()
    valuations = run_stage1(config, cohort, work, panel)
    timings["stage1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    effects, evidence = run_stage2(config, cohort, factor_ids, valuations, panel)
    timings["stage2"] = time.perf_counter() - t0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_stage_artifacts(out, config, cohort, valuations, effects, evidence)
    log.info("stages 1-2 done: %d valuations, %d associations in E_G", len(valuations), len(evidence))

    t0 = time.perf_counter()
    run = run_stage3(config, panel, work, factor_ids, valuations, effects, evidence, memory_key=key)
    timings["stage3"] = time.perf_counter() - t0
    if out is not None:
        save_transcript(out / TRANSCRIPT, run, config.consensus_config())

    t0 = time.perf_counter()
    report = generate_report(run.result, config, cohort, catalog, factor_ids, evidence, out, validation_cohort)
    timings["report"] = time.perf_counter() - t0
    if out is not None:
        _dump(out / RUN_META, {"config_digest": config.digest, "run_key": key, "timings_s": timings})
    return PipelineOutcome(report, run, list(valuations), list(effects), list(evidence), list(panel), timings)


def write_stage_artifacts(out: Path, config, cohort, valuations, effects, evidence) -> None:
    _dump(out / STAGE1, {"config_digest": config.digest, "cohort_digest": cohort.digest,
                         "valuations": [v.to_dict() for v in valuations]})
    _dump(out / STAGE2, {"config_digest": config.digest, "cohort_digest": cohort.digest,
                         "local": [e.to_dict() for e in effects],
                         "global": [a.to_dict() for a in evidence]})


def load_stage_artifacts(out_dir) -> tuple[list[PhenotypeValuation], list[FactorEffectSet], list[Association]]:
    out = Path(out_dir)
    try:
        s1 = json.loads((out / STAGE1).read_text(encoding="utf-8"))
        s2 = json.loads((out / STAGE2).read_text(encoding="utf-8"))
        valuations = [PhenotypeValuation.from_dict(v) for v in s1["valuations"]]
        effects = [FactorEffectSet.from_dict(e) for e in s2["local"]]
        evidence = [Association.from_dict(a) for a in s2["global"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{out}: malformed stage artifacts ({exc})") from exc
    return valuations, effects, evidence


def rerun_stage3(config: PipelineConfig, cohort: Cohort, catalog: PhenotypeCatalog, out_dir) -> ConsensusRun:
    """Stage 3 (and the report) from persisted stage-1/2 artifacts."""
    out = Path(out_dir)
    valuations, effects, evidence = load_stage_artifacts(out)
    key = run_key(config, cohort)
    panel = build_panel(config, config.memory_dir or out / "memory", exclude_run=key)
    work = working_catalog(catalog, cohort)
    run = run_stage3(config, panel, work, list(cohort.factor_ids), valuations, effects, evidence, memory_key=key)
    save_transcript(out / TRANSCRIPT, run, config.consensus_config())
    generate_report(run.result, config, cohort, catalog, list(cohort.factor_ids), evidence, out)
    return run


def report_from_artifacts(config: PipelineConfig, cohort: Cohort, catalog: PhenotypeCatalog, out_dir,
                          validation_cohort: Cohort | None = None) -> PheWASReport:
    """Regenerate report.json and associations.csv from transcript.json alone."""
    transcript, evidence, retrievals, cc, _ = load_transcript(Path(out_dir) / TRANSCRIPT)
    result = aggregate_f_ap(transcript, retrievals, evidence, cc.alpha, cc.rho)
    return generate_report(result, config, cohort, catalog, list(cohort.factor_ids), evidence, out_dir,
                           validation_cohort)
