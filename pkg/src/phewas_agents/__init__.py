"""Multi-agent phenome-wide association engine for cardiac imaging phenotypes."""

from .consensus import (
    ConsensusConfig, ConsensusResult, DiscussionTranscript, aggregate_f_ap, check_convergence,
    merge_global_effects, replay, run_consensus, run_round,
)
from .data_io import SynthSpec, generate_synthetic_cohort, load_cohort_csv, read_cohort, write_cohort_csv
from .domain import (
    DISEASES, AnatomicalStructure, Association, Cohort, Factor, FactorKind, FunctionCategory, Phenotype,
    PhenotypeCatalog, build_default_catalog, default_factors,
)
from .errors import (
    ConfigurationError, ConflictError, DegenerateInputError, PhewasError, ProtocolError, SchemaError,
    SpecError, TransportError, ValidationError,
)
from .metrics import coverage, dependency, metric_report, q_score
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConsensusConfig",
    "ConsensusResult",
    "DiscussionTranscript",
    "aggregate_f_ap",
    "check_convergence",
    "merge_global_effects",
    "replay",
    "run_consensus",
    "run_round",
    "SynthSpec",
    "generate_synthetic_cohort",
    "load_cohort_csv",
    "read_cohort",
    "write_cohort_csv",
    "DISEASES",
    "AnatomicalStructure",
    "Association",
    "Cohort",
    "Factor",
    "FactorKind",
    "FunctionCategory",
    "Phenotype",
    "PhenotypeCatalog",
    "build_default_catalog",
    "default_factors",
    "ConfigurationError",
    "ConflictError",
    "DegenerateInputError",
    "PhewasError",
    "ProtocolError",
    "SchemaError",
    "SpecError",
    "TransportError",
    "ValidationError",
    "coverage",
    "dependency",
    "metric_report",
    "q_score",
    "PipelineConfig",
    "run_pipeline",
]
