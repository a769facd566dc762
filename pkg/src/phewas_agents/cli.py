"""Command-line entry point.

Exit codes: 0 success, 1 validation error (including bad flags),
2 I/O or transport failure. Results go to stdout as JSON; progress goes
to stderr, one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .consensus import replay
from .data_io import SynthSpec, generate_synthetic_cohort, read_cohort, write_cohort_csv
from .diagnosis import (
    DEFAULT_SPECS, ClassifierKind, ClassifierSpec, build_feature_matrix, compare_phenotype_sets, diagnose,
)
from .domain import DISEASES, FACTOR_PREFIX, PHENO_PREFIX, PhenotypeCatalog, build_default_catalog, save_factors
from .errors import PhewasError, ProtocolError, TransportError, ValidationError
from .metrics import metric_report
from .pipeline import PipelineConfig, run_pipeline

log = logging.getLogger("phewas_agents")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _JsonLines(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "msg": record.getMessage()})


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def read_id_set(path) -> tuple[list[str], list[str]]:
    """Phenotype and factor ids from a one-id-per-line file.

    Lines may carry ``pheno.`` / ``factor.`` prefixes; bare ids are
    phenotypes. Blank lines and ``#`` comments are skipped.
    """
    phenos, factors = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        item = line.split("#", 1)[0].strip()
        if not item:
            continue
        if item.startswith(FACTOR_PREFIX):
            factors.append(item[len(FACTOR_PREFIX):])
        elif item.startswith(PHENO_PREFIX):
            phenos.append(item[len(PHENO_PREFIX):])
        else:
            phenos.append(item)
    return phenos, factors


def _catalog(path) -> PhenotypeCatalog:
    return PhenotypeCatalog.load(path) if path else build_default_catalog()


def _config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for flag in ("seed", "jobs", "max_rounds", "alpha", "rho"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return config.replace(**overrides) if overrides else config


def _specs(names, seed) -> list[ClassifierSpec]:
    if not names:
        return [ClassifierSpec(s.kind, seed=seed) for s in DEFAULT_SPECS]
    return [ClassifierSpec(ClassifierKind(n), seed=seed) for n in names]


def _features_from(args, cohort, set_path=None, report_path=None):
    if report_path:
        consensus = json.loads(Path(report_path).read_text(encoding="utf-8"))["consensus"]
        return build_feature_matrix(cohort, phenotype_ids=consensus["final_phenotype_ids"],
                                    confounder_ids=consensus["final_confounder_ids"])
    if set_path:
        phenos, factors = read_id_set(set_path)
        return build_feature_matrix(cohort, phenotype_ids=phenos, confounder_ids=factors)
    raise ValidationError("give a feature set (--set) or a report (--report)")


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    cohort = generate_synthetic_cohort(spec)
    write_cohort_csv(cohort, args.out)
    # factor kinds and level order travel in a sidecar next to the CSV
    save_factors(cohort.factors, Path(args.out).with_suffix(".factors.json"))
    _emit({"path": str(args.out), "n": cohort.n, "phenotypes": len(cohort.phenotype_ids),
           "factors": len(cohort.factors), "digest": cohort.digest})
    return 0


def cmd_ingest_check(args) -> int:
    cohort = read_cohort(args.cohort, args.factors)
    _emit({"ok": True, "n": cohort.n, "phenotypes": list(cohort.phenotype_ids),
           "factors": list(cohort.factor_ids), "missing_cells": int(cohort.pheno_missing.sum()
                                                                    + cohort.factor_missing.sum()),
           "digest": cohort.digest})
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    cohort = read_cohort(args.cohort, args.factors)
    validation = read_cohort(args.validate, args.factors) if args.validate else None
    out = Path(args.out)
    log.info("run: cohort n=%d, out=%s", cohort.n, out)
    outcome = run_pipeline(config, cohort, _catalog(args.catalog), out, validation)
    log.info("run: timings %s", {k: round(v, 3) for k, v in outcome.timings.items()})
    _emit({"out": str(out), "report": outcome.report.consensus, "metrics": outcome.report.metrics})
    return 0


def cmd_metrics(args) -> int:
    cohort = read_cohort(args.cohort, args.factors)
    phenos, _ = read_id_set(args.set)
    report = metric_report(phenos, cohort, _catalog(args.catalog), args.w_s, args.w_f)
    _emit(report.to_dict())
    return 0


def cmd_diagnose(args) -> int:
    cohort = read_cohort(args.cohort, args.factors)
    features = _features_from(args, cohort, args.set, args.report)
    diseases = args.diseases or [d for d in DISEASES if d in cohort.disease_names]
    reports = diagnose(cohort, features, diseases, _specs(args.classifier, args.seed), args.folds,
                       args.seed, args.jobs)
    _emit({"n_features": features.width, "n_excluded": features.n_excluded,
           "reports": [r.to_dict() for r in reports]})
    return 0


def cmd_compare(args) -> int:
    cohort = read_cohort(args.cohort, args.factors)
    fa = _features_from(args, cohort, args.set_a)
    fb = _features_from(args, cohort, args.set_b)
    diseases = args.diseases or [d for d in DISEASES if d in cohort.disease_names]
    rep = compare_phenotype_sets(cohort, fa, fb, diseases, _specs(args.classifier, args.seed), args.folds,
                                 args.seed, (args.label_a, args.label_b), args.jobs)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv(), encoding="utf-8", newline="\n")
    _emit(rep.to_dict())
    return 0


def cmd_replay(args) -> int:
    result = replay(args.transcript)
    core = result.core_dict()
    if args.check:
        report = json.loads(Path(args.check).read_text(encoding="utf-8"))
        if report["consensus"] != core:
            log.error("replayed result differs from %s", args.check)
            _emit({"identical": False, "result": core})
            return 1
        core = {"identical": True, "result": core}
    _emit(core)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phewas-agents", description="Multi-agent imaging-phenotype association engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic cohort from a spec file")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest-check", help="validate a cohort CSV")
    s.add_argument("--cohort", required=True)
    s.add_argument("--factors")
    s.set_defaults(func=cmd_ingest_check)

    s = sub.add_parser("run", help="three-stage pipeline and report")
    s.add_argument("--cohort", required=True)
    s.add_argument("--catalog")
    s.add_argument("--config")
    s.add_argument("--factors")
    s.add_argument("--validate", help="second cohort on which associations are re-scored")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--max-rounds", type=int, dest="max_rounds")
    s.add_argument("--alpha", type=float)
    s.add_argument("--rho", type=float)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("metrics", help="score a phenotype-id set")
    s.add_argument("--set", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--catalog")
    s.add_argument("--factors")
    s.add_argument("--w-s", type=float, default=0.5, dest="w_s")
    s.add_argument("--w-f", type=float, default=0.5, dest="w_f")
    s.set_defaults(func=cmd_metrics)

    for name, fn, help_ in (("diagnose", cmd_diagnose, "cross-validate classifiers per disease"),
                            ("compare", cmd_compare, "paired comparison of two feature sets")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--cohort", required=True)
        s.add_argument("--factors")
        if name == "diagnose":
            s.add_argument("--set")
            s.add_argument("--report", help="take features from a report's consensus")
        else:
            s.add_argument("--set-a", required=True, dest="set_a")
            s.add_argument("--set-b", required=True, dest="set_b")
            s.add_argument("--label-a", default="A", dest="label_a")
            s.add_argument("--label-b", default="B", dest="label_b")
            s.add_argument("--csv", help="also write the table as CSV")
        s.add_argument("--disease", action="append", dest="diseases")
        s.add_argument("--classifier", action="append", choices=[k.value for k in ClassifierKind])
        s.add_argument("--folds", type=int, default=5)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=fn)

    s = sub.add_parser("replay", help="recompute the consensus result from a transcript")
    s.add_argument("--transcript", required=True)
    s.add_argument("--check", help="report.json to compare against")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"phewas-agents: {exc}\n")
        return 1
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except (TransportError, ProtocolError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    except (PhewasError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
