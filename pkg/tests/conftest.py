import numpy as np
import pytest

from phewas_agents.data_io import DiseaseModel, SynthSpec, generate_synthetic_cohort
from phewas_agents.domain import (
    DISEASES, Cohort, Factor, FactorCategory, FactorKind, build_default_catalog, default_factors,
)

ORACLE_PHENOTYPES = [
    "lvedv", "lvesv", "lvsv", "lvef", "lvm",
    "rvedv", "rvsv", "rvef",
    "lav_max", "lav_min", "laef",
    "rav_max", "rasv", "raef",
    "aao_max_area", "aao_min_area", "aao_distensibility",
    "dao_max_area", "dao_min_area", "dao_distensibility",
]
ORACLE_PLANTED = [
    ("lvef", "systolic_bp", 0.30),
    ("lvm", "weight", 0.36),
    ("rvedv", "height", 0.42),
    ("lav_max", "cholesterol", 0.48),
    ("aao_distensibility", "physical_activity", 0.54),
    ("dao_max_area", "diastolic_bp", 0.60),
]
ORACLE_CONFOUNDERS = [
    ("age", ["LV", "RV", "LA", "AAo"], 0.25),
    ("sex", ["LV", "RV", "RA"], 0.30),
]


def oracle_spec(seed=42, n=5000, **kw) -> SynthSpec:
    return SynthSpec(
        seed=seed, n_participants=n,
        catalog=build_default_catalog().subset(ORACLE_PHENOTYPES),
        planted_associations=list(ORACLE_PLANTED),
        planted_confounders=list(ORACLE_CONFOUNDERS),
        **kw,
    )


def null_spec(seed=7, n=5000) -> SynthSpec:
    return SynthSpec(seed=seed, n_participants=n,
                     catalog=build_default_catalog().subset(ORACLE_PHENOTYPES))


def diagnosis_spec(seed=3, n=2000) -> SynthSpec:
    """Every disease driven mainly by LVEF; the other phenotypes are weak."""
    models = {
        d: DiseaseModel(intercept=-0.5 - 0.1 * i,
                        coefficients={"pheno.lvef": 2.0, "pheno.lvm": 0.2, "factor.age": 0.2})
        for i, d in enumerate(DISEASES)
    }
    return SynthSpec(seed=seed, n_participants=n,
                     catalog=build_default_catalog().subset(["lvef", "lvm", "rvedv", "lav_max", "aao_max_area"]),
                     disease_models=models)


@pytest.fixture(scope="session")
def catalog():
    return build_default_catalog()


@pytest.fixture(scope="session")
def oracle_cohort():
    return generate_synthetic_cohort(oracle_spec())


@pytest.fixture(scope="session")
def null_cohort():
    return generate_synthetic_cohort(null_spec())


def tiny_cohort(pheno: dict, factors: dict | None = None, factor_defs=None, labels=None) -> Cohort:
    """Cohort from column dicts; None marks a missing cell."""
    n = len(next(iter(pheno.values())))
    pids = list(pheno)
    pv = np.array([[np.nan if pheno[p][i] is None else pheno[p][i] for p in pids] for i in range(n)], dtype=float)
    factors = factors or {}
    if factor_defs is None:
        factor_defs = [Factor(f, f, FactorCategory.DEMOGRAPHICS, FactorKind.CONTINUOUS) for f in factors]
    fids = [f.id for f in factor_defs]
    fv = np.array([[np.nan if factors[f][i] is None else factors[f][i] for f in fids] for i in range(n)],
                  dtype=float).reshape(n, len(fids))
    return Cohort([f"P{i:03d}" for i in range(n)], pids, pv, np.isnan(pv), factor_defs, fv, np.isnan(fv),
                  disease_labels=labels)


@pytest.fixture
def factors10():
    return default_factors()


class FakeEndpoint:
    """Local JSON endpoint; ``respond(payload) -> (status, body)`` decides each answer."""

    def __init__(self, respond):
        import json
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                outer.requests.append((dict(self.headers), payload))
                status, body = respond(payload)
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def endpoint():
    made = []

    def make(respond):
        e = FakeEndpoint(respond)
        made.append(e)
        return e

    yield make
    for e in made:
        e.close()


def random_metric_case(seed: int):
    """Random catalog slice plus a cohort whose columns are weakly dependent.

    Returns (catalog, cohort, ids). Correlations stay modest so that a
    perfect duplicate always lifts the mean |corr|.
    """
    rng = np.random.default_rng(seed)
    full = build_default_catalog()
    k = int(rng.integers(2, 9))
    ids = list(rng.choice(list(full.ids), size=k, replace=False))
    n = int(rng.integers(30, 200))
    shared = rng.normal(size=n)
    cols = {pid: list(0.2 * shared + rng.normal(size=n) * rng.uniform(0.5, 3.0) + rng.normal(0, 10))
            for pid in ids}
    return full.subset(ids), tiny_cohort(cols), ids


def blobs_cohort(n=400, seed=0, gap=4.0) -> Cohort:
    """Two well-separated Gaussian blobs; every disease label is the blob id."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.4).astype(int)
    cols = {"lvef": list(gap * y + rng.normal(size=n)), "lvm": list(-gap * y + rng.normal(size=n)),
            "rvedv": list(rng.normal(size=n))}
    labels = np.repeat(y[:, None], len(DISEASES), axis=1)
    return tiny_cohort(cols, labels=labels)


# ------------------------------------------------------------ acceptance log

ACCEPTANCE_RESULTS: dict[int, str] = {}


class criterion:
    """Context manager that records one PASS/FAIL line for an acceptance criterion.

    ``limit_s`` is checked after the body; the line is recorded even when an
    assertion inside the body fails.
    """

    def __init__(self, number: int, title: str, limit_s: float | None = None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._t0
        over = self.limit_s is not None and elapsed >= self.limit_s
        ok = exc_type is None and not over
        limit = f" (limit {self.limit_s:g}s)" if self.limit_s is not None else ""
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = (f"criterion {self.number} {'PASS' if ok else 'FAIL'}: {self.title} "
                f"[{elapsed:.2f}s{limit}] {detail}").rstrip()
        ACCEPTANCE_RESULTS[self.number] = line
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"criterion {self.number} took {elapsed:.2f}s, limit {self.limit_s}s")
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
