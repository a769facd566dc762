"""Disease-classification harness: features, three linear-ish classifiers, stratified CV."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .data_io import derive_seed, stream
from .domain import DISEASES, Cohort, FactorKind, FeatureVector
from .errors import SchemaError, ValidationError


# ------------------------------------------------------------------ features


@dataclass(frozen=True)
class FeatureMatrix:
    """Raw (unstandardized) design matrix over complete-case participants.

    ``rows`` index into the source cohort; ``scaled`` marks the continuous
    columns that get standardized inside each training fold.
    """

    participant_ids: tuple[str, ...]
    rows: np.ndarray
    columns: tuple[str, ...]
    X: np.ndarray
    scaled: np.ndarray
    n_excluded: int

    @property
    def width(self) -> int:
        return len(self.columns)

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(pid, tuple(map(float, row)), self.columns)
                for pid, row in zip(self.participant_ids, self.X)]

    def drop(self, columns: Sequence[str]) -> "FeatureMatrix":
        keep = [i for i, c in enumerate(self.columns) if c not in set(columns)]
        return FeatureMatrix(self.participant_ids, self.rows, tuple(self.columns[i] for i in keep),
                             self.X[:, keep], self.scaled[keep], self.n_excluded)


def build_feature_matrix(cohort: Cohort, consensus=None, *, phenotype_ids: Sequence[str] | None = None,
                         confounder_ids: Sequence[str] | None = None) -> FeatureMatrix:
    """Features from a consensus result (or explicit id lists).

    Phenotypes come first, then factors. Binary factors stay 0/1;
    categorical factors are one-hot encoded with the first level dropped.
    Participants missing any selected column are excluded.
    """
    if consensus is not None:
        phenotype_ids = consensus.final_phenotype_ids if phenotype_ids is None else phenotype_ids
        confounder_ids = consensus.final_confounder_ids if confounder_ids is None else confounder_ids
    phenotype_ids = list(phenotype_ids or ())
    confounder_ids = list(confounder_ids or ())
    if not phenotype_ids and not confounder_ids:
        raise ValidationError("no features selected")
    for p in phenotype_ids:
        if p not in cohort.phenotype_ids:
            raise SchemaError(f"selected phenotype {p!r} is not a cohort column")
    for f in confounder_ids:
        if f not in cohort.factor_ids:
            raise SchemaError(f"selected factor {f!r} is not a cohort column")

    ok = np.ones(cohort.n, dtype=bool)
    for p in phenotype_ids:
        ok &= ~cohort.phenotype_column(p)[1]
    for f in confounder_ids:
        ok &= ~cohort.factor_column(f)[1]
    rows = np.flatnonzero(ok)

    cols, names, scaled = [], [], []
    for p in phenotype_ids:
        cols.append(cohort.phenotype_column(p)[0][rows])
        names.append(f"pheno.{p}")
        scaled.append(True)
    for fid in confounder_ids:
        factor = cohort.factor(fid)
        v = cohort.factor_column(fid)[0][rows]
        if factor.kind is FactorKind.CATEGORICAL:
            for li, level in enumerate(factor.levels[1:], start=1):
                cols.append((v == li).astype(float))
                names.append(f"factor.{fid}={level}")
                scaled.append(False)
        else:
            cols.append(v)
            names.append(f"factor.{fid}")
            scaled.append(factor.kind is FactorKind.CONTINUOUS)
    X = np.column_stack(cols) if cols else np.zeros((rows.size, 0))
    return FeatureMatrix(tuple(cohort.participant_ids[i] for i in rows), rows, tuple(names),
                         X, np.array(scaled, dtype=bool), int(cohort.n - rows.size))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, scaled: np.ndarray) -> "Standardizer":
        mean = np.where(scaled, X.mean(axis=0), 0.0)
        sd = X.std(axis=0)
        scale = np.where(scaled & (sd > 0), sd, 1.0)
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


# --------------------------------------------------------------- classifiers


class ClassifierKind(str, Enum):
    LDA = "LDA"
    ADABOOST = "AdaBoost"
    LINEAR_SVM = "LinearSVM"


@dataclass(frozen=True)
class ClassifierSpec:
    kind: ClassifierKind
    rounds: int = 100
    lam: float = 1e-2
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ClassifierKind(self.kind))
        if self.rounds < 1:
            raise ValidationError("AdaBoost needs at least one round")
        if self.lam <= 0:
            raise ValidationError("SVM regularization must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch size must be positive")


# output column order: SVM, LDA, AdaBoost
DEFAULT_SPECS = (ClassifierSpec(ClassifierKind.LINEAR_SVM), ClassifierSpec(ClassifierKind.LDA),
                 ClassifierSpec(ClassifierKind.ADABOOST))


def _binary_labels(y) -> np.ndarray:
    y = np.asarray(y).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0/1")
    if y.min() == y.max():
        raise ValidationError("both classes must be present")
    return y.astype(int)


@dataclass(frozen=True)
class LinearScorer:
    w: np.ndarray
    b: float
    threshold: float = 0.0

    def score(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.w + self.b

    def predict(self, X) -> np.ndarray:
        return (self.score(X) > self.threshold).astype(int)


def train_lda(X, y, ridge: float | None = None) -> LinearScorer:
    """Two-class Fisher discriminant, thresholded at the projected class-mean midpoint."""
    X = np.asarray(X, dtype=float)
    y = _binary_labels(y)
    X0, X1 = X[y == 0], X[y == 1]
    mu0, mu1 = X0.mean(axis=0), X1.mean(axis=0)
    sw = (X0 - mu0).T @ (X0 - mu0) + (X1 - mu1).T @ (X1 - mu1)
    d = X.shape[1]
    if ridge is None:
        tr = float(np.trace(sw))
        ridge = 1e-6 * tr / d if tr > 0 else 1e-6
    w = np.linalg.solve(sw + ridge * np.eye(d), mu1 - mu0)
    return LinearScorer(w, float(-w @ (mu0 + mu1) / 2.0))


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    polarity: int
    alpha: float

    def predict(self, X) -> np.ndarray:
        return np.where(X[:, self.feature] > self.threshold, self.polarity, -self.polarity)


@dataclass
class AdaBoostModel:
    stumps: list[Stump] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)
    train_errors: list[float] = field(default_factory=list)
    bounds: list[float] = field(default_factory=list)
    threshold: float = 0.0

    def score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for s in self.stumps:
            out += s.alpha * s.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        return (self.score(X) > self.threshold).astype(int)


_ERR_FLOOR = 1e-10


def _best_stump(order, xs_sorted, ys, w):
    """Lowest weighted-error stump over all features at once.

    Split position i puts the first i sorted values at or below the
    threshold. Ties go to the lowest (polarity, feature, position) index.
    """
    n, d = xs_sorted.shape
    ws = w[order]
    ys_sorted = ys[order]
    wp = np.where(ys_sorted > 0, ws, 0.0)
    wn = ws - wp
    zero = np.zeros((1, d))
    pos_le = np.vstack([zero, np.cumsum(wp, axis=0)])
    neg_le = np.vstack([zero, np.cumsum(wn, axis=0)])
    err = pos_le + (neg_le[-1] - neg_le)
    valid = np.ones((n + 1, d), dtype=bool)
    valid[1:-1] = xs_sorted[1:] > xs_sorted[:-1]
    total = float(w.sum())
    both = np.stack([np.where(valid, err, np.inf), np.where(valid, total - err, np.inf)])
    flat = int(np.argmin(both.transpose(0, 2, 1).reshape(-1)))
    pol_i, rest = divmod(flat, d * (n + 1))
    j, i = divmod(rest, n + 1)
    xj = xs_sorted[:, j]
    if i == 0:
        thr = float(xj[0]) - 1.0
    elif i == n:
        thr = float(xj[-1])
    else:
        thr = float(xj[i - 1] + xj[i]) / 2.0
    return float(both[pol_i, i, j]), j, thr, 1 if pol_i == 0 else -1


def train_adaboost(X, y, T: int = 100) -> AdaBoostModel:
    """Discrete AdaBoost over decision stumps.

    Stops early when the best stump is no better than chance; a perfect
    stump is kept with its error floored at 1e-10 and ends training.
    The training-error bound prod 2*sqrt(e(1-e)) is checked every round.
    """
    X = np.asarray(X, dtype=float)
    ys = 2 * _binary_labels(y) - 1
    if T < 1:
        raise ValidationError("T must be >= 1")
    n = X.shape[0]
    w = np.full(n, 1.0 / n)
    order = np.argsort(X, axis=0, kind="mergesort")
    xs_sorted = np.take_along_axis(X, order, axis=0)
    model = AdaBoostModel()
    agg = np.zeros(n)
    bound = 1.0
    for _ in range(T):
        err, j, thr, pol = _best_stump(order, xs_sorted, ys, w)
        err = max(0.0, min(1.0, err))
        if err >= 0.5:
            break
        e = max(err, _ERR_FLOOR)
        alpha = 0.5 * math.log((1.0 - e) / e)
        stump = Stump(j, thr, pol, alpha)
        h = stump.predict(X)
        model.stumps.append(stump)
        model.errors.append(err)
        agg += alpha * h
        bound *= 2.0 * math.sqrt(e * (1.0 - e))
        train_err = float(np.mean(np.where(agg > 0, 1, -1) != ys))
        model.train_errors.append(train_err)
        model.bounds.append(bound)
        assert train_err <= bound + 1e-12, "AdaBoost training-error bound violated"
        if err == 0.0:
            break
        w = w * np.exp(-alpha * ys * h)
        w /= w.sum()
    if not model.stumps:
        raise ValidationError("no stump beats chance on this data")
    return model


@dataclass(frozen=True)
class SvmModel(LinearScorer):
    objectives: tuple = ()


def hinge_objective(w, b, X, ys, lam) -> float:
    margins = ys * (X @ w + b)
    return 0.5 * lam * (float(w @ w) + b * b) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def train_linear_svm(X, y, lam: float = 1e-2, epochs: int = 20, *, seed: int = 0,
                     batch_size: int = 16) -> SvmModel:
    """Linear SVM by mini-batch Pegasos (step 1/(lam*t)), returning the averaged iterate.

    A constant feature carries the bias, so the bias is regularized too.
    ``objectives`` holds the primal objective of the averaged model after
    each epoch.
    """
    X = np.asarray(X, dtype=float)
    ys = (2 * _binary_labels(y) - 1).astype(float)
    if lam <= 0:
        raise ValidationError("lam must be positive")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    rng = stream(seed, "svm")
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    radius = 1.0 / math.sqrt(lam)
    t = 0
    objectives = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            t += 1
            batch = perm[start:start + batch_size]
            eta = 1.0 / (lam * t)
            viol = batch[ys[batch] * (Xa[batch] @ w) < 1.0]
            w *= 1.0 - eta * lam
            if viol.size:
                w += (eta / batch.size) * (ys[viol] @ Xa[viol])
            norm = float(np.linalg.norm(w))
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        objectives.append(hinge_objective(avg[:-1], avg[-1], X, ys, lam))
    return SvmModel(avg[:-1].copy(), float(avg[-1]), 0.0, tuple(objectives))


def train(spec: ClassifierSpec, X, y, seed: int | None = None):
    if spec.kind is ClassifierKind.LDA:
        return train_lda(X, y)
    if spec.kind is ClassifierKind.ADABOOST:
        return train_adaboost(X, y, spec.rounds)
    return train_linear_svm(X, y, spec.lam, spec.epochs, seed=spec.seed if seed is None else seed,
                            batch_size=spec.batch_size)


# ------------------------------------------------------------------- scoring


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with tied scores counted as half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = _binary_labels(labels)
    if s.size != y.size:
        raise ValidationError("scores and labels differ in length")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size)
    # average 1-based ranks over runs of equal scores
    bounds = np.flatnonzero(np.concatenate(([True], ss[1:] != ss[:-1], [True])))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = (lo + hi + 1) / 2.0
    n1 = int(y.sum())
    n0 = y.size - n1
    u = float(ranks[y == 1].sum()) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def recall(predictions, labels) -> float:
    p = np.asarray(predictions).ravel().astype(int)
    y = np.asarray(labels).ravel().astype(int)
    positives = int((y == 1).sum())
    if positives == 0:
        raise ValidationError("recall undefined without positive labels")
    return int(((p == 1) & (y == 1)).sum()) / positives


# ------------------------------------------------------------ cross-validation


def stratified_folds(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per row; each class is shuffled and dealt round-robin."""
    y = np.asarray(labels).ravel().astype(int)
    folds = np.empty(y.size, dtype=np.int64)
    rng = stream(seed, "folds")
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (np.arange(idx.size) + offset) % k
        offset = (offset + idx.size) % k
    return folds


def fold_digest(folds: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(folds, dtype=np.int64).tobytes()).hexdigest()


@dataclass(frozen=True)
class FoldResult:
    auc: float
    recall: float
    n_train: int
    n_test: int
    train_mean: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"auc": self.auc, "recall": self.recall, "n_train": self.n_train, "n_test": self.n_test}


def _mean_sd(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass(frozen=True)
class CVReport:
    disease: str
    classifier: str
    folds: tuple[FoldResult, ...]
    fold_digest: str
    positive_fraction: float
    n_excluded: int
    threshold: str

    @property
    def auc_mean(self) -> float:
        return _mean_sd([f.auc for f in self.folds])[0]

    @property
    def auc_sd(self) -> float:
        return _mean_sd([f.auc for f in self.folds])[1]

    @property
    def recall_mean(self) -> float:
        return _mean_sd([f.recall for f in self.folds])[0]

    @property
    def recall_sd(self) -> float:
        return _mean_sd([f.recall for f in self.folds])[1]

    def to_dict(self) -> dict:
        return {
            "disease": self.disease, "classifier": self.classifier,
            "folds": [f.to_dict() for f in self.folds],
            "auc_mean": self.auc_mean, "auc_sd": self.auc_sd,
            "recall_mean": self.recall_mean, "recall_sd": self.recall_sd,
            "fold_digest": self.fold_digest, "positive_fraction": self.positive_fraction,
            "n_excluded": self.n_excluded, "threshold": self.threshold,
        }


_THRESHOLDS = {
    ClassifierKind.LDA: "projected class-mean midpoint",
    ClassifierKind.ADABOOST: "score 0",
    ClassifierKind.LINEAR_SVM: "score 0",
}


def cross_validate(cohort: Cohort, features: FeatureMatrix, disease: str, spec: ClassifierSpec,
                   k: int = 5, seed: int = 0) -> CVReport:
    """Stratified k-fold CV; standardization is fit on the training folds only."""
    if features.width == 0:
        raise ValidationError("feature matrix has no columns")
    y = cohort.disease(disease)[features.rows].astype(int)
    pos = int(y.sum())
    if pos < k or y.size - pos < k:
        raise ValidationError(f"{disease}: need >= {k} positives and negatives, have {pos}/{y.size - pos}")
    folds = stratified_folds(y, k, derive_seed(seed, disease))
    results = []
    for f in range(k):
        train_idx = np.flatnonzero(folds != f)
        test_idx = np.flatnonzero(folds == f)
        scaler = Standardizer.fit(features.X[train_idx], features.scaled)
        Xtr = scaler.transform(features.X[train_idx])
        Xte = scaler.transform(features.X[test_idx])
        model = train(spec, Xtr, y[train_idx], derive_seed(spec.seed, seed, disease, spec.kind.value, f))
        results.append(FoldResult(auc(model.score(Xte), y[test_idx]),
                                  recall(model.predict(Xte), y[test_idx]),
                                  int(train_idx.size), int(test_idx.size),
                                  tuple(float(v) for v in scaler.mean)))
    return CVReport(disease, spec.kind.value, tuple(results), fold_digest(folds), pos / y.size,
                    features.n_excluded, _THRESHOLDS[spec.kind])


def diagnose(cohort: Cohort, features: FeatureMatrix, diseases: Sequence[str] = DISEASES,
             specs: Sequence[ClassifierSpec] = DEFAULT_SPECS, k: int = 5, seed: int = 0,
             jobs: int = 1) -> list[CVReport]:
    """Cross-validate every (disease, classifier) cell; output order is fixed."""
    cells = [(d, s) for s in specs for d in diseases]

    def run(cell):
        return cross_validate(cohort, features, cell[0], cell[1], k, seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, cells))
    return [run(c) for c in cells]


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonRow:
    disease: str
    classifier: str
    auc_a: float
    auc_b: float
    recall_a: float
    recall_b: float

    @property
    def delta_auc(self) -> float:
        return self.auc_b - self.auc_a

    @property
    def delta_recall(self) -> float:
        return self.recall_b - self.recall_a


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ComparisonRow, ...]
    diseases: tuple[str, ...]
    classifiers: tuple[str, ...]
    label_a: str = "A"
    label_b: str = "B"

    def cell(self, disease: str, classifier: str) -> ComparisonRow:
        for r in self.rows:
            if r.disease == disease and r.classifier == classifier:
                return r
        raise KeyError((disease, classifier))

    def summary(self) -> dict[str, dict[str, float]]:
        """Per classifier: mean and sample sd of the deltas over diseases."""
        out = {}
        for c in self.classifiers:
            rows = [r for r in self.rows if r.classifier == c]
            am, asd = _mean_sd([r.delta_auc for r in rows])
            rm, rsd = _mean_sd([r.delta_recall for r in rows])
            out[c] = {"delta_auc_mean": am, "delta_auc_sd": asd,
                      "delta_recall_mean": rm, "delta_recall_sd": rsd, "n_diseases": len(rows)}
        return out

    def to_dict(self) -> dict:
        return {
            "label_a": self.label_a, "label_b": self.label_b,
            "rows": [{"disease": r.disease, "classifier": r.classifier,
                      "auc_a": r.auc_a, "auc_b": r.auc_b, "delta_auc": r.delta_auc,
                      "recall_a": r.recall_a, "recall_b": r.recall_b, "delta_recall": r.delta_recall}
                     for r in self.rows],
            "summary": self.summary(),
        }

    def to_csv(self) -> str:
        """One block per classifier (set A, set B, delta rows), an AUC/Recall pair per disease,
        and mean ± sd of the deltas on the delta row."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        header = ["classifier", "set"]
        for d in self.diseases:
            header += [f"{d} AUC", f"{d} Recall"]
        header += ["delta AUC mean ± sd", "delta Recall mean ± sd"]
        wr.writerow(header)
        summary = self.summary()
        for c in self.classifiers:
            cells = {r.disease: r for r in self.rows if r.classifier == c}
            for label, get in ((self.label_a, lambda r: (r.auc_a, r.recall_a)),
                               (self.label_b, lambda r: (r.auc_b, r.recall_b)),
                               ("delta", lambda r: (r.delta_auc, r.delta_recall))):
                row = [c, label]
                for d in self.diseases:
                    a, rc = get(cells[d])
                    row += [f"{a:+.3f}" if label == "delta" else f"{a:.3f}",
                            f"{rc:+.3f}" if label == "delta" else f"{rc:.3f}"]
                if label == "delta":
                    s = summary[c]
                    row += [f"{s['delta_auc_mean']:+.3f} ± {s['delta_auc_sd']:.3f}",
                            f"{s['delta_recall_mean']:+.3f} ± {s['delta_recall_sd']:.3f}"]
                else:
                    row += ["", ""]
                wr.writerow(row)
        return buf.getvalue()


def compare_phenotype_sets(cohort: Cohort, features_a: FeatureMatrix, features_b: FeatureMatrix,
                           diseases: Sequence[str] = DISEASES, specs: Sequence[ClassifierSpec] = DEFAULT_SPECS,
                           k: int = 5, seed: int = 0, labels=("A", "B"), jobs: int = 1) -> ComparisonReport:
    """Paired CV of two feature sets; deltas are B minus A.

    Both sets are evaluated with the same seed, so folds coincide when
    they select the same participants.
    """
    rep_a = diagnose(cohort, features_a, diseases, specs, k, seed, jobs)
    rep_b = diagnose(cohort, features_b, diseases, specs, k, seed, jobs)
    rows = tuple(ComparisonRow(a.disease, a.classifier, a.auc_mean, b.auc_mean, a.recall_mean, b.recall_mean)
                 for a, b in zip(rep_a, rep_b))
    return ComparisonReport(rows, tuple(diseases), tuple(s.kind.value for s in specs), labels[0], labels[1])
