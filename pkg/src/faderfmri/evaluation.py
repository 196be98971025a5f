"""Scoring, cross-validation orchestration and residual-site probing."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .core import FoldAssignment, SubjectRecord, index_records, make_loso_splits
from .errors import DomainError

REPORT_VERSION = 1

# (train_records, test_records, seed) -> scores for test_records
Pipeline = Callable[[Sequence[SubjectRecord], Sequence[SubjectRecord], int], Sequence[float]]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DomainError("scores and labels must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("labels must be binary")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("roc_auc needs both classes present")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fold_seed(base_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([base_seed, fold]).generate_state(1)[0])


@dataclass
class FoldResult:
    fold: int
    test_site: str
    auc: float | None
    n_test: int
    skipped: bool = False


@dataclass
class EvalReport:
    per_fold: list[FoldResult]
    mean_auc: float
    std_auc: float
    site_probe_accuracy: float | None = None
    config_echo: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    version: int = REPORT_VERSION

    @classmethod
    def from_folds(cls, per_fold, config_echo=None, warnings_=None, site_probe_accuracy=None):
        aucs = [f.auc for f in per_fold if not f.skipped]
        mean = float(np.mean(aucs)) if aucs else float("nan")
        std = float(np.std(aucs)) if aucs else float("nan")  # population std
        return cls(list(per_fold), mean, std, site_probe_accuracy, dict(config_echo or {}), list(warnings_ or []))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fold", "test_site", "auc", "n_test", "skipped"])
                for f in self.per_fold:
                    w.writerow([f.fold, f.test_site, "" if f.auc is None else repr(f.auc), f.n_test, int(f.skipped)])

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        folds = [FoldResult(**f) for f in d.pop("per_fold")]
        return cls(per_fold=folds, **d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def cross_validate(pipeline: Pipeline, records, folds: FoldAssignment, base_seed: int = 0,
                   config_echo: dict | None = None) -> EvalReport:
    """Train/score ``pipeline`` on each fold; single-class test folds are skipped with a warning."""
    by_id = index_records(records)
    results, notes = [], []
    for i, (train_ids, test_ids) in enumerate(folds.folds):
        train = [by_id[s] for s in train_ids]
        test = [by_id[s] for s in test_ids]
        labels = np.array([r.diagnosis for r in test])
        name = folds.names[i] if i < len(folds.names) else "mixed"
        if len(np.unique(labels)) < 2:
            msg = f"fold {i} ({name}): test set has a single class; skipped"
            warnings.warn(msg)
            notes.append(msg)
            results.append(FoldResult(i, name, None, len(test), skipped=True))
            continue
        scores = np.asarray(pipeline(train, test, fold_seed(base_seed, i)), dtype=np.float64)
        results.append(FoldResult(i, name, roc_auc(scores, labels), len(test)))
    echo = {"folds": folds.kind, "n_folds": len(folds), "base_seed": base_seed}
    echo.update(config_echo or {})
    return EvalReport.from_folds(results, echo, notes)


def loso_evaluate(pipeline: Pipeline, records, base_seed: int = 0, config_echo: dict | None = None,
                  site_names: Sequence[str] | None = None) -> EvalReport:
    folds = make_loso_splits(records, site_names)
    return cross_validate(pipeline, records, folds, base_seed, config_echo)


def site_probe(latents, sites, seed: int = 0, n_splits: int = 5) -> float:
    """Mean held-out accuracy of a multinomial logistic probe (stratified 5-fold CV)."""
    X = np.asarray(latents, dtype=np.float64)
    y = np.asarray(sites)
    if X.ndim != 2 or len(X) != len(y):
        raise DomainError("latents must be [N, D] with one site label per row")
    values, counts = np.unique(y, return_counts=True)
    if len(values) < 2:
        raise DomainError("site probe needs at least two sites")
    if counts.min() < 4:
        raise DomainError(f"site {values[counts.argmin()]} has only {counts.min()} members; need >= 4")
    cv = StratifiedKFold(n_splits=min(n_splits, int(counts.min())), shuffle=True, random_state=seed)
    accs = []
    for tr, te in cv.split(X, y):
        probe = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=2000))
        probe.fit(X[tr], y[tr])
        accs.append(float((probe.predict(X[te]) == y[te]).mean()))
    return float(np.mean(accs))
