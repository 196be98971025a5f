"""Functional-connectivity baseline: band-pass, SVD parcellation, correlation features, RBF-SVM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import detrend
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .core import index_records, load_volume_series
from .errors import DimensionError, DomainError
from .evaluation import cross_validate


@dataclass
class Atlas:
    labels: np.ndarray  # [S, S, S] ints, 0 = background

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise DimensionError(f"atlas must be a 3D label volume, got shape {self.labels.shape}")
        if (self.labels < 0).any():
            raise DomainError("atlas labels must be non-negative")
        present = set(np.unique(self.labels).tolist()) - {0}
        missing = set(range(1, self.n_regions + 1)) - present
        if missing:
            raise DomainError(f"atlas regions without voxels: {sorted(missing)}")

    @property
    def n_regions(self) -> int:
        return int(self.labels.max())


def grid_atlas(S: int, per_axis: int) -> Atlas:
    """Partition the cube into ``per_axis**3`` equal boxes numbered 1..R in row-major order."""
    if S % per_axis:
        raise DomainError(f"side {S} is not divisible by {per_axis}")
    block = S // per_axis
    idx = np.arange(S) // block
    labels = idx[:, None, None] * per_axis**2 + idx[None, :, None] * per_axis + idx[None, None, :] + 1
    return Atlas(labels)


@dataclass
class FcGrid:
    C: list[float] = field(default_factory=lambda: [0.1, 1.0, 10.0])
    # multiples of 1/F, F = number of selected features
    gamma_scale: list[float] = field(default_factory=lambda: [1.0, 10.0, 0.1])
    k_features: int = 200
    inner_folds: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "FcGrid":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _standardize(x: np.ndarray, axis: int = 0) -> np.ndarray:
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x - mean, std, out=out, where=std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    return out


def bandpass_filter(ts, tr_seconds: float, low_hz: float = 0.01, high_hz: float = 0.1, standardize: bool = True):
    """Linear detrend, ideal FFT band-pass, then z-scoring along axis 0.

    Accepts ``[T]`` or ``[T, ...]``; every trailing column is filtered independently.
    Series with zero variance after filtering map to zeros.
    """
    x = np.asarray(ts, dtype=np.float64)
    T = x.shape[0]
    if T < 8:
        raise DimensionError(f"band-pass needs at least 8 samples, got {T}")
    nyquist = 1.0 / (2.0 * tr_seconds)
    if not (0 < low_hz < high_hz < nyquist):
        raise DomainError(f"band [{low_hz}, {high_hz}] Hz must satisfy 0 < low < high < Nyquist={nyquist}")
    x = detrend(x, axis=0, type="linear")
    spec = np.fft.rfft(x, axis=0)
    freqs = np.fft.rfftfreq(T, d=tr_seconds)
    keep = (freqs >= low_hz) & (freqs <= high_hz)
    spec[~keep] = 0
    y = np.fft.irfft(spec, n=T, axis=0)
    return _standardize(y) if standardize else y


def _region_signal(voxels: np.ndarray) -> np.ndarray:
    """First left singular vector times its singular value; sign follows the mean voxel series."""
    X = _standardize(voxels)
    u, s, _ = np.linalg.svd(X, full_matrices=False)
    sig = u[:, 0] * s[0]
    if np.dot(sig - sig.mean(), X.mean(axis=1)) < 0:
        sig = -sig
    return sig


def parcellate(series, atlas: Atlas) -> np.ndarray:
    """Region time series ``[T, R]`` from a ``[T, S, S, S]`` array (or VolumeSeries)."""
    data = getattr(series, "data", series)
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1:] != atlas.labels.shape:
        raise DimensionError(f"atlas shape {atlas.labels.shape} does not match frames {data.shape[1:]}")
    flat = data.reshape(data.shape[0], -1)
    labels = atlas.labels.ravel()
    out = np.empty((data.shape[0], atlas.n_regions))
    for r in range(1, atlas.n_regions + 1):
        cols = labels == r
        if not cols.any():
            raise DomainError(f"region {r} has no voxels")
        out[:, r - 1] = _region_signal(flat[:, cols])
    return out


def connectivity_matrix(region_ts) -> np.ndarray:
    """Pearson correlation between region columns; symmetric with an exact unit diagonal."""
    x = np.asarray(region_ts, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DimensionError(f"need [T, R] with T >= 3, got {x.shape}")
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc**2).sum(axis=0))
    flat = np.flatnonzero(norms <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=0)))
    if flat.size:
        raise DomainError(f"region {int(flat[0]) + 1} has a constant time series")
    xn = xc / norms
    m = xn.T @ xn
    m = np.clip((m + m.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return m


def flatten_upper(m) -> np.ndarray:
    """Row-major strict upper triangle, length R(R-1)/2."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    if np.abs(m - m.T).max(initial=0.0) > 1e-6:
        raise DomainError("matrix is not symmetric within 1e-6")
    return m[np.triu_indices(m.shape[0], k=1)]


def unflatten_upper(v, R: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (R * (R - 1) // 2,):
        raise DimensionError(f"vector of length {v.shape} does not fit R={R}")
    m = np.eye(R)
    iu = np.triu_indices(R, k=1)
    m[iu] = v
    m[(iu[1], iu[0])] = v
    return m


def select_features(X, y, k: int = 200) -> list[int]:
    """Indices of the k largest |weights| of an L2 logistic regression on standardized X.

    Ties are broken by lower index.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y) or len(X) < 2:
        raise DimensionError("X must be [N, F] with N >= 2 and one label per row")
    if len(np.unique(y)) < 2:
        raise DomainError("feature selection needs both classes")
    if not 1 <= k <= X.shape[1]:
        raise DomainError(f"k={k} must lie in [1, {X.shape[1]}]")
    Xs = StandardScaler().fit_transform(X)
    lr = LogisticRegression(C=1.0, max_iter=5000).fit(Xs, y)
    w = np.abs(lr.coef_.ravel())
    order = np.argsort(-w, kind="stable")
    return [int(i) for i in order[:k]]


def subject_features(series, atlas: Atlas, tr_seconds: float | None = None, low_hz=0.01, high_hz=0.1) -> np.ndarray:
    """Filter every voxel, parcellate, correlate, flatten."""
    data = np.asarray(getattr(series, "data", series), dtype=np.float64)
    tr = tr_seconds if tr_seconds is not None else series.tr_seconds
    filtered = bandpass_filter(data.reshape(data.shape[0], -1), tr, low_hz, high_hz).reshape(data.shape)
    return flatten_upper(connectivity_matrix(parcellate(filtered, atlas)))


def fit_fold(X_train, y_train, grid: FcGrid, seed: int = 0):
    """Select features and fit scaler + grid-searched RBF-SVM on training rows only."""
    k = min(grid.k_features, X_train.shape[1])
    idx = select_features(X_train, y_train, k)
    scaler = StandardScaler().fit(X_train[:, idx])
    F = len(idx)
    params = {"C": list(grid.C), "gamma": [g / F for g in grid.gamma_scale]}
    n_inner = max(2, min(grid.inner_folds, int(np.bincount(np.asarray(y_train)).min())))
    search = GridSearchCV(
        SVC(kernel="rbf"),
        params,
        scoring="roc_auc",
        cv=StratifiedKFold(n_splits=n_inner, shuffle=True, random_state=seed % (2**32)),
        refit=True,
    )
    search.fit(scaler.transform(X_train[:, idx]), y_train)
    return idx, scaler, search.best_estimator_


def fc_pipeline(features: dict, grid: FcGrid):
    """Cross-validation pipeline over precomputed per-subject connectivity vectors."""

    def pipeline(train, test, seed):
        Xtr = np.stack([features[r.subject_id] for r in train])
        ytr = np.array([r.diagnosis for r in train])
        Xte = np.stack([features[r.subject_id] for r in test])
        idx, scaler, svm = fit_fold(Xtr, ytr, grid, seed)
        return svm.decision_function(scaler.transform(Xte[:, idx]))

    return pipeline


def compute_features(records, atlas: Atlas) -> dict:
    # per-subject preprocessing uses no labels, so computing it once for all folds leaks nothing
    return {r.subject_id: subject_features(load_volume_series(r.series_path, r.subject_id), atlas) for r in records}


def fc_pipeline_evaluate(records, atlas: Atlas, folds, grid: FcGrid | None = None, base_seed: int = 0,
                         features: dict | None = None, config_echo: dict | None = None):
    grid = grid or FcGrid()
    if not grid.C or not grid.gamma_scale:
        raise DomainError("grid must contain at least one C and one gamma")
    if features is None:
        features = compute_features(records, atlas)
    echo = {"pipeline": "fc_svm", "grid": grid.__dict__, "n_regions": atlas.n_regions}
    echo.update(config_echo or {})
    return cross_validate(fc_pipeline(features, grid), records, folds, base_seed, echo)
