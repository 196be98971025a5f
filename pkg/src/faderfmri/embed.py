"""2D embeddings of latent vectors (PCA, exact t-SNE) and SVG scatter export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.spatial.distance import squareform, pdist

from .errors import DimensionError, DomainError

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


@dataclass
class EmbeddingResult:
    points: np.ndarray  # [N, 2]
    site: np.ndarray  # [N]
    method: str
    params: dict = field(default_factory=dict)
    subject_ids: list[str] | None = None
    kl_history: list[float] | None = None


def pca_2d(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    u, s, vt = np.linalg.svd(Xc, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component is positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1
    out = u[:, :2] * s[:2] * signs[:2]
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def _conditional_p(D2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity), by bisection on beta."""
    n = D2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(D2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            sw = w.sum()
            p = w / sw
            H = np.log(sw) + beta * np.dot(d, p)
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if np.isinf(hi) else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    return P


def _tsne_objective(P, logP_const, Y, exag):
    """-sum(exag * P * log num) + log Z + sum(P log P); equals KL(P || Q) when exag == 1."""
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    off = ~np.eye(len(Y), dtype=bool)
    return float(logP_const - exag * np.sum(P[off] * np.log(num[off])) + np.log(num.sum())), num


def tsne_2d(X: np.ndarray, perplexity: float = 15.0, n_iter: int = 500, seed: int = 0,
            learning_rate: float | None = None, early_exaggeration: float = 4.0, exaggeration_iters: int = 100):
    """Exact t-SNE with momentum, per-parameter gains and step rejection.

    A step that would raise the current objective is discarded, momentum is
    reset and the gains shrink. Returns ``(Y, kl_history)``; entry ``i`` is the
    objective after iteration ``i``, which is KL(P || Q) once exaggeration ends
    (and its exaggerated counterpart before that). ``learning_rate=None`` picks
    ``max(n / early_exaggeration / 4, 50)``.
    """
    n = X.shape[0]
    if learning_rate is None:
        learning_rate = max(n / early_exaggeration / 4.0, 50.0)
    D2 = squareform(pdist(X, "sqeuclidean"))
    P = _conditional_p(D2, perplexity)
    P = (P + P.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)
    logP_const = float(np.sum(P[P > 0] * np.log(P[P > 0])))
    rng = np.random.default_rng(seed)
    Y = pca_2d(X)
    std = Y[:, 0].std()
    Y = Y / (std if std > 0 else 1.0) * 1e-4 + 1e-6 * rng.standard_normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_history = []
    for it in range(n_iter):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        current, num = _tsne_objective(P, logP_const, Y, exag)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (exag * P - Q) * num
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)
        inc = np.sign(grad) != np.sign(update)
        gains = np.maximum(np.where(inc, gains + 0.2, gains * 0.8), 0.01)
        step = momentum * update - learning_rate * gains * grad
        cand = Y + step
        cand = cand - cand.mean(axis=0)
        value, _ = _tsne_objective(P, logP_const, cand, exag)
        if value <= current:
            Y, update = cand, step
        else:
            value = current
            update = np.zeros_like(Y)
            gains = np.maximum(gains * 0.5, 0.01)
        kl_history.append(value)
    return Y, kl_history


def embed_2d(latents, sites=None, method: str = "tsne", params: dict | None = None, subject_ids=None) -> EmbeddingResult:
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise DimensionError(f"latents must be [N, D] with N >= 3 and D >= 2, got {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError("latents must be finite")
    n = X.shape[0]
    sites = np.zeros(n, dtype=int) if sites is None else np.asarray(sites)
    params = dict(params or {})
    kl = None
    if method == "pca":
        Y = pca_2d(X)
    elif method == "tsne":
        params.setdefault("perplexity", 15.0)
        params.setdefault("n_iter", 500)
        params.setdefault("seed", 0)
        if params["perplexity"] >= n / 3:
            raise DomainError(f"perplexity {params['perplexity']} must be below N/3 = {n / 3:.2f}")
        Y, kl = tsne_2d(X, **params)
    else:
        raise DomainError(f"unknown embedding method {method!r}")
    return EmbeddingResult(Y, sites, method, params, list(subject_ids) if subject_ids is not None else None, kl)


def site_silhouette(points, sites) -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(np.asarray(points), np.asarray(sites)))


def render_scatter(result: EmbeddingResult, path, size: int = 480, radius: float = 3.0) -> None:
    """Write an SVG scatter (one colour per site) and ``<path>.csv`` with subject_id,x,y,site."""
    path = Path(path)
    pts = np.asarray(result.points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise DimensionError("embedding must hold at least three 2D points")
    ids = result.subject_ids or [str(i) for i in range(len(pts))]
    margin = 20.0
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = margin + (pts - lo) / span * (size - 2 * margin)
    sites = [int(s) for s in result.site]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f"<title>{escape(result.method)} embedding</title>",
    ]
    for (x, y), s, sid in zip(xy, sites, ids):
        colour = PALETTE[s % len(PALETTE)]
        lines.append(
            f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{radius}" fill="{colour}" fill-opacity="0.8">'
            f"<title>{escape(str(sid))} (site {s})</title></circle>"
        )
    for k, s in enumerate(sorted(set(sites))):
        lines.append(f'<text x="{size - 70}" y="{16 + 14 * k}" font-size="11" fill="{PALETTE[s % len(PALETTE)]}">site {s}</text>')
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n")
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "x", "y", "site"])
        for sid, (x, y), s in zip(ids, pts, sites):
            w.writerow([sid, repr(float(np.float32(x))), repr(float(np.float32(y))), s])


def read_points_csv(path):
    ids, pts, sites = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["subject_id"])
            pts.append((float(row["x"]), float(row["y"])))
            sites.append(int(row["site"]))
    return ids, np.array(pts), np.array(sites)
