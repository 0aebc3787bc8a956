"""KMeans with k-means++ seeding, silhouette scoring and k selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import generator

log = logging.getLogger(__name__)

_CHUNK = 4096


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    n_restarts: int
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)
    restart_inertias: list[float] = field(default_factory=list)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class KSelectionReport:
    scores: dict[int, float]
    best_k: int
    subsample_size: int
    subsample_seed: int

    def to_dict(self) -> dict:
        return {
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "best_k": self.best_k,
            "subsample_size": self.subsample_size,
            "subsample_seed": self.subsample_seed,
        }


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ClusteringError("points must be an n x d matrix with d >= 1")
    if not np.isfinite(x).all():
        raise ClusteringError("points contain non-finite values")
    return x


def nearest(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest center per point and its squared distance (ties go to the lower id)."""
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n)
    for lo in range(0, n, _CHUNK):
        diff = x[lo : lo + _CHUNK, None, :] - centers[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        lab = dist.argmin(axis=1)
        labels[lo : lo + _CHUNK] = lab
        d2[lo : lo + _CHUNK] = dist[np.arange(len(lab)), lab]
    return labels, d2


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _repair_empty(x, centers, labels, d2, k):
    """Move each empty cluster's center onto the point farthest from its own center."""
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            return labels, d2
        far = int(d2.argmax())
        if d2[far] == 0:
            raise ClusteringError(f"fewer than {k} distinct points; cannot fill every cluster")
        centers[empty[0]] = x[far]
        labels, d2 = nearest(x, centers)
    raise ClusteringError("could not repair empty clusters")


def _lloyd(x, centers, max_iter, tol_abs):
    k = centers.shape[0]
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = nearest(x, centers)
        labels, d2 = _repair_empty(x, centers, labels, d2, k)
        history.append(float(d2.sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)
        new = sums / counts[:, None]
        shift = float(((new - centers) ** 2).sum())
        centers = new
        if shift <= tol_abs:
            break
    labels, d2 = nearest(x, centers)
    labels, d2 = _repair_empty(x, centers, labels, d2, k)
    history.append(float(d2.sum()))
    return centers, labels, float(d2.sum()), history, n_iter


def kmeans(
    points,
    k: int,
    seed: int = 0,
    n_restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-4,
) -> ClusterModel:
    """Lloyd's algorithm from k-means++ starts; keeps the lowest-inertia restart.

    ``tol`` is relative to the mean per-feature variance and bounds the total
    squared centroid movement at convergence. Restart ``r`` draws from the
    substream ``(seed, k, r)``, so models for different k are independent.
    """
    x = _as_points(points)
    if k < 1:
        raise ClusteringError("k must be >= 1")
    if x.shape[0] < k:
        raise ClusteringError(f"insufficient points: {x.shape[0]} < k={k}")
    if n_restarts < 1:
        raise ClusteringError("n_restarts must be >= 1")
    tol_abs = tol * float(x.var(axis=0).mean())
    best = None
    restart_inertias = []
    for r in range(n_restarts):
        rng = generator(seed, k, r)
        centers = kmeans_pp(x, k, rng)
        centers, labels, inertia, history, n_iter = _lloyd(x, centers, max_iter, tol_abs)
        restart_inertias.append(inertia)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia, history, n_iter)
    centers, labels, inertia, history, n_iter = best
    return ClusterModel(
        k=k,
        centroids=centers,
        assignments=labels,
        inertia=inertia,
        seed=seed,
        n_restarts=n_restarts,
        n_iter=n_iter,
        inertia_history=history,
        restart_inertias=restart_inertias,
    )


def silhouette(points, assignments, subsample_size: int = 10000, seed: int = 0) -> float:
    """Mean silhouette; exact when n <= subsample_size, else on a seeded subsample.

    Points in singleton clusters score 0, as do points with a = b = 0.
    """
    x = _as_points(points)
    labels = np.asarray(assignments)
    if labels.shape != (x.shape[0],):
        raise ClusteringError("assignments must have one label per point")
    if x.shape[0] > subsample_size:
        idx = np.sort(generator(seed).choice(x.shape[0], size=subsample_size, replace=False))
        x, labels = x[idx], labels[idx]
    uniq, lab = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ClusteringError("silhouette undefined for a single cluster")
    k = len(uniq)
    counts = np.bincount(lab, minlength=k).astype(float)
    onehot = np.zeros((x.shape[0], k))
    onehot[np.arange(x.shape[0]), lab] = 1.0
    sq = (x * x).sum(axis=1)
    scores = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], 1024):
        xc = x[lo : lo + 1024]
        d2 = sq[lo : lo + 1024, None] + sq[None, :] - 2.0 * xc @ x.T
        dist = np.sqrt(np.maximum(d2, 0.0))
        # exact zeros on the diagonal so self-distance never leaks into a
        rows = np.arange(len(xc))
        dist[rows, rows + lo] = 0.0
        sums = dist @ onehot
        own = lab[lo : lo + 1024]
        own_n = counts[own]
        with np.errstate(invalid="ignore", divide="ignore"):
            a = sums[rows, own] / (own_n - 1)
            means = sums / counts
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(denom > 0, (b - a) / denom, 0.0)
        s[own_n == 1] = 0.0
        scores[lo : lo + 1024] = s
    return float(np.clip(scores.mean(), -1.0, 1.0))


def select_k(
    points,
    k_min: int = 4,
    k_max: int = 16,
    seed: int = 0,
    n_restarts: int = 10,
    subsample_size: int = 10000,
) -> tuple[ClusterModel, KSelectionReport]:
    """Fit every k in [k_min, k_max] and keep the best silhouette (ties go to the smaller k)."""
    x = _as_points(points)
    if not 1 <= k_min <= k_max:
        raise ClusteringError("need 1 <= k_min <= k_max")
    if x.shape[0] < k_max:
        raise ClusteringError(f"insufficient points: {x.shape[0]} < k_max={k_max}")
    scores: dict[int, float] = {}
    best_model = None
    best_score = -np.inf
    for k in range(k_min, k_max + 1):
        model = kmeans(x, k, seed=seed, n_restarts=n_restarts)
        score = silhouette(x, model.assignments, subsample_size, seed) if k > 1 else float("nan")
        scores[k] = score
        log.info("k=%d inertia=%.4f silhouette=%.4f", k, model.inertia, score)
        if best_model is None or score > best_score:
            best_model, best_score = model, score
    report = KSelectionReport(scores, best_model.k, min(subsample_size, x.shape[0]), seed)
    return best_model, report


def model_to_dict(model: ClusterModel, report: KSelectionReport | None = None, stats=None) -> dict:
    out = {
        "k": model.k,
        "seed": model.seed,
        "n_restarts": model.n_restarts,
        "inertia": model.inertia,
        "n_iter": model.n_iter,
        "sizes": model.sizes().tolist(),
        "centroids": model.centroids.tolist(),
    }
    if stats is not None:
        out["centroids_original_units"] = stats.inverse(model.centroids).tolist()
        out["feature_mean"] = stats.mean.tolist()
        out["feature_std"] = stats.std.tolist()
        out["feature_flagged"] = stats.flagged.tolist()
    if report is not None:
        out["selection"] = report.to_dict()
    return out


def write_model_json(dest: str | Path, model: ClusterModel, report=None, stats=None, names=None) -> None:
    payload = model_to_dict(model, report, stats)
    if names is not None:
        payload["features"] = list(names)
    Path(dest).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_assignments(dest: str | Path, route_ids: Sequence[int], assignments: Sequence[int]) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["route_id", "cluster"])
        for rid, c in zip(route_ids, assignments):
            w.writerow([rid, int(c)])


def read_assignments(path: str | Path) -> dict[int, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["route_id"]): int(r["cluster"]) for r in csv.DictReader(fh)}
